"""Command-line harness.

    nstr solve <config> [key=value ...]
    nstr counterexample [key=value ...]
    nstr experiment1 [key=value ...]
    nstr table1 [key=value ...]

Configs are flat ``key = value`` files (``#`` starts a comment). Command-line
overrides take precedence. Unknown keys are errors.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import problems as P
from .errors import NstrError, PreconditionViolated
from .linalg import read_matrix_market
from .models import stationarity_measure
from .report import run_summary, write_grid, write_iterates_csv, write_json
from .trcore import RunResult, Status, TrParams, run

log = logging.getLogger("nstr")

EXIT_OK, EXIT_ERROR, EXIT_MAXITER = 0, 1, 2

_TR_KEYS = {f.name: f.type for f in fields(TrParams)}
_PROBLEM_KEYS = {
    "problem", "output", "x0", "seed", "workers",
    "a", "b", "model",
    "alpha", "z_d", "u_d",
    "m", "nu", "threshold", "inexact", "inexact_tol", "exact_tol",
    "matrix", "z_d_file",
}
_COMMAND_KEYS = {
    "counterexample": {"output", "a", "b", "x0", "check_preconditions", "post_delta"},
    "experiment1": {"output", "alpha", "z_d", "u_d", "u0_grid"},
    "table1": {"output", "meshes", "alphas", "nus", "workers", "threshold", "inexact"},
}

# reference values per (h, alpha, nu): total iterations and inexact-phase iterations
TABLE1_REFERENCE = {
    (20, 1e-1): [(46, 20)] * 4,
    (20, 1e-2): [(26, 22), (69, 20), (69, 20), (69, 20)],
    (20, 1e-3): [(35, 31), (28, 23), (26, 21), (72, 8)],
    (20, 1e-4): [(35, 30), (38, 33), (41, 35), (72, 8)],
    (40, 1e-1): [(53, 25)] * 4,
    (40, 1e-2): [(30, 26), (76, 24), (76, 24), (76, 24)],
    (40, 1e-3): [(46, 41), (36, 25), (29, 25), (79, 8)],
    (40, 1e-4): [(104, 40), (105, 37), (85, 42), (79, 8)],
}
TABLE1_NUS = (4.0, 8.0, 12.0, 18.0)


class ConfigError(NstrError):
    pass


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def parse_overrides(items) -> dict[str, str]:
    return parse_config_text("\n".join(items), "<command line>")


def _check_keys(cfg: dict, allowed: set) -> None:
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _floats(v: str) -> list[float]:
    return [float(s) for s in v.replace(",", " ").split()]


def tr_params_from(cfg: dict, base: TrParams) -> TrParams:
    changes = {}
    for key, typ in _TR_KEYS.items():
        if key not in cfg:
            continue
        v = cfg[key]
        if typ in ("bool", bool):
            changes[key] = _bool(v)
        elif typ in ("int", int):
            changes[key] = int(v)
        elif typ in ("str", str):
            changes[key] = v
        else:
            changes[key] = float(v)
    try:
        return base.with_(**changes)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _workers(cfg: dict) -> int:
    if "NSTR_WORKERS" in os.environ:
        return max(1, int(os.environ["NSTR_WORKERS"]))
    if "workers" in cfg:
        return max(1, int(cfg["workers"]))
    return os.cpu_count() or 1


def _status_exit(status: Status) -> int:
    return EXIT_MAXITER if status == Status.MAX_ITER else EXIT_OK


def final_stationarity(problem, x, delta: float, cap: int):
    """``(|g|, psi)`` at the final iterate; ``psi`` is None if the bundle cannot be built."""
    g = np.asarray(problem.subgradient(x))
    try:
        psi = stationarity_measure(problem.bundle_for(x, delta, cap)).psi
    except NstrError:
        psi = None
    return float(np.linalg.norm(g)), psi


def _write_run(out: Path, result: RunResult, params: TrParams, name: str, extra: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_iterates_csv(out / "iterates.csv", result.records)
    write_json(out / "summary.json", run_summary(result, params, name, **extra))


# ---------------------------------------------------------------------------
# solve


def build_problem(cfg: dict):
    """Return ``(problem, default TrParams, x0)`` for a solve config."""
    kind = cfg.get("problem")
    if kind is None:
        raise ConfigError("config needs a 'problem' key")
    inexact = _bool(cfg.get("inexact", "false"))
    vi_kw = {}
    if "exact_tol" in cfg:
        vi_kw["exact_tol"] = float(cfg["exact_tol"])
    if kind == "counterexample":
        cp = P.CounterexampleParams(float(cfg.get("a", 2.0)), float(cfg.get("b", 1.0)))
        prob = P.counterexample_problem(cp, cfg.get("model", "bundle"))
        x0 = np.array(_floats(cfg.get("x0", "-1")))
        return prob, P.counterexample_tr_params(max_iter=200), x0
    if kind == "experiment1":
        prob = P.experiment1_problem(
            float(cfg.get("alpha", 0.01)), float(cfg.get("z_d", 1.0)), float(cfg.get("u_d", -5.0)), **vi_kw
        )
        x0 = np.array(_floats(cfg.get("x0", "-3")))
        return prob, P.experiment1_tr_params(), x0
    if kind == "experiment2":
        m = int(cfg.get("m", 19))
        prob = P.experiment2_problem(
            m,
            float(cfg.get("alpha", 1e-3)),
            float(cfg.get("nu", 4.0)),
            threshold=float(cfg.get("threshold", 0.5)),
            inexact_tol=float(cfg.get("inexact_tol", 1e-6)) if _bool(cfg.get("inexact", "true")) else None,
            **vi_kw,
        )
        x0 = P.experiment2_start(prob) if cfg.get("x0", "default") == "default" else _vector(cfg["x0"], prob.dim)
        return prob, P.experiment2_tr_params(), x0
    if kind == "custom":
        if "matrix" not in cfg:
            raise ConfigError("custom problem needs 'matrix'")
        path = Path(cfg["matrix"])
        if not path.exists():
            raise ConfigError(f"matrix file not found: {path}")
        A = read_matrix_market(path)
        if "z_d_file" in cfg:
            z = np.loadtxt(cfg["z_d_file"]).reshape(-1)
        else:
            z = _vector(cfg.get("z_d", "1"), A.n)
        prob = P.custom_matrix_problem(
            A, float(cfg.get("nu", 1.0)), z, float(cfg.get("alpha", 1e-3)),
            None if "u_d" not in cfg else _vector(cfg["u_d"], A.n),
            inexact_tol=float(cfg.get("inexact_tol", 1e-6)) if inexact else None,
            **vi_kw,
        )
        x0 = _vector(cfg.get("x0", "0"), A.n)
        return prob, P.experiment2_tr_params(), x0
    raise ConfigError(f"unknown problem {kind!r}")


def _vector(text: str, n: int) -> np.ndarray:
    vals = _floats(text)
    if len(vals) == 1:
        return np.full(n, vals[0])
    if len(vals) != n:
        raise ConfigError(f"expected 1 or {n} values, got {len(vals)}")
    return np.array(vals)


def cmd_solve(cfg: dict) -> int:
    _check_keys(cfg, _PROBLEM_KEYS | set(_TR_KEYS))
    prob, base, x0 = build_problem(cfg)
    params = tr_params_from(cfg, base)
    out = Path(cfg.get("output", "nstr-out"))
    t0 = time.perf_counter()
    result = run(prob, params, x0)
    wall = time.perf_counter() - t0
    norm_g, psi = final_stationarity(prob, result.state.x, result.state.delta, params.bundle_cap)
    extra = {"wall_s": wall, "final_stationarity": {"norm_g": norm_g, "psi": psi}}
    if isinstance(prob, P.ViTrackingProblem):
        sol = prob.solution(result.state.x)
        extra["sets"] = {
            "zero": len(sol.zero_set),
            "inactive": len(sol.sets.inactive),
            "strongly_active": len(sol.sets.strongly_active),
            "biactive": len(sol.sets.biactive),
        }
        out.mkdir(parents=True, exist_ok=True)
        write_grid(out / "state.dat", sol.y)
        write_grid(out / "control.dat", result.state.x)
        write_grid(out / "dual.dat", sol.q)
    _write_run(out, result, params, getattr(prob, "name", cfg["problem"]), extra)
    print(f"{cfg['problem']}: {result.state.status.value} after {len(result.records)} iterations, "
          f"f = {result.state.f_x:.10g}, output in {out}")
    return _status_exit(result.state.status)


# ---------------------------------------------------------------------------
# counterexample


def cmd_counterexample(cfg: dict) -> int:
    _check_keys(cfg, _COMMAND_KEYS["counterexample"] | set(_TR_KEYS))
    cp = P.CounterexampleParams(float(cfg.get("a", 2.0)), float(cfg.get("b", 1.0)))
    x0 = float(cfg.get("x0", -1.0))
    local_params = tr_params_from(cfg, P.counterexample_tr_params(max_iter=40))
    bundle_params = tr_params_from({**cfg, "max_iter": cfg.get("max_iter", "200")}, P.counterexample_tr_params())
    out = Path(cfg.get("output", "counterexample-out"))

    replay_err = None
    try:
        P.check_counterexample_preconditions(cp, local_params, x0)
        preconditions = True
    except PreconditionViolated:
        if _bool(cfg.get("check_preconditions", "true")):
            raise
        preconditions = False

    local = run(P.counterexample_problem(cp, "local"), local_params, [x0], keep_trajectory=True)
    bundle = run(P.counterexample_problem(cp, "bundle"), bundle_params, [x0])
    if preconditions:
        ref = P.counterexample_reference_iterates(cp, local_params, x0, len(local.records))
        xs = [float(x[0]) for x in local.trajectory]
        replay_err = max(
            max(abs(xs[k] - ref[k][0]), abs(local.records[k].delta - ref[k][1])) for k in range(len(ref))
        )
    x_local = float(local.state.x[0])
    x_bundle = float(bundle.state.x[0])
    # the radius must cover the limit point 0 so that both pieces meeting there enter the bundle
    post_delta = float(cfg.get("post_delta", 1e-3))
    psi_post = stationarity_measure(
        P.counterexample_problem(cp, "bundle").bundle_for(local.state.x, post_delta, 0)
    ).psi
    verdict = {
        "schema_version": 1,
        "preconditions_hold": preconditions,
        "local_model_limit_near_0": abs(x_local) <= 1e-6,
        "bundle_model_limit_near_1": abs(x_bundle - 1.0) <= 1e-6,
        "replay_max_abs_err": replay_err,
        "local_final_x": x_local,
        "bundle_final_x": x_bundle,
        "post_check_psi": psi_post,
        "non_stationary_limit": psi_post > 1e3 * local_params.tol_stationarity,
    }
    _write_run(out / "local", local, local_params, "counterexample-local", {})
    _write_run(out / "bundle", bundle, bundle_params, "counterexample-bundle", {})
    write_json(out / "verdict.json", verdict)
    print(f"local model: x = {x_local:.3e} ({local.state.status.value}), psi there = {psi_post:.3g}")
    print(f"bundle model: x = {x_bundle:.12g} ({bundle.state.status.value})")
    if replay_err is not None:
        print(f"closed-form replay max abs error (x, delta): {replay_err:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment 1


def experiment1_grid(alpha=0.01, z_d=1.0, u_d=-5.0, u0_grid=None, params: TrParams | None = None):
    params = P.experiment1_tr_params() if params is None else params
    if u0_grid is None:
        u0_grid = [-5, -4, -3, -2, -1.5, -1, -0.5, 0, 0.5, 1, 1.5, 2, 3, 4, 5]
    u1, u2 = P.experiment1_minimizers(alpha, z_d, u_d)
    rows = []
    for u0 in u0_grid:
        prob = P.experiment1_problem(alpha, z_d, u_d)
        res = run(prob, params, [float(u0)])
        target = u1 if u0 <= 1 else u2
        rows.append({
            "u0": float(u0),
            "final_u": float(res.state.x[0]),
            "target": target,
            "error": abs(float(res.state.x[0]) - target),
            "iterations": len(res.records),
            "successful": sum(r.step_kind.value == "Successful" for r in res.records),
            "status": res.state.status.value,
            "result": res,
        })
    return rows


def cmd_experiment1(cfg: dict) -> int:
    _check_keys(cfg, _COMMAND_KEYS["experiment1"] | set(_TR_KEYS))
    params = tr_params_from(cfg, P.experiment1_tr_params())
    grid = _floats(cfg["u0_grid"]) if "u0_grid" in cfg else None
    alpha = float(cfg.get("alpha", 0.01))
    rows = experiment1_grid(alpha, float(cfg.get("z_d", 1.0)), float(cfg.get("u_d", -5.0)), grid, params)
    out = Path(cfg.get("output", "experiment1-out"))
    out.mkdir(parents=True, exist_ok=True)
    cols = ["u0", "final_u", "target", "error", "iterations", "successful", "status"]
    with open(out / "experiment1.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([f"{r[c]:.17g}" if isinstance(r[c], float) else r[c] for c in cols])
    for r in rows:
        _write_run(out / f"u0_{r['u0']:+g}", r["result"], params, "experiment1", {"u0": r["u0"]})
        print(f"u0 = {r['u0']:+5.2f} -> u = {r['final_u']:+.9f}  ({r['iterations']:3d} it, {r['status']})")
    worst = max(r["error"] for r in rows)
    print(f"max distance to the basin's minimizer: {worst:.2e}")
    return EXIT_MAXITER if any(r["status"] == Status.MAX_ITER.value for r in rows) else EXIT_OK


# ---------------------------------------------------------------------------
# table 1


def table1_cell(m: int, alpha: float, nu: float, threshold: float = 0.5, inexact: bool = True) -> dict:
    t0 = time.perf_counter()
    cell = {"h": f"1/{m + 1}", "m": m, "alpha": alpha, "nu": nu}
    try:
        prob = P.experiment2_problem(m, alpha, nu, threshold=threshold, inexact_tol=1e-6 if inexact else None)
        params = P.experiment2_tr_params()
        res = run(prob, params, P.experiment2_start(prob))
        norm_g, psi = final_stationarity(prob, res.state.x, res.state.delta, params.bundle_cap)
        sol = prob.solution(res.state.x)
        stat = min(norm_g, psi) if psi is not None else norm_g
        converged = res.state.status != Status.MAX_ITER and (
            stat <= 1e-5 or res.state.status == Status.STEP_TOO_SMALL
        )
        cell.update(
            iterations=len(res.records),
            inexact_iterations=res.state.inexact_iterations,
            status=res.state.status.value,
            norm_g=norm_g,
            psi=psi,
            stationarity=stat,
            zero_set=len(sol.zero_set),
            biactive=len(sol.sets.biactive),
            possibly_biactive=len(prob.possibly_biactive(res.state.x, res.state.delta)),
            converged=converged,
            f=res.state.f_x,
        )
    except NstrError as e:
        cell.update(status="FAIL", error=str(e), converged=False)
    cell["wall_s"] = time.perf_counter() - t0
    return cell


def _table1_cell_star(args):
    return table1_cell(*args)


def cmd_table1(cfg: dict) -> int:
    _check_keys(cfg, _COMMAND_KEYS["table1"])
    meshes = [int(v) for v in _floats(cfg.get("meshes", "20 40"))]
    alphas = _floats(cfg.get("alphas", "1e-1 1e-2 1e-3 1e-4"))
    nus = _floats(cfg.get("nus", "4 8 12 18"))
    threshold = float(cfg.get("threshold", 0.5))
    inexact = _bool(cfg.get("inexact", "true"))
    jobs = [(n - 1, a, nu, threshold, inexact) for n in meshes for a in alphas for nu in nus]
    workers = _workers(cfg)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_table1_cell_star, jobs))
    else:
        cells = [table1_cell(*j) for j in jobs]

    out = Path(cfg.get("output", "table1-out"))
    out.mkdir(parents=True, exist_ok=True)
    cols = ["h", "alpha", "nu", "iterations", "inexact_iterations", "reference", "status", "norm_g", "psi",
            "stationarity", "zero_set", "biactive", "possibly_biactive", "converged", "wall_s"]
    with open(out / "table1.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for c in cells:
            c["reference"] = _reference_cell(c["m"] + 1, c["alpha"], c["nu"])
            w.writerow(["" if c.get(k) is None else (f"{c[k]:.6g}" if isinstance(c.get(k), float) else c[k])
                        for k in cols])
    lines = []
    for n in meshes:
        lines.append(f"h = 1/{n}")
        lines.append("alpha    " + "".join(f"{'nu=' + format(nu, 'g'):>18}" for nu in nus))
        for a in alphas:
            row = f"{a:<8g} "
            for nu in nus:
                c = next(c for c in cells if c["m"] == n - 1 and c["alpha"] == a and c["nu"] == nu)
                if c["status"] == "FAIL" or not c["converged"]:
                    txt = "FAIL"
                else:
                    txt = f"{c['iterations']}({c['inexact_iterations']:02d})"
                ref = c["reference"] or ""
                row += f"{txt + ' [' + ref + ']':>18}"
            lines.append(row)
        lines.append("")
    (out / "table1.txt").write_text("\n".join(lines))
    print("\n".join(lines))
    ok = sum(bool(c["converged"]) for c in cells)
    print(f"{ok}/{len(cells)} cells converged")
    return EXIT_OK if ok >= 0.9 * len(cells) else EXIT_ERROR


def _reference_cell(n: int, alpha: float, nu: float):
    row = TABLE1_REFERENCE.get((n, alpha))
    if row is None or nu not in TABLE1_NUS:
        return None
    it, inex = row[TABLE1_NUS.index(nu)]
    return f"{it}({inex:02d})"


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="nstr", description="Nonsmooth trust-region experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_solve = sub.add_parser("solve", help="run one configured problem")
    p_solve.add_argument("config")
    p_solve.add_argument("overrides", nargs="*", metavar="key=value")
    for name, text in [
        ("counterexample", "replay the 1D failure example with both models"),
        ("experiment1", "scalar VI problem over a grid of starting points"),
        ("table1", "iteration counts of the 2D Laplacian problem"),
    ]:
        p = sub.add_parser(name, help=text)
        p.add_argument("overrides", nargs="*", metavar="key=value")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    try:
        overrides = parse_overrides(args.overrides)
        if args.command == "solve":
            path = Path(args.config)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            cfg = parse_config_text(path.read_text(), str(path))
            cfg.update(overrides)
            return cmd_solve(cfg)
        if args.command == "counterexample":
            return cmd_counterexample(overrides)
        if args.command == "experiment1":
            return cmd_experiment1(overrides)
        return cmd_table1(overrides)
    except (NstrError, OSError, ValueError) as e:
        print(f"nstr: error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
