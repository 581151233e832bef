"""Run artifacts: iterate CSV, JSON summary, grid data files, and log audits."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .trcore import IterateRecord, RunResult, StepKind, TrParams, next_radius

SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "k", "f", "norm_g", "psi", "delta", "rho", "step_kind", "bundle_size", "wall_ms",
    "model_decrease", "cauchy_bound",
)
_REAL_COLUMNS = {"f", "norm_g", "psi", "delta", "rho", "wall_ms", "model_decrease", "cauchy_bound"}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, StepKind):
        return v.value
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_iterates_csv(path, records: Iterable[IterateRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])


def read_iterates_csv(path) -> list[IterateRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for c in CSV_COLUMNS:
                v = row[c]
                if v == "":
                    kw[c] = None
                elif c in _REAL_COLUMNS:
                    kw[c] = float(v)
                elif c == "step_kind":
                    kw[c] = StepKind(v)
                else:
                    kw[c] = int(v)
            out.append(IterateRecord(**kw))
    return out


def vector_digest(x) -> dict:
    x = np.ascontiguousarray(x, dtype=np.float64)
    return {
        "dim": int(x.shape[0]),
        "norm2": float(np.linalg.norm(x)),
        "min": float(x.min()),
        "max": float(x.max()),
        "sha256": hashlib.sha256(x.tobytes()).hexdigest(),
        "head": [float(v) for v in x[:8]],
    }


def run_summary(result: RunResult, params: TrParams, problem: str, **extra) -> dict:
    recs = result.records
    st = result.state
    summary = {
        "schema_version": SCHEMA_VERSION,
        "problem": problem,
        "status": st.status.value,
        "heuristic": bool(result.heuristic),
        "iterations": len(recs),
        "inexact_iterations": st.inexact_iterations,
        "counts": {
            "successful": sum(r.step_kind == StepKind.SUCCESSFUL for r in recs),
            "null": sum(r.step_kind == StepKind.NULL for r in recs),
            "standard": sum(r.psi is None for r in recs),
            "modified": sum(r.psi is not None for r in recs),
        },
        "final": {
            "f": st.f_x,
            "delta": st.delta,
            "norm_g": None if st.g is None else float(np.linalg.norm(st.g)),
            "x": vector_digest(st.x),
        },
        "params": asdict(params),
    }
    summary.update(extra)
    return summary


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_grid(path, values, m: Optional[int] = None) -> None:
    """One grid row per line (row-major ordering), whitespace separated."""
    v = np.asarray(values, dtype=float).reshape(-1)
    if m is None:
        m = int(round(np.sqrt(v.shape[0])))
        if m * m != v.shape[0]:
            m = v.shape[0]
    rows = v.reshape(-1, m)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def read_grid(path) -> np.ndarray:
    return np.loadtxt(path, ndmin=2)


def audit_radius(records: Sequence[IterateRecord], final_delta: float, params: TrParams, rtol: float = 0.0) -> list[str]:
    """Replay the radius table over a log and return every mismatch.

    ``delta`` of row ``k+1`` (or ``final_delta`` after the last row) must equal
    the table value computed from row ``k``'s ``rho`` and ``delta``. A refine
    switch does not touch the radius, so the replay runs straight through.
    """
    problems = []
    for i, r in enumerate(records):
        nxt = records[i + 1].delta if i + 1 < len(records) else final_delta
        want = next_radius(r.delta, r.rho, params)
        if abs(nxt - want) > rtol * abs(want):
            problems.append(f"k={r.k}: delta {nxt!r} but table gives {want!r} (rho={r.rho!r})")
        kind_ok = (r.step_kind == StepKind.SUCCESSFUL) == (r.rho > params.eta1)
        if not kind_ok:
            problems.append(f"k={r.k}: step kind {r.step_kind.value} inconsistent with rho={r.rho!r}")
    return problems


def audit_invariants(records: Sequence[IterateRecord], params: TrParams, restarts: Sequence[int] = ()) -> list[str]:
    """Cauchy decrease with ``params.mu`` and non-increasing ``f`` (per phase)."""
    problems = []
    restart = set(restarts)
    for i, r in enumerate(records):
        if r.model_decrease is not None and r.model_decrease < r.cauchy_bound * (1 - 1e-10):
            problems.append(f"k={r.k}: model decrease {r.model_decrease!r} < Cauchy bound {r.cauchy_bound!r}")
        if r.psi is not None and r.psi <= r.norm_g * r.delta and r.rho != 0.0:
            problems.append(f"k={r.k}: psi <= |g| delta but rho={r.rho!r}")
        if i > 0 and r.k not in restart and r.f > records[i - 1].f:
            problems.append(f"k={r.k}: f increased from {records[i - 1].f!r} to {r.f!r}")
    return problems
