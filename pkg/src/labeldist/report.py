"""CSV/JSON report writers.

Floats are written with ``repr`` so a rerun with the same seeds produces
byte-identical files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

SUMMARY_COLUMNS = (
    "step_size", "variant", "avg_mse", "kl_min", "kl_q1", "kl_median", "kl_q3", "kl_max", "n_test",
    "rel_improvement",
)


@dataclass
class ReportRow:
    step_size: float
    variant: str
    kl: np.ndarray
    avg_mse: float
    n_train: int
    n_test: int
    wall_time: float = 0.0
    rel_improvement: float | None = None

    def box(self) -> dict[str, float]:
        q = np.quantile(self.kl, [0.0, 0.25, 0.5, 0.75, 1.0])
        return dict(zip(("kl_min", "kl_q1", "kl_median", "kl_q3", "kl_max"), map(float, q)))


@dataclass
class Scatter:
    step_size: float
    variant: str
    true_p: np.ndarray
    est_p: np.ndarray


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def step_label(step: float) -> str:
    return f"{step:g}"


def add_relative_improvement(rows: Sequence[ReportRow]) -> None:
    """Fill ``(baseline - proposed) / baseline`` avg MSE on both rows of each step size."""
    by_step: dict[float, dict[str, ReportRow]] = {}
    for r in rows:
        by_step.setdefault(r.step_size, {})[r.variant] = r
    for pair in by_step.values():
        if {"proposed", "baseline"} <= pair.keys() and pair["baseline"].avg_mse > 0:
            rel = (pair["baseline"].avg_mse - pair["proposed"].avg_mse) / pair["baseline"].avg_mse
            for r in pair.values():
                r.rel_improvement = rel


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def emit_report(rows: Sequence[ReportRow], scatter: Sequence[Scatter], path: str | Path, run_info: dict) -> list[Path]:
    """Write ``summary.csv``, one ``scatter_<variant>_<step>.csv`` per scatter set, and ``run.json``."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create report directory {out}: {exc}") from exc
    written = [out / "summary.csv"]
    write_csv(
        written[0],
        SUMMARY_COLUMNS,
        (
            [r.step_size, r.variant, r.avg_mse, *r.box().values(), r.n_test, r.rel_improvement]
            for r in rows
        ),
    )
    for s in scatter:
        c = s.true_p.shape[1]
        p = out / f"scatter_{s.variant}_{step_label(s.step_size)}.csv"
        write_csv(p, [f"true_p{i}" for i in range(c)] + [f"est_p{i}" for i in range(c)],
                  (list(t) + list(e) for t, e in zip(s.true_p, s.est_p)))
        written.append(p)
    info = dict(run_info)
    info["rows"] = [
        {"step_size": r.step_size, "variant": r.variant, "avg_mse": r.avg_mse, "n_train": r.n_train,
         "n_test": r.n_test, "wall_time": r.wall_time, "rel_improvement": r.rel_improvement, **r.box()}
        for r in rows
    ]
    (out / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True, default=json_default))
    written.append(out / "run.json")
    return written


def json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_summary(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def format_table(summary: list[dict]) -> str:
    """Plain-text average-MSE table: one line per step size, proposed vs baseline."""
    steps: dict[str, dict[str, dict]] = {}
    for row in summary:
        steps.setdefault(row["step_size"], {})[row["variant"]] = row
    lines = [f"{'step':>8} {'proposed':>12} {'baseline':>12} {'rel. decr.':>11}"]
    for step in sorted(steps, key=float):
        pair = steps[step]
        prop = pair.get("proposed", {}).get("avg_mse", "")
        base = pair.get("baseline", {}).get("avg_mse", "")
        rel = next((r["rel_improvement"] for r in pair.values() if r.get("rel_improvement")), "")
        cells = [f"{float(v):12.5f}" if v else f"{'-':>12}" for v in (prop, base)]
        lines.append(f"{float(step):8g} {cells[0]} {cells[1]} {(f'{100 * float(rel):10.1f}%' if rel else '-'):>11}")
    return "\n".join(lines)
