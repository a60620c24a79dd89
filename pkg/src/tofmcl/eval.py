"""Convergence, success and trajectory-error metrics for localization runs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .models import angle_diff

CONVERGED_XY = 0.2
CONVERGED_YAW = math.radians(36.0)
TRACKING_LIMIT = 1.0


class UndefinedMetricError(ValueError):
    pass


@dataclass
class RunResult:
    """Aligned per-tick estimate/truth streams of one localization run (arrays of shape (T, 3))."""

    estimate: np.ndarray
    truth: np.ndarray
    step_ns: np.ndarray | None = None
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.estimate = np.asarray(self.estimate, dtype=np.float64).reshape(-1, 3)
        self.truth = np.asarray(self.truth, dtype=np.float64).reshape(-1, 3)
        if self.estimate.shape != self.truth.shape:
            raise ValueError("estimate and truth streams must be aligned")

    def __len__(self) -> int:
        return self.truth.shape[0]

    @property
    def position_error(self) -> np.ndarray:
        d = self.estimate[:, :2] - self.truth[:, :2]
        return np.hypot(d[:, 0], d[:, 1])

    @property
    def yaw_error(self) -> np.ndarray:
        return np.abs(angle_diff(self.estimate[:, 2], self.truth[:, 2]))

    @property
    def convergence_tick(self) -> int | None:
        return detect_convergence(self)

    @property
    def success(self) -> bool:
        return classify_success(self)

    @property
    def ate(self) -> float | None:
        try:
            return ate_after_convergence(self)
        except UndefinedMetricError:
            return None


def detect_convergence(run: RunResult) -> int | None:
    """First tick within 0.2 m and 36 degrees of the truth, or None."""
    ok = (run.position_error <= CONVERGED_XY) & (run.yaw_error <= CONVERGED_YAW)
    hits = np.flatnonzero(ok)
    return int(hits[0]) if hits.size else None


def classify_success(run: RunResult) -> bool:
    """Converged, and no position error above 1 m from convergence to the end."""
    k = detect_convergence(run)
    if k is None:
        return False
    return bool(np.all(run.position_error[k:] <= TRACKING_LIMIT))


def ate_after_convergence(run: RunResult) -> float:
    """Position RMSE over the ticks from convergence on."""
    k = detect_convergence(run)
    if k is None:
        raise UndefinedMetricError("run never converged")
    e = run.position_error[k:]
    return float(np.sqrt(np.mean(e * e)))


def convergence_curve(runs: Sequence[RunResult], length: int | None = None) -> np.ndarray:
    """Fraction of runs converged at or before each tick."""
    if not runs:
        raise ValueError("need at least one run")
    length = length or max(len(r) for r in runs)
    curve = np.zeros(length)
    for r in runs:
        k = detect_convergence(r)
        if k is not None and k < length:
            curve[k:] += 1.0
    return curve / len(runs)


@dataclass
class Summary:
    runs: int
    success_rate: float
    median_ate: float | None
    median_convergence_s: float | None
    converged: int


def summarize(runs: Sequence[RunResult], rate_hz: float = 15.0) -> Summary:
    if not runs:
        raise ValueError("need at least one run")
    ates = [r.ate for r in runs if r.ate is not None]
    ticks = [r.convergence_tick for r in runs if r.convergence_tick is not None]
    return Summary(
        runs=len(runs),
        success_rate=float(np.mean([r.success for r in runs])),
        median_ate=float(np.median(ates)) if ates else None,
        median_convergence_s=float(np.median(ticks)) / rate_hz if ticks else None,
        converged=len(ticks),
    )


REPORT_FIELDS = [
    "sequence", "seed", "particles", "policy", "sensors", "workers", "ticks",
    "convergence_tick", "success", "ate_rmse_m", "step_p10_ns", "step_p50_ns", "step_p90_ns",
]


def report_row(run: RunResult) -> dict:
    k = run.convergence_tick
    row = {key: run.labels.get(key, "") for key in REPORT_FIELDS}
    row.update(ticks=len(run), convergence_tick="" if k is None else k, success=int(run.success),
               ate_rmse_m="" if run.ate is None else f"{run.ate:.6f}")
    if run.step_ns is not None and len(run.step_ns):
        p10, p50, p90 = np.percentile(run.step_ns, [10, 50, 90])
        row.update(step_p10_ns=int(p10), step_p50_ns=int(p50), step_p90_ns=int(p90))
    return row


def write_report(runs: Iterable[RunResult], path: str | Path) -> Path:
    """CSV, one row per run; ATE is the position RMSE after convergence."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in runs:
            w.writerow(report_row(r))
    return path


def read_report(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["success"] = bool(int(r["success"]))
        r["convergence_tick"] = int(r["convergence_tick"]) if r["convergence_tick"] != "" else None
        r["ate_rmse_m"] = float(r["ate_rmse_m"]) if r["ate_rmse_m"] != "" else None
        r["particles"] = int(r["particles"]) if r["particles"] else None
    return rows


def summarize_rows(rows: Sequence[dict], rate_hz: float = 15.0) -> Summary:
    if not rows:
        raise ValueError("need at least one run")
    ates = [r["ate_rmse_m"] for r in rows if r["ate_rmse_m"] is not None]
    ticks = [r["convergence_tick"] for r in rows if r["convergence_tick"] is not None]
    return Summary(
        runs=len(rows),
        success_rate=float(np.mean([r["success"] for r in rows])),
        median_ate=float(np.median(ates)) if ates else None,
        median_convergence_s=float(np.median(ticks)) / rate_hz if ticks else None,
        converged=len(ticks),
    )
