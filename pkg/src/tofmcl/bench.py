"""Per-stage step timing, multi-worker speedup and memory-footprint tables."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .filter import FilterConfig, MonteCarloLocalizer
from .grid_map import NumericPolicy, bytes_per_cell, bytes_per_particle, compute_edt, memory_footprint
from .sim import builtin_sequences, builtin_worlds, simulate_sequence

STAGES = ("observation", "motion", "resampling", "pose")
PARTICLE_GRID = (64, 256, 1024, 4096, 16384)
WORKER_GRID = (1, 2, 4, 8)
MIN_WARMUP = 3
MIN_REPS = 30


@dataclass
class TimingBreakdown:
    """Raw per-repetition nanoseconds for each stage and for the whole step."""

    particles: int
    workers: int
    stages: dict[str, np.ndarray]
    total: np.ndarray
    estimate: tuple[float, float, float] | None = None  # filter output after the last step

    @property
    def overhead(self) -> np.ndarray:
        # the step timer brackets the stages, so this is never negative
        return self.total - sum(self.stages[s] for s in STAGES)

    def median(self, stage: str) -> float:
        v = self.total if stage == "total" else self.overhead if stage == "overhead" else self.stages[stage]
        return float(np.median(v))

    def per_particle(self, stage: str) -> float:
        return self.median(stage) / self.particles

    def quantiles(self, stage: str) -> tuple[float, float, float]:
        v = self.total if stage == "total" else self.overhead if stage == "overhead" else self.stages[stage]
        p10, p50, p90 = np.percentile(v, [10, 50, 90])
        return float(p10), float(p50), float(p90)


@dataclass
class BenchInputs:
    grid: object
    field: object
    geoms: dict
    odometry: list = field(default_factory=list)
    scans: list = field(default_factory=list)


def default_inputs(seed: int = 0, ticks: int = 64, r_max: float = 1.5) -> BenchInputs:
    """Odometry and scans from the first built-in flight, cycled during timing."""
    world = builtin_worlds()["maze_world"]
    rec = simulate_sequence(world, builtin_sequences()[0], seed=seed)
    n = min(ticks, len(rec) - 1)
    odom = [rec.odometry(i) for i in range(1, n + 1)]
    scans = [[rec.scan(s, i) for s in sorted(rec.scans)] for i in range(1, n + 1)]
    return BenchInputs(world.grid, compute_edt(world.grid, r_max), rec.geometry(), odom, scans)


def time_steps(config: FilterConfig, inputs: BenchInputs, reps: int = MIN_REPS, warmup: int = MIN_WARMUP) -> TimingBreakdown:
    """Time ``reps`` full predict/correct/resample/estimate steps after ``warmup`` untimed ones."""
    if warmup < MIN_WARMUP or reps < MIN_REPS:
        raise ValueError(f"need at least {MIN_WARMUP} warmups and {MIN_REPS} repetitions")
    clock = time.perf_counter_ns
    out = {s: np.zeros(reps, dtype=np.int64) for s in STAGES}
    total = np.zeros(reps, dtype=np.int64)
    with MonteCarloLocalizer(inputs.grid, inputs.field, config, inputs.geoms) as mcl:
        for k in range(warmup + reps):
            j = k % len(inputs.odometry)
            t0 = clock()
            # message unpacking and the correction gate count as overhead
            u = inputs.odometry[j]
            mcl.accumulate(u)
            mcl.wants_correction()
            scans = list(inputs.scans[j])
            t1 = clock()
            mcl.predict(u)
            t2 = clock()
            ok = mcl.correct(scans)
            t3 = clock()
            if ok:
                mcl.resample()
            t4 = clock()
            mcl.compute_estimate()
            t5 = clock()
            if k >= warmup:
                r = k - warmup
                out["motion"][r] = t2 - t1
                out["observation"][r] = t3 - t2
                out["resampling"][r] = t4 - t3
                out["pose"][r] = t5 - t4
                total[r] = t5 - t0
        e = mcl.estimate
    return TimingBreakdown(config.n_particles, config.workers, out, total, (e.x, e.y, e.theta))


def bench_step(particles: Sequence[int] = PARTICLE_GRID, workers: Sequence[int] = WORKER_GRID,
               reps: int = MIN_REPS, warmup: int = MIN_WARMUP, config: FilterConfig | None = None,
               inputs: BenchInputs | None = None) -> list[TimingBreakdown]:
    """One breakdown per (N, workers) cell; every cell uses the same seed and inputs."""
    config = config or FilterConfig()
    inputs = inputs or default_inputs(r_max=config.r_max)
    return [time_steps(replace(config, n_particles=n, workers=w), inputs, reps, warmup)
            for n in particles for w in workers]


def speedup(results: Iterable[TimingBreakdown], stage: str = "total") -> dict[tuple[int, int], float]:
    """Median time with one worker over median time with w workers, keyed by (N, w)."""
    results = list(results)
    base = {r.particles: r.median(stage) for r in results if r.workers == 1}
    return {(r.particles, r.workers): base[r.particles] / r.median(stage)
            for r in results if r.particles in base and r.median(stage) > 0}


STEP_FIELDS = ["step", "particles", "workers", "p10_ns", "p50_ns", "p90_ns", "ns_per_particle"]


def step_rows(results: Iterable[TimingBreakdown]) -> list[dict]:
    """Long format, one row per (step, N, workers)."""
    rows = []
    for r in results:
        for stage in STAGES + ("overhead", "total"):
            p10, p50, p90 = r.quantiles(stage)
            rows.append({"step": stage, "particles": r.particles, "workers": r.workers,
                         "p10_ns": round(p10), "p50_ns": round(p50), "p90_ns": round(p90),
                         "ns_per_particle": f"{p50 / r.particles:.3f}"})
    return rows


def area_cells(area_m2: float, resolution: float = 0.05) -> int:
    """Cells needed to cover ``area_m2``, ignoring float noise in the division."""
    return int(math.ceil(area_m2 / (resolution * resolution) - 1e-9))


MEMORY_FIELDS = ["policy", "particles", "area_m2", "cells", "map_bytes", "particle_bytes", "total_bytes"]


def bench_memory(policies: Sequence["NumericPolicy | str"] = tuple(NumericPolicy),
                 particles: Sequence[int] = PARTICLE_GRID, areas_m2: Sequence[float] = (8.0, 16.0, 31.2, 64.0),
                 resolution: float = 0.05) -> list[dict]:
    """Footprint for every (policy, N, map area) combination."""
    rows = []
    for p in policies:
        p = NumericPolicy.parse(p)
        for a in areas_m2:
            cells = area_cells(a, resolution)
            for n in particles:
                rows.append({"policy": p.value, "particles": n, "area_m2": a, "cells": cells,
                             "map_bytes": cells * bytes_per_cell(p), "particle_bytes": n * bytes_per_particle(p),
                             "total_bytes": memory_footprint(cells, n, p)})
    return rows


def max_particles(budget_bytes: int, area_m2: float, policy: "NumericPolicy | str", resolution: float = 0.05) -> int:
    """Largest particle count that fits next to the map; 0 when the map alone overflows."""
    cells = area_cells(area_m2, resolution)
    left = budget_bytes - memory_footprint(cells, 0, policy)
    return max(0, left // bytes_per_particle(policy))


def write_csv(rows: Sequence[dict], fields: Sequence[str], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        w.writerows(rows)
    return path
