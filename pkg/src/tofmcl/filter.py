"""Monte Carlo localization: particle pool, gated correction, parallel systematic resampling."""

from __future__ import annotations

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .grid_map import DistanceField, InvalidInputError, NumericPolicy, OccupancyGrid
from .models import (
    BeamGeometry,
    OdometryDelta,
    Pose2D,
    ToFScan,
    angle_diff,
    default_geometry,
    log_normalizer,
    stack_beams,
)
from .rng import DOMAIN_RESAMPLE, POOL_STREAM, uniform_pair

TWO_PI = 2.0 * math.pi

log = logging.getLogger(__name__)

# reductions run over fixed blocks so results do not depend on the worker count
BLOCK = 8
SUM_CHECK = 1e-3
# "gated": odometry accumulates and the motion model is sampled once per gate opening;
# "every": sampled on every odometry message
MOTION_UPDATES = ("gated", "every")


class InvalidMapError(InvalidInputError):
    pass


class ConsistencyError(RuntimeError):
    """An internal invariant of the filter was violated."""


@dataclass
class FilterConfig:
    n_particles: int = 4096
    sigma_odom: tuple[float, float, float] = (0.1, 0.1, 0.1)
    sigma_obs: float = 0.3
    r_max: float = 1.5
    d_xy: float = 0.1
    d_theta: float = 0.1
    policy: NumericPolicy = NumericPolicy.FP32
    seed: int = 0
    workers: int = 1
    motion_update: str = "gated"
    sigma_obs_unit: str = "meters"

    def __post_init__(self):
        self.policy = NumericPolicy.parse(self.policy)
        if self.motion_update not in MOTION_UPDATES:
            raise InvalidInputError(f"motion_update must be one of {MOTION_UPDATES}")
        if self.sigma_obs_unit not in ("cells", "meters"):
            raise InvalidInputError("sigma_obs_unit must be 'cells' or 'meters'")
        self.sigma_odom = tuple(float(s) for s in self.sigma_odom)
        if self.n_particles < 1:
            raise InvalidInputError("n_particles must be >= 1")
        if self.workers < 1:
            raise InvalidInputError("workers must be >= 1")
        if not (self.d_xy > 0 and self.d_theta > 0):
            raise InvalidInputError("d_xy and d_theta must be positive")
        if self.sigma_obs <= 0 or self.r_max <= 0 or min(self.sigma_odom) < 0:
            raise InvalidInputError("sigma_obs and r_max must be positive, sigma_odom non-negative")
        if not 0 <= self.seed < 2**64:
            raise InvalidInputError("seed must fit in 64 bits")

    def sigma_obs_meters(self, resolution: float) -> float:
        """Observation spread in meters; a cell-valued sigma scales with the map resolution."""
        return self.sigma_obs * resolution if self.sigma_obs_unit == "cells" else self.sigma_obs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = self.policy.value
        d["sigma_odom"] = list(self.sigma_odom)
        return d


class Workers:
    """Static-partition executor; one worker runs inline on the caller's thread."""

    def __init__(self, n: int):
        self.n = int(n)
        self._pool = ThreadPoolExecutor(self.n, thread_name_prefix="mcl") if self.n > 1 else None

    def run(self, fn: Callable, ranges: Sequence[tuple[int, int]]) -> list:
        if self._pool is None or len(ranges) == 1:
            return [fn(a, b) for a, b in ranges]
        return list(self._pool.map(lambda ab: fn(*ab), ranges))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None


def chunk_ranges(n: int, workers: int, block: int = BLOCK) -> list[tuple[int, int]]:
    """Contiguous, block-aligned, near-equal particle ranges; empty ranges dropped."""
    n_blocks = -(-n // block)
    edges = [min(n, (n_blocks * j // workers) * block) for j in range(workers + 1)]
    return [(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


class ParticlePool:
    """Double-buffered structure-of-arrays pool.

    ``store`` holds the policy-precision values (x, y, theta, weight rows);
    ``work`` mirrors them exactly in float64 for arithmetic. Writes go through
    :meth:`commit`, which rounds into ``store`` and reflects the rounding back.
    """

    def __init__(self, n: int, policy: NumericPolicy = NumericPolicy.FP32):
        self.n = int(n)
        self.policy = NumericPolicy.parse(policy)
        self.store = np.zeros((2, 4, self.n), dtype=self.policy.particle_dtype)
        self.work = np.zeros((2, 4, self.n), dtype=np.float64)
        self.active = 0

    @property
    def spare(self) -> int:
        return 1 - self.active

    def commit(self, start: int, end: int, buf: int | None = None) -> None:
        b = self.active if buf is None else buf
        s = self.store[b, :, start:end]
        s[...] = self.work[b, :, start:end]
        # a heading just below 2*pi may round up onto it
        over = s[2] >= TWO_PI
        if over.any():
            s[2, over] = s[2, over].astype(np.float64) - TWO_PI
        self.work[b, :, start:end] = s

    def swap(self) -> None:
        self.active = self.spare

    @property
    def x(self) -> np.ndarray:
        return self.work[self.active, 0]

    @property
    def y(self) -> np.ndarray:
        return self.work[self.active, 1]

    @property
    def theta(self) -> np.ndarray:
        return self.work[self.active, 2]

    @property
    def weights(self) -> np.ndarray:
        return self.work[self.active, 3]

    def poses(self) -> np.ndarray:
        return self.work[self.active, :3].T.copy()

    def set_state(self, x, y, theta, weights) -> None:
        """Overwrite the active buffer (rounded to the policy precision)."""
        w = self.work[self.active]
        w[0], w[1], w[2], w[3] = x, y, np.mod(theta, 2 * math.pi), weights
        self.commit(0, self.n)

    def copy(self) -> "ParticlePool":
        other = ParticlePool(self.n, self.policy)
        other.store[...] = self.store
        other.work[...] = self.work
        other.active = self.active
        return other


# --- operations -----------------------------------------------------------


def _workers_for(workers: "Workers | int | None", n: int) -> tuple[Workers, bool]:
    if isinstance(workers, Workers):
        return workers, False
    return Workers(1 if workers is None else workers), True


def init_uniform(config: FilterConfig, grid: OccupancyGrid, workers: "Workers | int | None" = None) -> ParticlePool:
    """Spread particles uniformly over Free cells with uniform headings and equal weights."""
    free = grid.free_cells()
    if free.size == 0:
        raise InvalidMapError("map has no Free cells")
    rows, cols = np.divmod(free, grid.width)
    pool = ParticlePool(config.n_particles, config.policy)
    ex, own = _workers_for(workers or config.workers, pool.n)
    work = pool.work[pool.active]

    def job(a, b):
        kernels.init_uniform(work, rows, cols, grid.origin[0], grid.origin[1], grid.resolution,
                             np.uint64(config.seed), a, b)
        pool.commit(a, b)

    try:
        ex.run(job, chunk_ranges(pool.n, ex.n))
    finally:
        if own:
            ex.close()
    return pool


def predict(pool: ParticlePool, u: OdometryDelta, config: FilterConfig, epoch: int,
            workers: "Workers | int | None" = None) -> ParticlePool:
    """Advance every particle through the noisy odometry model in place; weights untouched.

    Particle i draws from its own stream ``(seed, i, epoch)``.
    """
    ex, own = _workers_for(workers or config.workers, pool.n)
    work = pool.work[pool.active]
    sx, sy, st = config.sigma_odom

    def job(a, b):
        kernels.predict(work, u.dx, u.dy, u.dtheta, sx, sy, st, np.uint64(config.seed), epoch, a, b)
        pool.commit(a, b)

    try:
        ex.run(job, chunk_ranges(pool.n, ex.n))
    finally:
        if own:
            ex.close()
    return pool


def should_correct(motion: OdometryDelta, config: FilterConfig) -> bool:
    """True once accumulated motion exceeds the translation or rotation gate."""
    return math.hypot(motion.dx, motion.dy) > config.d_xy or abs(float(angle_diff(motion.dtheta, 0.0))) > config.d_theta


def correct(pool: ParticlePool, scans: "ToFScan | Sequence[ToFScan]", field: DistanceField,
            geoms: "dict[str, BeamGeometry] | BeamGeometry | None", config: FilterConfig,
            workers: "Workers | int | None" = None) -> bool:
    """Reweight by the beam end-point likelihood and normalize.

    Returns False (and leaves the pool untouched) when no beam is valid.
    """
    if isinstance(scans, ToFScan):
        scans = [scans]
    if geoms is None:
        geoms = default_geometry()
    elif isinstance(geoms, BeamGeometry):
        geoms = {s.sensor_id: geoms for s in scans}
    angles, ranges = stack_beams(scans, geoms)
    if angles.size == 0:
        return False
    ex, own = _workers_for(workers or config.workers, pool.n)
    n = pool.n
    work = pool.work[pool.active]
    lw = np.empty(n)
    scratch = np.empty(n)
    block_sums = np.zeros(-(-n // BLOCK))
    sigma = config.sigma_obs_meters(field.resolution)
    inv_two_var = 1.0 / (2.0 * sigma**2)
    lnorm = log_normalizer(sigma)
    ranges_ = chunk_ranges(n, ex.n)
    inv_res = 1.0 / field.resolution

    def loglik(a, b):
        return kernels.log_weights(work, angles, ranges, field.values, field.table, field.policy.quantized_map,
                                   field.origin[0], field.origin[1], inv_res, field.r_max,
                                   inv_two_var, lnorm, lw, a, b)

    try:
        shift = max(ex.run(loglik, ranges_))
        if not np.isfinite(shift):
            raise ConsistencyError("all particle weights vanished")
        ex.run(lambda a, b: kernels.exp_shift(lw, shift, scratch, block_sums, BLOCK, a, b), ranges_)
        total = float(np.sum(block_sums))
        inv_total = 1.0 / total

        def store(a, b):
            kernels.scale_weights(work, scratch, inv_total, a, b)
            pool.commit(a, b)

        ex.run(store, ranges_)
    finally:
        if own:
            ex.close()
    return True


@dataclass(frozen=True)
class WorkerShare:
    """Output arrows ``[out_start, out_end)`` drawn from inputs ``[in_start, in_end)``."""

    out_start: int
    out_end: int
    in_start: int
    in_end: int
    offset: float  # cumulative weight before in_start
    cum_start: int = 0  # the same, exactly, in fixed-point units


def _partition_fixed(fixed: np.ndarray, bounds: Sequence[tuple[int, int]], sums: Sequence[int], u0: float):
    n = fixed.shape[0]
    total = int(sum(sums))
    if total <= 0:
        raise ConsistencyError("weights sum to zero")
    q, r = divmod(total, n)
    # exact integer split of u0 * total (u0 is a dyadic float)
    num, den = float(u0).as_integer_ratio()
    offset, frac = divmod(num * total, den)
    carry = -(-n * (den - frac) // den)
    if not 0 <= offset < total:
        raise ConsistencyError("resampling offset outside the wheel")
    starts = np.cumsum([0] + list(sums[:-1]))
    shares = []
    for (a, b), s in zip(bounds, starts):
        i0 = kernels.first_arrow_at_or_above(int(s), offset, q, r, n, carry)
        shares.append([i0, a, b, int(s)])
    out = []
    for j, (i0, a, b, s) in enumerate(shares):
        i1 = shares[j + 1][0] if j + 1 < len(shares) else n
        out.append(WorkerShare(i0, i1, a, b, s / kernels.FIXED_ONE, s))
    return out, (offset, q, r, carry)


def _fixed_wheel(weights: np.ndarray, workers: int):
    """Fixed-point weights over an even input split, with per-range sums."""
    w = np.ascontiguousarray(weights, dtype=np.float64)
    # keeps every fixed-point arrow below 2**63
    if not (np.all(np.isfinite(w)) and w.min(initial=0.0) >= 0.0 and w.sum() <= 2.0):
        raise ConsistencyError("resampling needs finite, non-negative, normalized weights")
    n = w.shape[0]
    edges = [n * j // workers for j in range(workers + 1)]
    bounds = [(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]
    fixed = np.empty(n, dtype=np.int64)
    sums = [kernels.fixed_weights(w, fixed, a, b) for a, b in bounds]
    return fixed, bounds, sums


def resample_partition(weights: np.ndarray, workers: int, u0: float) -> list[WorkerShare]:
    """Split the resampling wheel among workers via their input partial sums.

    Inputs are divided evenly; worker j emits exactly the arrows
    ``u0 + i/N`` that land inside its cumulative-weight interval.
    """
    fixed, bounds, sums = _fixed_wheel(weights, workers)
    shares, _ = _partition_fixed(fixed, bounds, sums, u0)
    return shares


def systematic_resample_indices(weights: np.ndarray, u0: float, workers: int = 1) -> np.ndarray:
    """Source index of every output particle, computed share by share."""
    fixed, bounds, sums = _fixed_wheel(weights, workers)
    shares, wheel = _partition_fixed(fixed, bounds, sums, u0)
    idx = np.empty(fixed.shape[0], dtype=np.int64)
    for sh in shares:
        if sh.out_end > sh.out_start:
            kernels.systematic_indices(fixed, sh.in_start, sh.cum_start,
                                       sh.out_start, sh.out_end, *wheel, idx)
    return idx


def resample_offset(seed: int, epoch: int, n: int) -> float:
    """The single uniform draw u0 in [0, 1/N) for one resampling round."""
    u, _ = uniform_pair(np.uint64(seed), POOL_STREAM, epoch, 0, DOMAIN_RESAMPLE)
    return u / n


def resample(pool: ParticlePool, config: FilterConfig, epoch: int,
             workers: "Workers | int | None" = None) -> ParticlePool:
    """Systematic resampling from the active buffer into the spare one, then swap."""
    weight_sum = float(np.sum(pool.weights))
    # written so that a NaN sum fails too
    if not abs(weight_sum - 1.0) <= SUM_CHECK:
        raise ConsistencyError(f"weights sum to {weight_sum:.6f}, expected 1")
    ex, own = _workers_for(workers or config.workers, pool.n)
    n = pool.n
    src = pool.work[pool.active]
    dst = pool.work[pool.spare]
    fixed = np.empty(n, dtype=np.int64)
    idx = np.empty(n, dtype=np.int64)
    bounds = chunk_ranges(n, ex.n)
    spare = pool.spare
    try:
        sums = ex.run(lambda a, b: kernels.fixed_weights(src[3], fixed, a, b), bounds)
        u0 = resample_offset(config.seed, epoch, n)
        shares, wheel = _partition_fixed(fixed, bounds, sums, u0)

        def job(j):
            sh = shares[j]
            if sh.out_end > sh.out_start:
                kernels.systematic_indices(fixed, sh.in_start, sh.cum_start,
                                           sh.out_start, sh.out_end, *wheel, idx)
                kernels.gather(src, dst, idx, 1.0 / n, sh.out_start, sh.out_end)
                pool.commit(sh.out_start, sh.out_end, spare)

        ex.run(lambda j, _b: job(j), [(j, j) for j in range(len(shares))])
    finally:
        if own:
            ex.close()
    pool.swap()
    return pool


def estimate_pose(pool: ParticlePool, workers: "Workers | int | None" = None) -> Pose2D:
    """Weighted mean position and weighted circular-mean heading."""
    ex, own = _workers_for(workers, pool.n)
    work = pool.work[pool.active]
    sums = np.zeros((5, -(-pool.n // BLOCK)))
    try:
        ex.run(lambda a, b: kernels.pose_sums(work, sums, BLOCK, a, b), chunk_ranges(pool.n, ex.n))
    finally:
        if own:
            ex.close()
    sw, sx, sy, ss, sc = sums.sum(axis=1)
    if not sw > 0:
        raise ConsistencyError("weights sum to zero")
    if math.hypot(ss, sc) < 1e-9 * sw:
        theta = float(work[2, int(np.argmax(work[3]))])
    else:
        theta = math.atan2(ss, sc)
    return Pose2D(sx / sw, sy / sw, theta)


# --- the filter -------------------------------------------------------------


@dataclass
class StepResult:
    estimate: Pose2D
    predicted: bool = False
    corrected: bool = False
    skipped_correction: bool = False


class MonteCarloLocalizer:
    """Asynchronous MCL: odometry drives prediction, scans drive correction.

    Odometry accumulates until it passes the ``d_xy``/``d_theta`` gate; then
    a correction becomes due and is applied (correct, resample, estimate) with
    the next scan. With ``motion_update="gated"`` the motion model is sampled
    once per gate opening on the accumulated odometry, so motion and
    observation updates share one rate; ``"every"`` samples it per message.
    The first scan after initialization is always used. A scan whose zones
    are all invalid is a no-op and leaves the correction due.
    """

    CHECKPOINT_MAGIC = b"TOFMCLCK"
    CHECKPOINT_VERSION = 1

    def __init__(self, grid: OccupancyGrid, field: DistanceField, config: FilterConfig,
                 geoms: dict[str, BeamGeometry] | None = None):
        if field.policy.quantized_map != config.policy.quantized_map:
            field = field.with_policy(config.policy)
        self.grid = grid
        self.field = field
        self.config = config
        self.geoms = geoms or default_geometry()
        self.workers = Workers(config.workers)
        self.reset()

    def reset(self) -> None:
        self.pool = init_uniform(self.config, self.grid, self.workers)
        self.motion_epoch = 0
        self.correction_epoch = 0
        self.pending = OdometryDelta(0.0, 0.0, 0.0)
        self.first_scan = True
        self.correction_due = False
        self.estimate = estimate_pose(self.pool, self.workers)

    def close(self) -> None:
        self.workers.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # individual stages, exposed for timing
    def predict(self, u: OdometryDelta) -> None:
        predict(self.pool, u, self.config, self.motion_epoch, self.workers)
        self.motion_epoch += 1

    def accumulate(self, u: OdometryDelta) -> None:
        acc = Pose2D(0.0, 0.0, 0.0).compose(self.pending).compose(u)
        self.pending = OdometryDelta(acc.x, acc.y, float(angle_diff(acc.theta, 0.0)))

    def wants_correction(self) -> bool:
        return self.first_scan or self.correction_due

    def correct(self, scans: Sequence[ToFScan]) -> bool:
        return correct(self.pool, scans, self.field, self.geoms, self.config, self.workers)

    def resample(self) -> None:
        resample(self.pool, self.config, self.correction_epoch, self.workers)
        self.correction_epoch += 1
        self.correction_due = False
        self.first_scan = False

    def compute_estimate(self) -> Pose2D:
        self.estimate = estimate_pose(self.pool, self.workers)
        return self.estimate

    def step(self, odometry: OdometryDelta | None = None,
             scans: "ToFScan | Sequence[ToFScan] | None" = None) -> StepResult:
        result = StepResult(self.estimate)
        if odometry is not None:
            self.accumulate(odometry)
            if self.config.motion_update == "every":
                self.predict(odometry)
                result.predicted = True
            if should_correct(self.pending, self.config):
                if self.config.motion_update == "gated":
                    self.predict(self.pending)
                    result.predicted = True
                self.pending = OdometryDelta(0.0, 0.0, 0.0)
                self.correction_due = True
        if isinstance(scans, ToFScan):
            scans = [scans]
        if scans and self.wants_correction():
            if self.correct(scans):
                self.resample()
                result.corrected = True
            else:
                result.skipped_correction = True
        if result.predicted or result.corrected:
            self.compute_estimate()
        result.estimate = self.current_estimate()
        return result

    def current_estimate(self) -> Pose2D:
        """Last particle estimate, carried forward by odometry not yet applied to the particles."""
        if self.config.motion_update == "gated":
            return self.estimate.compose(self.pending)
        return self.estimate

    # --- checkpoints ---

    def save_checkpoint(self, path: str | Path) -> None:
        meta = {
            "config": self.config.to_dict(),
            "motion_epoch": self.motion_epoch,
            "correction_epoch": self.correction_epoch,
            "pending": [self.pending.dx, self.pending.dy, self.pending.dtheta],
            "first_scan": self.first_scan,
            "correction_due": self.correction_due,
            "estimate": [self.estimate.x, self.estimate.y, self.estimate.theta],
            "active": self.pool.active,
            "dtype": self.pool.store.dtype.str,
        }
        blob = json.dumps(meta, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(self.CHECKPOINT_MAGIC)
            fh.write(struct.pack("<HI", self.CHECKPOINT_VERSION, len(blob)))
            fh.write(blob)
            fh.write(np.ascontiguousarray(self.pool.store).tobytes())

    def load_checkpoint(self, path: str | Path) -> None:
        data = Path(path).read_bytes()
        if data[:8] != self.CHECKPOINT_MAGIC:
            raise InvalidInputError(f"{path}: not a checkpoint")
        version, size = struct.unpack_from("<HI", data, 8)
        if version != self.CHECKPOINT_VERSION:
            raise InvalidInputError(f"{path}: checkpoint version {version} unsupported")
        meta = json.loads(data[14 : 14 + size])
        cfg = FilterConfig(**{**meta["config"], "sigma_odom": tuple(meta["config"]["sigma_odom"])})
        if cfg.n_particles != self.config.n_particles or cfg.policy != self.config.policy:
            raise InvalidInputError("checkpoint pool does not match this filter's configuration")
        store = np.frombuffer(data, dtype=np.dtype(meta["dtype"]), offset=14 + size).reshape(self.pool.store.shape)
        self.config = FilterConfig(**{**cfg.to_dict(), "workers": self.config.workers,
                                      "sigma_odom": tuple(cfg.sigma_odom)})
        self.pool.store[...] = store
        self.pool.work[...] = store
        self.pool.active = int(meta["active"])
        self.motion_epoch = int(meta["motion_epoch"])
        self.correction_epoch = int(meta["correction_epoch"])
        self.pending = OdometryDelta(*meta["pending"])
        self.first_scan = bool(meta["first_scan"])
        self.correction_due = bool(meta["correction_due"])
        self.estimate = Pose2D(*meta["estimate"])
