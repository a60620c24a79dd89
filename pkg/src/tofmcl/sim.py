"""Deterministic maze worlds, trajectories and multizone ToF / odometry simulation."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid_map import CellState, InvalidInputError, OccupancyGrid
from .models import (
    FRONT,
    REAR,
    BeamGeometry,
    OdometryDelta,
    Pose2D,
    ToFScan,
    angle_diff,
    default_geometry,
    wrap_angle,
)
from .rng import DOMAIN_ODOM, DOMAIN_SENSOR, RandomStream

RESOLUTION = 0.05
SCHEMA = "tofmcl.sequence"
SCHEMA_VERSION = 1


class InvalidSpecError(InvalidInputError):
    pass


@dataclass
class World:
    """Vector walls plus their rasterization; ``regions`` name the structured rectangles."""

    grid: OccupancyGrid
    segments: np.ndarray  # (S, 4) rows of x0, y0, x1, y1
    regions: dict[str, tuple[float, float, float, float]] = field(default_factory=dict)
    name: str = ""

    @property
    def structured_area(self) -> float:
        known = np.count_nonzero(self.grid.cells != CellState.UNKNOWN)
        return known * self.grid.resolution**2


def rasterize(segments: np.ndarray, grid: OccupancyGrid) -> None:
    """Mark every cell touched by a segment Occupied (dense sampling along each segment)."""
    res = grid.resolution
    for x0, y0, x1, y1 in segments:
        n = max(2, int(math.ceil(math.hypot(x1 - x0, y1 - y0) / (res * 0.25))) + 1)
        t = np.linspace(0.0, 1.0, n)
        rows, cols = grid.world_to_cell(x0 + t * (x1 - x0), y0 + t * (y1 - y0))
        ok = (rows >= 0) & (rows < grid.height) & (cols >= 0) & (cols < grid.width)
        grid.cells[rows[ok], cols[ok]] = CellState.OCCUPIED


def raycast_many(segments: np.ndarray, ox: float, oy: float, angles: np.ndarray, max_range: float):
    """Exact distances to the nearest wall along each angle; ``hit`` is False past ``max_range``."""
    angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
    dx, dy = np.cos(angles)[:, None], np.sin(angles)[:, None]
    px, py = segments[:, 0][None, :], segments[:, 1][None, :]
    ex, ey = (segments[:, 2] - segments[:, 0])[None, :], (segments[:, 3] - segments[:, 1])[None, :]
    denom = dx * ey - dy * ex
    wx, wy = px - ox, py - oy
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (wx * ey - wy * ex) / denom
        s = (wx * dy - wy * dx) / denom
    ok = (np.abs(denom) > 1e-12) & (t >= 0.0) & (s >= 0.0) & (s <= 1.0)
    t = np.where(ok, t, np.inf)
    dist = t.min(axis=1) if t.shape[1] else np.full(angles.shape, np.inf)
    hit = dist <= max_range
    return np.where(hit, dist, np.inf), hit


def raycast(world: World, origin: tuple[float, float], azimuth: float, max_range: float) -> tuple[float, bool]:
    if not max_range > 0:
        raise InvalidInputError("max_range must be positive")
    d, h = raycast_many(world.segments, origin[0], origin[1], np.array([azimuth]), max_range)
    return float(d[0]), bool(h[0])


@dataclass(frozen=True)
class SensorNoise:
    range_sigma: float = 0.02
    dropout: float = 0.05
    max_range: float = 1.5

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidInputError("dropout must lie in [0, 1)")
        if self.range_sigma < 0 or self.max_range <= 0:
            raise InvalidInputError("bad sensor noise parameters")


def _scan_from_truth(truth: np.ndarray, hit: np.ndarray, geom: BeamGeometry, noise: SensorNoise,
                     normals: np.ndarray, uniforms: np.ndarray, sensor_id: str, t: float) -> ToFScan:
    """Expand per-column truth over the zone matrix and apply noise and dropout."""
    ranges = np.tile(np.where(hit, truth, 0.0), geom.rows) + noise.range_sigma * normals
    valid = np.tile(hit, geom.rows) & (uniforms >= noise.dropout) & (ranges > 0.0) & (ranges <= noise.max_range)
    return ToFScan(np.where(valid, ranges, 0.0), valid, sensor_id, t)


def simulate_scan(world: World, pose: Pose2D, geom: BeamGeometry, noise: SensorNoise,
                  rng: RandomStream, sensor_id: str = FRONT, timestamp: float = 0.0) -> ToFScan:
    """One frame: every zone sees its column's exact wall distance plus Gaussian noise.

    Zones with no wall within ``max_range`` or hit by dropout are flagged invalid.
    """
    angles = pose.theta + geom.mount_yaw + np.asarray(geom.azimuths)
    truth, hit = raycast_many(world.segments, pose.x, pose.y, angles, noise.max_range)
    normals = rng.normal(geom.n_zones)
    uniforms = rng.uniform(geom.n_zones)
    return _scan_from_truth(truth, hit, geom, noise, normals, uniforms, sensor_id, timestamp)


# --- trajectories -------------------------------------------------------------


# travel: yaw slews toward the direction of travel; fixed: constant yaw0;
# sweep: yaw0 plus a constant rotation rate
YAW_MODES = ("travel", "fixed", "sweep")


@dataclass
class TrajectorySpec:
    waypoints: list[tuple[float, float]]
    speed: float = 0.3
    yaw_rate: float = 1.5
    rate_hz: float = 15.0
    name: str = ""
    clearance: float = 0.1
    yaw_mode: str = "travel"
    yaw0: float = 0.0
    sweep_rate: float = 0.2
    spin: float = 0.0  # signed turn in place (rad) at ``yaw_rate`` before the first leg

    def __post_init__(self):
        if len(self.waypoints) < 2:
            raise InvalidSpecError("trajectory needs at least two waypoints")
        if self.yaw_mode not in YAW_MODES:
            raise InvalidSpecError(f"yaw_mode must be one of {YAW_MODES}")
        if self.speed <= 0 or self.yaw_rate <= 0 or self.rate_hz <= 0:
            raise InvalidSpecError("speed, yaw rate and sample rate must be positive")


def _segment_distance(px, py, segs: np.ndarray) -> np.ndarray:
    ax, ay, bx, by = segs.T
    vx, vy = bx - ax, by - ay
    L2 = vx * vx + vy * vy
    t = np.clip(((px - ax) * vx + (py - ay) * vy) / np.where(L2 > 0, L2, 1.0), 0.0, 1.0)
    return np.hypot(px - (ax + t * vx), py - (ay + t * vy))


def check_reachable(world: World, spec: TrajectorySpec) -> None:
    """Every leg must stay ``clearance`` away from walls and inside structured free space."""
    wp = np.asarray(spec.waypoints, dtype=np.float64)
    for (x0, y0), (x1, y1) in zip(wp[:-1], wp[1:]):
        n = max(2, int(math.hypot(x1 - x0, y1 - y0) / 0.01) + 1)
        for t in np.linspace(0.0, 1.0, n):
            px, py = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
            r, c = world.grid.world_to_cell(px, py)
            inside = 0 <= r < world.grid.height and 0 <= c < world.grid.width
            if not inside or world.grid.cells[r, c] != CellState.FREE:
                raise InvalidSpecError(f"waypoint leg ({x0}, {y0}) -> ({x1}, {y1}) leaves free space")
            if len(world.segments) and _segment_distance(px, py, world.segments).min() < spec.clearance:
                raise InvalidSpecError(f"waypoint leg ({x0}, {y0}) -> ({x1}, {y1}) passes through a wall")


def ground_truth(spec: TrajectorySpec) -> np.ndarray:
    """Poses (T, 3) sampled at ``rate_hz``: optional take-off turn, then constant speed along the polyline."""
    path = _flight(spec)
    if spec.spin == 0.0:
        return path
    m = int(math.ceil(abs(spec.spin) / (spec.yaw_rate / spec.rate_hz)))
    turn = np.empty((m, 3))
    turn[:, :2] = path[0, :2]
    turn[:, 2] = wrap_angle(path[0, 2] + spec.spin * np.arange(m) / m)
    return np.vstack([turn, path])


def _flight(spec: TrajectorySpec) -> np.ndarray:
    wp = np.asarray(spec.waypoints, dtype=np.float64)
    legs = np.diff(wp, axis=0)
    lengths = np.hypot(legs[:, 0], legs[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    dt = 1.0 / spec.rate_hz
    n = int(math.floor(cum[-1] / (spec.speed * dt))) + 1
    s = np.minimum(np.arange(n) * spec.speed * dt, cum[-1])
    leg = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(lengths) - 1)
    frac = np.where(lengths[leg] > 0, (s - cum[leg]) / np.where(lengths[leg] > 0, lengths[leg], 1.0), 0.0)
    xy = wp[leg] + frac[:, None] * legs[leg]
    if spec.yaw_mode == "fixed":
        return np.column_stack([xy, np.full(n, wrap_angle(spec.yaw0))])
    if spec.yaw_mode == "sweep":
        return np.column_stack([xy, wrap_angle(spec.yaw0 + spec.sweep_rate * np.arange(n) * dt)])
    heading = np.arctan2(legs[:, 1], legs[:, 0])
    yaw = np.empty(n)
    yaw[0] = heading[0]
    max_step = spec.yaw_rate * dt
    for i in range(1, n):
        err = float(angle_diff(heading[leg[i]], yaw[i - 1]))
        yaw[i] = yaw[i - 1] + max(-max_step, min(max_step, err))
    return np.column_stack([xy, wrap_angle(yaw)])


@dataclass
class SequenceRecord:
    """Per-tick arrays; odometry row i is the (noisy) motion from tick i-1 to i, row 0 is zero."""

    t: np.ndarray
    truth: np.ndarray
    odom: np.ndarray
    scans: dict[str, tuple[np.ndarray, np.ndarray]]  # sensor -> (ranges (T, K), valid (T, K))
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def rate_hz(self) -> float:
        return float(self.meta.get("rate_hz", 15.0))

    def geometry(self) -> dict[str, BeamGeometry]:
        g = self.meta.get("geometry")
        if not g:
            return default_geometry()
        return {
            sid: BeamGeometry(d["rows"], d["cols"], tuple(d["azimuths"]), d["mount_yaw"], d["fov"], tuple(d["central_rows"]))
            for sid, d in g.items()
        }

    def scan(self, sensor: str, i: int) -> ToFScan:
        r, v = self.scans[sensor]
        return ToFScan(r[i], v[i], sensor, float(self.t[i]))

    def odometry(self, i: int) -> OdometryDelta | None:
        if i == 0:
            return None
        return OdometryDelta(*map(float, self.odom[i]))

    def integrated_odometry(self) -> np.ndarray:
        pose = Pose2D(*self.truth[0])
        out = [pose.as_array()]
        for i in range(1, len(self)):
            pose = pose.compose(self.odometry(i))
            out.append(pose.as_array())
        return np.array(out)


def _geometry_meta(geoms: dict[str, BeamGeometry]) -> dict:
    return {
        sid: {"rows": g.rows, "cols": g.cols, "azimuths": list(g.azimuths), "mount_yaw": g.mount_yaw,
              "fov": g.fov, "central_rows": list(g.central_rows)}
        for sid, g in geoms.items()
    }


def noisy_odometry(truth: np.ndarray, sigma: Sequence[float], seed: int) -> np.ndarray:
    """Body-frame deltas between consecutive truth poses plus Gaussian drift; row 0 is zero."""
    sig = np.asarray(sigma, dtype=np.float64)
    odom = np.zeros((truth.shape[0], 3))
    for i in range(1, truth.shape[0]):
        d = OdometryDelta.between(Pose2D(*truth[i - 1]), Pose2D(*truth[i]))
        noise = RandomStream(seed, stream=i, domain=DOMAIN_ODOM).normal(3)
        odom[i] = (d.dx, d.dy, d.dtheta) + sig * noise
    return odom


def simulate_sequence(world: World, spec: TrajectorySpec, odom_sigma: Sequence[float] = (0.005, 0.005, 0.005),
                      sensor_noise: SensorNoise = SensorNoise(), seed: int = 0,
                      geoms: dict[str, BeamGeometry] | None = None) -> SequenceRecord:
    """Ground truth along ``spec`` with drifting odometry and two ToF sensors at every tick."""
    check_reachable(world, spec)
    geoms = geoms or default_geometry()
    truth = ground_truth(spec)
    n = truth.shape[0]
    dt = 1.0 / spec.rate_hz
    sig = np.asarray(odom_sigma, dtype=np.float64)
    odom = noisy_odometry(truth, sig, seed)
    scans = {}
    for k, (sid, geom) in enumerate(sorted(geoms.items())):
        ranges = np.zeros((n, geom.n_zones))
        valid = np.zeros((n, geom.n_zones), dtype=bool)
        for i in range(n):
            rng = RandomStream(seed, stream=i, epoch=k + 1, domain=DOMAIN_SENSOR)
            s = simulate_scan(world, Pose2D(*truth[i]), geom, sensor_noise, rng, sid, i * dt)
            ranges[i], valid[i] = s.ranges, s.valid
        scans[sid] = (ranges, valid)
    meta = {
        "schema": SCHEMA,
        "version": SCHEMA_VERSION,
        "world": world.name,
        "sequence": spec.name,
        "seed": int(seed),
        "rate_hz": float(spec.rate_hz),
        "odom_sigma": [float(v) for v in sig],
        "sensor_noise": {"range_sigma": sensor_noise.range_sigma, "dropout": sensor_noise.dropout,
                         "max_range": sensor_noise.max_range},
        "geometry": _geometry_meta(geoms),
    }
    return SequenceRecord(np.arange(n) * dt, truth, odom, scans, meta)


# --- dataset files -------------------------------------------------------------

BIN_MAGIC = b"TOFSEQ01"


def _bits(valid: np.ndarray) -> str:
    return "".join("1" if v else "0" for v in valid)


def write_sequence(rec: SequenceRecord, path: str | Path) -> Path:
    """Write JSON lines (``.jsonl``) or little-endian binary (``.bin``), chosen by suffix.

    JSON layout: a header object, then one object per tick with keys
    ``i, t, truth[x, y, theta], odom[dx, dy, dtheta]`` and per sensor
    ``{ranges: [...], valid: "0101..."}`` in zone order.
    """
    path = Path(path)
    sensors = sorted(rec.scans)
    header = {**rec.meta, "ticks": len(rec), "sensors": sensors}
    if path.suffix == ".bin":
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(BIN_MAGIC + struct.pack("<I", len(blob)) + blob)
            for arr in (rec.t, rec.truth, rec.odom):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            for sid in sensors:
                r, v = rec.scans[sid]
                fh.write(np.ascontiguousarray(r, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(v, dtype=np.uint8).tobytes())
        return path
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(len(rec)):
            row = {"i": i, "t": float(rec.t[i]), "truth": [float(v) for v in rec.truth[i]],
                   "odom": [float(v) for v in rec.odom[i]]}
            for sid in sensors:
                r, v = rec.scans[sid]
                row[sid] = {"ranges": [float(x) for x in r[i]], "valid": _bits(v[i])}
            fh.write(json.dumps(row) + "\n")
    return path


class SchemaError(InvalidInputError):
    pass


def _check_header(header: dict, path) -> None:
    if header.get("schema") != SCHEMA:
        raise SchemaError(f"{path}: not a {SCHEMA} file")
    if header.get("version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: schema version {header.get('version')} unsupported (expected {SCHEMA_VERSION})")


def read_sequence(path: str | Path) -> SequenceRecord:
    path = Path(path)
    if path.suffix == ".bin":
        data = path.read_bytes()
        if data[:8] != BIN_MAGIC:
            raise SchemaError(f"{path}: bad magic")
        (size,) = struct.unpack_from("<I", data, 8)
        header = json.loads(data[12 : 12 + size])
        _check_header(header, path)
        n, pos = header["ticks"], 12 + size
        geo = header["geometry"]

        def take(count, dtype):
            nonlocal pos
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
            pos += arr.nbytes
            return arr.copy()

        t = take(n, "<f8")
        truth = take(3 * n, "<f8").reshape(n, 3)
        odom = take(3 * n, "<f8").reshape(n, 3)
        scans = {}
        for sid in header["sensors"]:
            k = geo[sid]["rows"] * geo[sid]["cols"]
            scans[sid] = (take(n * k, "<f8").reshape(n, k), take(n * k, np.uint8).reshape(n, k).astype(bool))
    else:
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            _check_header(header, path)
            rows = [json.loads(line) for line in fh if line.strip()]
        t = np.array([r["t"] for r in rows], dtype=np.float64)
        truth = np.array([r["truth"] for r in rows], dtype=np.float64).reshape(-1, 3)
        odom = np.array([r["odom"] for r in rows], dtype=np.float64).reshape(-1, 3)
        scans = {}
        for sid in header["sensors"]:
            scans[sid] = (
                np.array([r[sid]["ranges"] for r in rows], dtype=np.float64),
                np.array([[c == "1" for c in r[sid]["valid"]] for r in rows], dtype=bool),
            )
    meta = {k: v for k, v in header.items() if k not in ("ticks", "sensors")}
    return SequenceRecord(t, truth, odom, scans, meta)


# --- built-in mazes ---------------------------------------------------------------

HALF = RESOLUTION / 2


def _wall(x0, y0, x1, y1, ox, oy):
    return (ox + x0, oy + y0, ox + x1, oy + y1)


def _rect(x0, y0, x1, y1, ox, oy):
    return [
        _wall(x0, y0, x1, y0, ox, oy), _wall(x1, y0, x1, y1, ox, oy),
        _wall(x1, y1, x0, y1, ox, oy), _wall(x0, y1, x0, y0, ox, oy),
    ]


def _enclosure(size, ox, oy):
    # outer walls run through the centers of the boundary cells
    return _rect(HALF, HALF, size - HALF, size - HALF, ox, oy)


# Maze placements inside the combined map (lower-left corners, meters).
PRIMARY_ORIGIN = (0.25, 0.25)
PRIMARY_SIZE = 4.0
SMALL_SIZE = 2.25
SMALL_ORIGINS = {"maze_a": (4.75, 0.25), "maze_b": (4.75, 2.75), "maze_c": (7.5, 0.25)}
MAP_SIZE = (10.0, 5.25)


def _primary_walls(ox, oy):
    w = _enclosure(PRIMARY_SIZE, ox, oy)
    # serpentine of four lanes with unequal widths and openings
    w += [
        _wall(0.825, HALF, 0.825, 2.975, ox, oy),
        _wall(2.075, 1.025, 2.075, 4.0 - HALF, ox, oy),
        _wall(3.075, HALF, 3.075, 2.475, ox, oy),
    ]
    # landmarks
    w += _rect(HALF, 1.525, 0.225, 1.925, ox, oy)  # block on the outer wall of lane 1
    w += [_wall(1.725, 2.525, 2.075, 2.525, ox, oy)]  # stub into lane 2
    w += _rect(2.375, 3.575, 2.675, 3.925, ox, oy)  # box at the top of lane 3
    w += [_wall(3.775, 1.525, 4.0 - HALF, 1.525, ox, oy)]  # stub into lane 4
    return w


def _maze_a(ox, oy):
    # two lanes joined at the top, much like the serpentine's lower corner
    return _enclosure(SMALL_SIZE, ox, oy) + [_wall(1.025, HALF, 1.025, 1.475, ox, oy)]


def _maze_b(ox, oy):
    # ring corridor around a central block
    return _enclosure(SMALL_SIZE, ox, oy) + _rect(0.775, 0.775, 1.475, 1.475, ox, oy)


def _maze_c(ox, oy):
    w = _enclosure(SMALL_SIZE, ox, oy) + [_wall(1.125, 0.775, 1.125, SMALL_SIZE - HALF, ox, oy)]
    w += [_wall(1.825, 0.525, SMALL_SIZE - HALF, 0.525, ox, oy)]
    return w


def _build(name: str, pieces: dict[str, tuple[tuple[float, float], float, list]], size) -> World:
    w, h = size
    grid = OccupancyGrid(
        np.full((int(round(h / RESOLUTION)), int(round(w / RESOLUTION))), CellState.UNKNOWN, dtype=np.uint8),
        RESOLUTION, (0.0, 0.0),
    )
    segs, regions = [], {}
    for key, ((ox, oy), side, walls) in pieces.items():
        r0, c0 = grid.world_to_cell(ox + HALF, oy + HALF)
        k = int(round(side / RESOLUTION))
        grid.cells[r0 : r0 + k, c0 : c0 + k] = CellState.FREE
        regions[key] = (ox, oy, ox + side, oy + side)
        segs.extend(walls)
    segments = np.asarray(segs, dtype=np.float64)
    rasterize(segments, grid)
    return World(grid, segments, regions, name)


def builtin_worlds() -> dict[str, World]:
    """``maze_world``: the 16 m^2 flight maze plus three small mazes (31.19 m^2 structured);
    ``drone_maze``: the flight maze alone, same coordinates."""
    px, py = PRIMARY_ORIGIN
    primary = {"drone_maze": (PRIMARY_ORIGIN, PRIMARY_SIZE, _primary_walls(px, py))}
    extra = {
        "maze_a": (SMALL_ORIGINS["maze_a"], SMALL_SIZE, _maze_a(*SMALL_ORIGINS["maze_a"])),
        "maze_b": (SMALL_ORIGINS["maze_b"], SMALL_SIZE, _maze_b(*SMALL_ORIGINS["maze_b"])),
        "maze_c": (SMALL_ORIGINS["maze_c"], SMALL_SIZE, _maze_c(*SMALL_ORIGINS["maze_c"])),
    }
    return {
        "maze_world": _build("maze_world", {**primary, **extra}, MAP_SIZE),
        "drone_maze": _build("drone_maze", primary, MAP_SIZE),
    }


def _p(pts):
    px, py = PRIMARY_ORIGIN
    return [(px + x, py + y) for x, y in pts]


TAKEOFF_SPIN = 2.0 * math.pi


def builtin_sequences() -> list[TrajectorySpec]:
    """Six flights through the serpentine maze (lanes 0.8, 1.25, 1.0 and 0.9 m wide).

    Each flight opens with a full turn in place, then yaws slowly while
    flying so both sensors sweep across walls and lane ends; flights start
    from different yaws.
    """
    serp = [(0.45, 0.5), (0.45, 3.5), (1.4, 3.5), (1.4, 0.5), (2.55, 0.5), (2.55, 3.1), (3.5, 3.1), (3.5, 0.5)]
    legs = [
        serp,
        serp[::-1],
        [(2.55, 2.0), (2.55, 0.5), (1.4, 0.5), (1.4, 3.5), (0.45, 3.5), (0.45, 0.5), (0.45, 3.4), (1.4, 3.4),
         (1.4, 1.5)],
        [(3.5, 0.5), (3.5, 3.1), (2.55, 3.1), (2.55, 0.5), (2.55, 3.1), (3.5, 3.1), (3.5, 0.5)],
        [(0.45, 1.0), (0.45, 3.5), (1.4, 3.5), (1.4, 0.5), (2.55, 0.5), (2.55, 3.1), (2.55, 0.5), (1.4, 0.5),
         (1.4, 2.0)],
        [(1.4, 2.8), (1.4, 0.5), (2.55, 0.5), (2.55, 3.1), (3.5, 3.1), (3.5, 0.5), (3.5, 3.1), (2.55, 3.1),
         (2.55, 1.0)],
    ]
    return [
        TrajectorySpec(_p(pts), name=f"seq{k + 1:02d}", yaw_mode="sweep", yaw0=k * math.pi / 3,
                       sweep_rate=0.1 if k % 2 == 0 else -0.1, spin=TAKEOFF_SPIN if k % 2 == 0 else -TAKEOFF_SPIN)
        for k, pts in enumerate(legs)
    ]
