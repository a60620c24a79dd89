"""Pose types, multizone ToF beam geometry, beam end-point likelihood and odometry sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid_map import DistanceField, InvalidInputError, field_lookup
from .rng import RandomStream

TWO_PI = 2.0 * math.pi

FRONT = "front"
REAR = "rear"


def wrap_angle(theta):
    """Normalize into [0, 2*pi)."""
    t = np.mod(theta, TWO_PI)
    # mod can round up to exactly 2*pi for tiny negative inputs
    if np.ndim(t) == 0:
        return 0.0 if t >= TWO_PI else float(t)
    return np.where(t >= TWO_PI, 0.0, t)


def angle_diff(a, b):
    """Signed smallest difference a - b in [-pi, pi)."""
    return np.mod(np.asarray(a) - np.asarray(b) + math.pi, TWO_PI) - math.pi


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def compose(self, u: "OdometryDelta") -> "Pose2D":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2D(self.x + c * u.dx - s * u.dy, self.y + s * u.dx + c * u.dy, self.theta + u.dtheta)


@dataclass(frozen=True)
class OdometryDelta:
    """Relative motion expressed in the body frame of the starting pose."""

    dx: float
    dy: float
    dtheta: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.dx, self.dy, self.dtheta)):
            raise InvalidInputError("odometry delta must be finite")

    @classmethod
    def between(cls, a: Pose2D, b: Pose2D) -> "OdometryDelta":
        c, s = math.cos(a.theta), math.sin(a.theta)
        wx, wy = b.x - a.x, b.y - a.y
        return cls(c * wx + s * wy, -s * wx + c * wy, float(angle_diff(b.theta, a.theta)))

    def inverse(self) -> "OdometryDelta":
        c, s = math.cos(self.dtheta), math.sin(self.dtheta)
        return OdometryDelta(-(c * self.dx + s * self.dy), -(-s * self.dx + c * self.dy), -self.dtheta)


@dataclass(frozen=True)
class NoiseParams:
    sigma_odom: tuple[float, float, float] = (0.1, 0.1, 0.1)
    sigma_obs: float = 2.0

    def __post_init__(self):
        if len(self.sigma_odom) != 3 or min(self.sigma_odom) <= 0 or self.sigma_obs <= 0:
            raise InvalidInputError("noise parameters must be positive")


@dataclass
class ToFScan:
    """One multizone frame: ``ranges[k]`` is meaningful only where ``valid[k]``.

    Zones are stored row-major, row 0 at the top of the sensor matrix.
    """

    ranges: np.ndarray
    valid: np.ndarray
    sensor_id: str = FRONT
    timestamp: float = 0.0

    def __post_init__(self):
        self.ranges = np.asarray(self.ranges, dtype=np.float64).ravel()
        self.valid = np.asarray(self.valid, dtype=bool).ravel()
        if self.ranges.shape != self.valid.shape:
            raise InvalidInputError("ranges and valid flags differ in length")
        if self.sensor_id not in (FRONT, REAR):
            raise InvalidInputError(f"unknown sensor id {self.sensor_id!r}")

    @property
    def n_zones(self) -> int:
        return self.ranges.shape[0]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


@dataclass(frozen=True)
class BeamGeometry:
    """Zone layout of one sensor and how its zones map to planar beams.

    The matrix is collapsed to one beam per column: the beam range is the
    median of the valid zones in ``central_rows``; column azimuths are
    relative to the sensor boresight, which points at ``mount_yaw`` in the
    body frame.
    """

    rows: int
    cols: int
    azimuths: tuple[float, ...]
    mount_yaw: float = 0.0
    fov: float = math.radians(45.0)
    central_rows: tuple[int, ...] = ()

    def __post_init__(self):
        az = np.asarray(self.azimuths, dtype=np.float64)
        if az.shape != (self.cols,):
            raise InvalidInputError("need one azimuth per column")
        if np.any(np.diff(az) <= 0):
            raise InvalidInputError("column azimuths must be strictly increasing")
        if np.any(np.abs(az) > self.fov / 2 + 1e-12):
            raise InvalidInputError("azimuth outside the field of view")
        if not self.central_rows:
            lo, hi = self.rows // 4, self.rows - self.rows // 4
            object.__setattr__(self, "central_rows", tuple(range(lo, hi)))
        object.__setattr__(self, "azimuths", tuple(float(a) for a in az))

    @classmethod
    def matrix(cls, size: int = 8, mount_yaw: float = 0.0, fov: float = math.radians(45.0)) -> "BeamGeometry":
        """Square ``size``x``size`` sensor with evenly spaced column azimuths."""
        step = fov / size
        # column 0 is the most clockwise beam
        az = tuple(-fov / 2 + (c + 0.5) * step for c in range(size))
        return cls(size, size, az, mount_yaw, fov)

    @classmethod
    def single(cls, azimuth: float = 0.0, mount_yaw: float = 0.0) -> "BeamGeometry":
        return cls(1, 1, (azimuth,), mount_yaw, max(2 * abs(azimuth), 1e-9))

    @property
    def n_zones(self) -> int:
        return self.rows * self.cols

    def collapse(self, scan: ToFScan) -> tuple[np.ndarray, np.ndarray]:
        """Body-frame beam angles and ranges of every column holding a valid zone."""
        if scan.n_zones != self.n_zones:
            raise InvalidInputError(f"scan has {scan.n_zones} zones, geometry expects {self.n_zones}")
        rng = scan.ranges.reshape(self.rows, self.cols)[list(self.central_rows)]
        ok = scan.valid.reshape(self.rows, self.cols)[list(self.central_rows)]
        k = ok.sum(axis=0)
        has = k > 0
        # invalid zones sort to the bottom of each column
        srt = np.sort(np.where(ok, rng, np.inf), axis=0)[:, has]
        k = k[has]
        cols = np.arange(k.size)
        med = 0.5 * (srt[(k - 1) // 2, cols] + srt[k // 2, cols])
        angles = self.mount_yaw + np.asarray(self.azimuths)[has]
        return angles.astype(np.float64), med.astype(np.float64)


def default_geometry(size: int = 8, fov: float = math.radians(45.0)) -> dict[str, BeamGeometry]:
    return {
        FRONT: BeamGeometry.matrix(size, 0.0, fov),
        REAR: BeamGeometry.matrix(size, math.pi, fov),
    }


def stack_beams(scans: Sequence[ToFScan], geoms: dict[str, BeamGeometry]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate collapsed beams of several scans into (angles, ranges)."""
    angles, ranges = [np.empty(0)], [np.empty(0)]
    for scan in scans:
        a, r = geoms[scan.sensor_id].collapse(scan)
        angles.append(a)
        ranges.append(r)
    return np.concatenate(angles), np.concatenate(ranges)


def beam_endpoints(pose: Pose2D, scan: ToFScan, geom: BeamGeometry) -> np.ndarray:
    """World coordinates of every valid beam's end point, shape (V, 2)."""
    angles, ranges = geom.collapse(scan)
    heading = pose.theta + angles
    return np.column_stack((pose.x + ranges * np.cos(heading), pose.y + ranges * np.sin(heading)))


def log_normalizer(sigma_obs: float) -> float:
    """Per-beam log of the constant 1/sqrt(2*pi*sigma_obs)."""
    return 0.5 * math.log(TWO_PI * sigma_obs)


def log_likelihood(
    pose: Pose2D,
    scans: "ToFScan | Sequence[ToFScan]",
    field: DistanceField,
    geoms: "BeamGeometry | dict[str, BeamGeometry]",
    sigma_obs: float,
) -> float:
    """Sum over valid beams of the end-point log-density; 0.0 when no beam is valid."""
    if sigma_obs <= 0:
        raise InvalidInputError("sigma_obs must be positive")
    if isinstance(scans, ToFScan):
        scans = [scans]
    if isinstance(geoms, BeamGeometry):
        geoms = {s.sensor_id: geoms for s in scans}
    total, n_valid = 0.0, 0
    for scan in scans:
        pts = beam_endpoints(pose, scan, geoms[scan.sensor_id])
        if len(pts) == 0:
            continue
        d = np.atleast_1d(field_lookup(field, pts[:, 0], pts[:, 1]))
        total += float(np.sum(-(d * d) / (2.0 * sigma_obs * sigma_obs)))
        n_valid += len(pts)
    if n_valid == 0:
        return 0.0
    return total - n_valid * log_normalizer(sigma_obs)


def sample_motion(
    pose: Pose2D,
    u: OdometryDelta,
    sigma_odom: Sequence[float],
    rng: RandomStream | np.random.Generator | None = None,
) -> Pose2D:
    """Draw a successor pose from the odometry motion model."""
    sx, sy, st = sigma_odom
    if rng is None or (sx == 0 and sy == 0 and st == 0):
        n = np.zeros(3)
    elif isinstance(rng, RandomStream):
        n = rng.normal(3)
    else:
        n = rng.standard_normal(3)
    noisy = OdometryDelta(u.dx + sx * n[0], u.dy + sy * n[1], u.dtheta + st * n[2])
    return pose.compose(noisy)
