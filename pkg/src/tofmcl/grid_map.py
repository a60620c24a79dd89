"""Occupancy grids, truncated Euclidean distance fields and their storage policies."""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np
import yaml


class InvalidInputError(ValueError):
    pass


class CellState(enum.IntEnum):
    FREE = 0
    OCCUPIED = 1
    UNKNOWN = 2


class UnknownRule(enum.Enum):
    AS_FREE = "free"
    AS_OCCUPIED = "occupied"


class NumericPolicy(enum.Enum):
    """Storage precision of the distance field and of the particle pool."""

    FP32 = "fp32"
    FP32QM = "fp32qm"
    FP16QM = "fp16qm"

    @property
    def quantized_map(self) -> bool:
        return self is not NumericPolicy.FP32

    @property
    def particle_dtype(self) -> np.dtype:
        return np.dtype(np.float16 if self is NumericPolicy.FP16QM else np.float32)

    @property
    def weight_tolerance(self) -> float:
        return 1e-3 if self is NumericPolicy.FP16QM else 1e-6

    @property
    def tag(self) -> int:
        return list(NumericPolicy).index(self)

    @classmethod
    def parse(cls, value: "str | NumericPolicy") -> "NumericPolicy":
        if isinstance(value, NumericPolicy):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidInputError(f"unknown policy {value!r}; expected one of fp32, fp32qm, fp16qm") from None


@dataclass
class OccupancyGrid:
    """Ternary occupancy lattice, one byte per cell.

    ``cells`` has shape ``(height, width)``; row 0 is the bottom row and
    ``origin`` is the world position of the lower-left corner of cell (0, 0).
    """

    cells: np.ndarray
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.cells = np.ascontiguousarray(self.cells, dtype=np.uint8)
        if self.cells.ndim != 2:
            raise InvalidInputError("cells must be a 2D array")
        if not self.resolution > 0:
            raise InvalidInputError("resolution must be positive")
        if self.cells.size and self.cells.max() > CellState.UNKNOWN:
            raise InvalidInputError("cell values must be FREE, OCCUPIED or UNKNOWN")
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def extent(self) -> tuple[float, float, float, float]:
        ox, oy = self.origin
        return ox, oy, ox + self.width * self.resolution, oy + self.height * self.resolution

    def cell_center(self, row, col):
        return (
            self.origin[0] + (np.asarray(col) + 0.5) * self.resolution,
            self.origin[1] + (np.asarray(row) + 0.5) * self.resolution,
        )

    def world_to_cell(self, x, y):
        col = np.floor((np.asarray(x, dtype=np.float64) - self.origin[0]) / self.resolution).astype(np.int64)
        row = np.floor((np.asarray(y, dtype=np.float64) - self.origin[1]) / self.resolution).astype(np.int64)
        return row, col

    def free_cells(self) -> np.ndarray:
        """Flat indices of Free cells, row-major."""
        return np.flatnonzero(self.cells.ravel() == CellState.FREE)


# --- exact distance transform -------------------------------------------

_BIG = 1e20


@nb.njit(cache=True)
def _dt1d(f, d, v, z):
    """Squared-distance lower envelope of parabolas over a sampled function."""
    n = f.shape[0]
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) * (q - v[k]) + f[v[k]]


@nb.njit(cache=True)
def _edt_squared(obstacle):
    h, w = obstacle.shape
    n = max(h, w)
    f = np.empty(n)
    d = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    out = np.empty((h, w))
    for r in range(h):
        for c in range(w):
            out[r, c] = 0.0 if obstacle[r, c] else _BIG
    for c in range(w):
        for r in range(h):
            f[r] = out[r, c]
        _dt1d(f[:h], d[:h], v[:h], z[: h + 1])
        for r in range(h):
            out[r, c] = d[r]
    for r in range(h):
        for c in range(w):
            f[c] = out[r, c]
        _dt1d(f[:w], d[:w], v[:w], z[: w + 1])
        for c in range(w):
            out[r, c] = d[c]
    return out


def edt_cells(obstacle: np.ndarray) -> np.ndarray:
    """Untruncated distance in cell units from every cell to the nearest True cell.

    Cells are infinitely far when there is no obstacle at all.
    """
    obstacle = np.ascontiguousarray(obstacle, dtype=np.bool_)
    if not obstacle.any():
        return np.full(obstacle.shape, np.inf)
    return np.sqrt(_edt_squared(obstacle))


@dataclass
class DistanceField:
    """Truncated distance-to-obstacle values on the lattice of a grid.

    ``values`` holds float32 meters for FP32 and uint8 codes for the
    quantized policies; :meth:`dequantized` always returns meters.
    """

    values: np.ndarray
    resolution: float
    origin: tuple[float, float]
    r_max: float
    policy: NumericPolicy = NumericPolicy.FP32
    table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.policy = NumericPolicy.parse(self.policy)
        want = np.uint8 if self.policy.quantized_map else np.float32
        self.values = np.ascontiguousarray(self.values, dtype=want)
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        # per-code meters; FP32 fields never index it
        self.table = np.arange(256, dtype=np.float64) * self.r_max / 255.0

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def scale(self) -> float:
        return self.r_max / 255.0

    def dequantized(self) -> np.ndarray:
        if self.policy.quantized_map:
            return self.table[self.values]
        return self.values.astype(np.float64)

    def with_policy(self, policy: "NumericPolicy | str") -> "DistanceField":
        policy = NumericPolicy.parse(policy)
        if policy.quantized_map == self.policy.quantized_map:
            return DistanceField(self.values.copy(), self.resolution, self.origin, self.r_max, policy)
        if self.policy.quantized_map:
            raise InvalidInputError("cannot recover full precision from a quantized field")
        q = quantize_field(self)
        q.policy = policy
        return q

    def export(self, path: str | Path) -> None:
        write_field(self, path)


def compute_edt(
    grid: OccupancyGrid,
    r_max: float,
    treat_unknown: UnknownRule = UnknownRule.AS_FREE,
) -> DistanceField:
    """Exact Euclidean distance (meters, between cell centers) to the nearest obstacle, clamped at ``r_max``."""
    if grid.cells.size == 0:
        raise InvalidInputError("grid is empty")
    if not r_max > 0:
        raise InvalidInputError("r_max must be positive")
    obstacle = grid.cells == CellState.OCCUPIED
    if UnknownRule(treat_unknown) is UnknownRule.AS_OCCUPIED:
        obstacle |= grid.cells == CellState.UNKNOWN
    dist = np.minimum(edt_cells(obstacle) * grid.resolution, r_max)
    return DistanceField(dist.astype(np.float32), grid.resolution, grid.origin, float(r_max), NumericPolicy.FP32)


def quantize_codes(values: np.ndarray, r_max: float) -> np.ndarray:
    """Linear 8-bit codes over [0, r_max] with round-half-up."""
    x = np.clip(np.asarray(values, dtype=np.float64), 0.0, r_max)
    return np.floor(x / r_max * 255.0 + 0.5).astype(np.uint8)


def quantize_field(field: DistanceField) -> DistanceField:
    if field.policy.quantized_map:
        raise InvalidInputError("field is already quantized")
    codes = quantize_codes(field.values, field.r_max)
    return DistanceField(codes, field.resolution, field.origin, field.r_max, NumericPolicy.FP32QM)


@nb.njit(cache=True, nogil=True)
def lookup_cell(values, table, quantized, ox, oy, inv_res, r_max, x, y):
    """Dequantized field value of the cell containing (x, y); r_max outside the map."""
    cx = math.floor((x - ox) * inv_res)
    cy = math.floor((y - oy) * inv_res)
    if not (cx >= 0 and cy >= 0 and cx < values.shape[1] and cy < values.shape[0]):
        return r_max
    raw = values[int(cy), int(cx)]
    if quantized:
        return table[np.int64(raw)]
    return np.float64(raw)


@nb.njit(cache=True)
def _lookup_many(values, table, quantized, ox, oy, inv_res, r_max, xs, ys, out):
    for i in range(xs.shape[0]):
        out[i] = lookup_cell(values, table, quantized, ox, oy, inv_res, r_max, xs[i], ys[i])


def field_lookup(field: DistanceField, x, y):
    """Distance value (meters) at world point(s); non-finite or out-of-map points give r_max."""
    xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
    ys = np.atleast_1d(np.asarray(y, dtype=np.float64))
    xs, ys = np.broadcast_arrays(xs, ys)
    out = np.empty(xs.shape[0] if xs.ndim else 1)
    _lookup_many(
        field.values, field.table, field.policy.quantized_map, field.origin[0], field.origin[1],
        1.0 / field.resolution, field.r_max, np.ascontiguousarray(xs.ravel()), np.ascontiguousarray(ys.ravel()), out,
    )
    if np.ndim(x) == 0 and np.ndim(y) == 0:
        return float(out[0])
    return out.reshape(xs.shape)


# --- memory accounting ----------------------------------------------------

OCCUPANCY_BYTES_PER_CELL = 1
PARTICLE_FIELDS = 4  # x, y, theta, weight
PARTICLE_BUFFERS = 2


def bytes_per_cell(policy: "NumericPolicy | str") -> int:
    policy = NumericPolicy.parse(policy)
    return OCCUPANCY_BYTES_PER_CELL + (1 if policy.quantized_map else 4)


def bytes_per_particle(policy: "NumericPolicy | str") -> int:
    policy = NumericPolicy.parse(policy)
    return PARTICLE_BUFFERS * PARTICLE_FIELDS * policy.particle_dtype.itemsize


def memory_footprint(grid_cells: int, n_particles: int, policy: "NumericPolicy | str") -> int:
    """Bytes for map (occupancy + distance field) plus double-buffered particles."""
    return int(grid_cells) * bytes_per_cell(policy) + int(n_particles) * bytes_per_particle(policy)


# --- file formats ------------------------------------------------------------

PGM_OCCUPIED = 0
PGM_FREE = 254
PGM_UNKNOWN = 205


def save_map(grid: OccupancyGrid, path: str | Path) -> Path:
    """Write ``<path>.pgm`` plus a YAML sidecar ``<path>.yaml``; returns the sidecar path."""
    path = Path(path)
    pgm, meta = path.with_suffix(".pgm"), path.with_suffix(".yaml")
    lut = np.array([PGM_FREE, PGM_OCCUPIED, PGM_UNKNOWN], dtype=np.uint8)
    img = lut[grid.cells[::-1]]  # image rows run top-down
    with open(pgm, "wb") as fh:
        fh.write(f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    sidecar = {
        "image": pgm.name,
        "resolution": float(grid.resolution),
        "origin": [grid.origin[0], grid.origin[1], 0.0],
        "negate": 0,
        "occupied_thresh": 0.65,
        "free_thresh": 0.196,
    }
    meta.write_text(yaml.safe_dump(sidecar, sort_keys=False))
    return meta


def _read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise InvalidInputError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise InvalidInputError(f"{path}: 16-bit PGM not supported")
    pos += 1
    img = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return img.reshape(h, w)


def load_map(path: str | Path) -> OccupancyGrid:
    """Read a map from its YAML sidecar (or the .pgm next to it)."""
    path = Path(path)
    meta_path = path if path.suffix in (".yaml", ".yml") else path.with_suffix(".yaml")
    meta = yaml.safe_load(meta_path.read_text())
    img = _read_pgm(meta_path.parent / meta["image"])
    occ_t = float(meta.get("occupied_thresh", 0.65))
    free_t = float(meta.get("free_thresh", 0.196))
    p = img.astype(np.float64) / 255.0 if meta.get("negate", 0) else (255.0 - img) / 255.0
    cells = np.full(img.shape, CellState.UNKNOWN, dtype=np.uint8)
    cells[p > occ_t] = CellState.OCCUPIED
    cells[p < free_t] = CellState.FREE
    origin = meta.get("origin", [0.0, 0.0, 0.0])
    return OccupancyGrid(cells[::-1].copy(), float(meta["resolution"]), (origin[0], origin[1]))


FIELD_MAGIC = b"EDTF"
_FIELD_HEADER = struct.Struct("<4sHHB3xf")


def write_field(field: DistanceField, path: str | Path) -> None:
    """Flat little-endian dump: 16-byte header then row-major values."""
    if field.width > 0xFFFF or field.height > 0xFFFF:
        raise InvalidInputError("field too large for export header")
    header = _FIELD_HEADER.pack(FIELD_MAGIC, field.width, field.height, field.policy.tag, field.r_max)
    body = field.values.astype("<f4" if not field.policy.quantized_map else np.uint8).tobytes()
    Path(path).write_bytes(header + body)


def read_field(path: str | Path, resolution: float, origin=(0.0, 0.0)) -> DistanceField:
    data = Path(path).read_bytes()
    magic, w, h, tag, r_max = _FIELD_HEADER.unpack_from(data)
    if magic != FIELD_MAGIC:
        raise InvalidInputError(f"{path}: bad field magic {magic!r}")
    policy = list(NumericPolicy)[tag]
    dtype = np.uint8 if policy.quantized_map else np.dtype("<f4")
    values = np.frombuffer(data, dtype=dtype, offset=_FIELD_HEADER.size, count=w * h).reshape(h, w)
    # header stores r_max as float32; keep the exact value the writer used when it fits
    return DistanceField(values.copy(), resolution, origin, float(r_max), policy)
