"""Grids, rays, symmetric tensor storage and the HTGD grid file format.

Every other module builds on the types defined here. Arrays are float64,
row-major with the last axis varying fastest, and treated as immutable once
wrapped in a :class:`ScalarGrid`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from itertools import combinations, combinations_with_replacement
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage


class HistomoError(Exception):
    """Base class for errors raised by this package."""


class NonFiniteError(HistomoError, ValueError):
    pass


class SingularInputError(HistomoError, ValueError):
    """Input sits on a point where the requested formula is undefined."""


class GridFormatError(HistomoError):
    pass


class BadMagicError(GridFormatError):
    pass


class BadVersionError(GridFormatError):
    pass


class TruncatedPayloadError(GridFormatError):
    pass


class DimOverflowError(GridFormatError):
    pass


MAGIC = b"HTGD"
FORMAT_VERSION = 1
# refuse to allocate more than this many samples from a file header
MAX_SAMPLES = 2**32


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ScalarGrid:
    """Uniformly sampled scalar field on an axis-aligned box.

    ``values`` has shape ``dims``; sample ``(i, j[, k])`` sits at
    ``origin + spacing * (i, j[, k])``.
    """

    origin: tuple
    spacing: float
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim not in (1, 2, 3):
            raise ValueError(f"grid must be 1, 2 or 3 dimensional, got {values.ndim}")
        if any(n < 2 for n in values.shape):
            raise ValueError(f"need at least 2 samples per axis, got {values.shape}")
        origin = tuple(float(o) for o in np.atleast_1d(self.origin))
        if len(origin) != values.ndim:
            raise ValueError("origin length does not match grid dimension")
        if not (self.spacing > 0 and math.isfinite(self.spacing)):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values))[0]
            raise NonFiniteError(f"non-finite grid value at index {tuple(bad)}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dims(self) -> tuple:
        return self.values.shape

    @property
    def upper(self) -> tuple:
        return tuple(o + self.spacing * (n - 1) for o, n in zip(self.origin, self.dims))

    def axes(self) -> list[np.ndarray]:
        return [o + self.spacing * np.arange(n) for o, n in zip(self.origin, self.dims)]

    def coords(self) -> list[np.ndarray]:
        return np.meshgrid(*self.axes(), indexing="ij")

    def like(self, values) -> "ScalarGrid":
        """New grid with the same geometry and different values."""
        return ScalarGrid(self.origin, self.spacing, values)

    def same_geometry(self, other: "ScalarGrid") -> bool:
        return (
            self.dims == other.dims
            and self.origin == other.origin
            and self.spacing == other.spacing
        )

    def __eq__(self, other):
        if not isinstance(other, ScalarGrid):
            return NotImplemented
        return self.same_geometry(other) and np.array_equal(self.values, other.values)

    __hash__ = None


def grid_from_function(
    lower: Sequence[float],
    upper: Sequence[float],
    dims: Sequence[int],
    sampler: Callable[..., np.ndarray],
) -> ScalarGrid:
    """Sample ``sampler(x, y[, z])`` on a box with ``dims`` points per axis.

    The sampler is called once with broadcast coordinate arrays. All axes
    must share one spacing.
    """
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    dims = tuple(int(n) for n in np.atleast_1d(dims))
    if not (len(lower) == len(upper) == len(dims)):
        raise ValueError("box bounds and dims disagree in dimension")
    if any(n < 2 for n in dims):
        raise ValueError("need at least 2 samples per axis")
    steps = (upper - lower) / (np.asarray(dims) - 1)
    if np.any(steps <= 0):
        raise ValueError("box upper corner must exceed lower corner")
    if not np.allclose(steps, steps[0], rtol=1e-12, atol=0):
        raise ValueError(f"box and dims give non-uniform spacing {steps}")
    h = float(steps[0])
    axes = [lo + h * np.arange(n) for lo, n in zip(lower, dims)]
    coords = np.meshgrid(*axes, indexing="ij")
    values = np.broadcast_to(np.asarray(sampler(*coords), dtype=float), dims)
    if not np.all(np.isfinite(values)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(values))[0])
        raise NonFiniteError(f"sampler returned a non-finite value at index {bad}")
    return ScalarGrid(tuple(lower), h, values)


# --- rays -----------------------------------------------------------------


@dataclass(frozen=True)
class Ray:
    """Line ``{x : x . Theta = p}`` in the plane, ``Theta = (cos theta, sin theta)``.

    Points on the ray are ``p * Theta + s * Theta_perp`` with
    ``Theta_perp = (-sin theta, cos theta)``.
    """

    theta: float
    p: float

    @property
    def direction(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta)])

    @property
    def tangent(self) -> np.ndarray:
        return np.array([-math.sin(self.theta), math.cos(self.theta)])

    def point(self, s):
        s = np.asarray(s, dtype=float)
        return self.p * self.direction + s[..., None] * self.tangent


@dataclass(frozen=True)
class Ray3:
    """Ray through ``x`` with unit direction ``xi``.

    ``x`` may be shifted along ``xi`` without changing the ray.
    """

    x: tuple
    xi: tuple

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        if xi.shape != (3,) or np.asarray(self.x).shape != (3,):
            raise ValueError("Ray3 needs 3-vectors")
        if abs(np.linalg.norm(xi) - 1.0) > 1e-12:
            raise ValueError(f"direction must be a unit vector, |xi|={np.linalg.norm(xi)}")
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))
        object.__setattr__(self, "xi", tuple(float(v) for v in xi))

    @classmethod
    def normalized(cls, x, xi) -> "Ray3":
        xi = np.asarray(xi, dtype=float)
        return cls(tuple(x), tuple(xi / np.linalg.norm(xi)))


def ray_arrays(rays) -> tuple[np.ndarray, np.ndarray]:
    """Base points and unit directions of a ray list, as (n, d) arrays."""
    rays = list(rays)
    if not rays:
        return np.zeros((0, 2)), np.zeros((0, 2))
    if isinstance(rays[0], Ray):
        th = np.array([r.theta for r in rays])
        p = np.array([r.p for r in rays])
        return planar_ray_arrays(th, p)
    x = np.array([r.x for r in rays], dtype=float)
    xi = np.array([r.xi for r in rays], dtype=float)
    return x, xi


def planar_ray_arrays(thetas, ps) -> tuple[np.ndarray, np.ndarray]:
    thetas = np.asarray(thetas, dtype=float)
    ps = np.asarray(ps, dtype=float)
    c, s = np.cos(thetas), np.sin(thetas)
    base = np.stack([ps * c, ps * s], axis=-1)
    tangent = np.stack([-s, c], axis=-1)
    return base, tangent


@dataclass
class RaySamples:
    """Flattened samples of many rays through one grid.

    ``ray`` holds the ray index of each sample, ``s`` its arc-length
    parameter, ``points`` its physical position. ``counts[i]`` is the
    number of samples of ray ``i``.
    """

    ray: np.ndarray
    s: np.ndarray
    points: np.ndarray
    counts: np.ndarray
    step: float


def chord_interval(lower, upper, base, direction):
    """Slab-method intersection of rays with the box ``[lower, upper]``.

    Returns ``(s_lo, s_hi)`` arrays; rays missing the box get ``s_hi <= s_lo``.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = 1.0 / direction
        t1 = (lower - base) * inv
        t2 = (upper - base) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # axis-parallel rays: inside the slab means unbounded, outside means empty
    par = direction == 0
    inside = (base >= lower) & (base <= upper)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    return tmin.max(axis=1), tmax.min(axis=1)


def ray_samples(grid: ScalarGrid, base, direction, step: float | None = None) -> RaySamples:
    """Uniform samples along every ray, centred in the ray/box chord.

    A chord of length ``L`` gets ``ceil(L / step)`` samples spaced ``step``
    apart, so ``count * step`` over-estimates ``L`` by less than one step.
    """
    if step is None:
        step = grid.spacing / 2
    if not step > 0:
        raise ValueError("step must be positive")
    base = np.atleast_2d(np.asarray(base, dtype=float))
    direction = np.atleast_2d(np.asarray(direction, dtype=float))
    s_lo, s_hi = chord_interval(grid.origin, grid.upper, base, direction)
    chord = np.where(s_hi > s_lo, s_hi - s_lo, 0.0)
    counts = np.where(chord > 0, np.ceil(chord / step - 1e-9), 0).astype(np.int64)
    counts = np.where((chord > 0) & (counts == 0), 1, counts)
    ray = np.repeat(np.arange(len(base)), counts)
    starts = np.cumsum(counts) - counts
    k = np.arange(counts.sum()) - np.repeat(starts, counts)
    with np.errstate(invalid="ignore"):
        mid = np.where(chord > 0, 0.5 * (s_lo + s_hi), 0.0)
    s = mid[ray] + (k - 0.5 * (counts[ray] - 1)) * step
    points = base[ray] + s[:, None] * direction[ray]
    return RaySamples(ray, s, points, counts, float(step))


def interpolate(grid: ScalarGrid | np.ndarray, points: np.ndarray, geometry: ScalarGrid | None = None):
    """Multilinear interpolation with zero extension outside the grid."""
    g = geometry if geometry is not None else grid
    values = grid.values if isinstance(grid, ScalarGrid) else grid
    if len(points) == 0:
        return np.zeros(0)
    idx = (np.asarray(points) - np.asarray(g.origin)) / g.spacing
    return ndimage.map_coordinates(values, idx.T, order=1, mode="constant", cval=0.0)


def sample_along_ray(grid: ScalarGrid, ray: Ray | Ray3, step: float | None = None):
    """Sample ``grid`` along one ray; returns ``(s, values)`` arrays.

    Empty arrays when the ray misses the grid box.
    """
    if isinstance(ray, Ray):
        if grid.ndim != 2:
            raise ValueError("planar ray needs a 2D grid")
        base, direction = planar_ray_arrays([ray.theta], [ray.p])
    else:
        if grid.ndim != 3:
            raise ValueError("Ray3 needs a 3D grid")
        base, direction = np.array([ray.x]), np.array([ray.xi])
    rs = ray_samples(grid, base, direction, step)
    return rs.s, interpolate(grid, rs.points)


# --- symmetric tensor fields -------------------------------------------------


def sym_indices(rank: int, ndim: int) -> list[tuple]:
    """Independent components of a symmetric tensor as sorted index tuples."""
    return list(combinations_with_replacement(range(ndim), rank))


def multiplicity(index: tuple) -> int:
    """Number of distinct orderings of a sorted index tuple."""
    out = math.factorial(len(index))
    for i in set(index):
        out //= math.factorial(index.count(i))
    return out


@dataclass(frozen=True, eq=False)
class SymTensorField:
    """Symmetric tensor field; one array per independent component.

    ``data`` maps sorted 0-based index tuples to arrays of shape ``dims``.
    Rank 0 is a scalar field stored under the empty tuple.
    """

    rank: int
    origin: tuple
    spacing: float
    data: dict = field(repr=False)

    def __post_init__(self):
        keys = sym_indices(self.rank, len(self.origin))
        if set(self.data) != set(keys):
            raise ValueError(f"rank-{self.rank} field needs components {keys}")
        shapes = {np.shape(a) for a in self.data.values()}
        if len(shapes) != 1:
            raise ValueError("component grids must share dims")
        frozen = {k: _frozen(self.data[k]) for k in keys}
        object.__setattr__(self, "data", frozen)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @classmethod
    def from_function(cls, rank, grid: ScalarGrid, fn):
        """Build from ``fn(index, *coords)`` evaluated for each sorted index."""
        coords = grid.coords()
        data = {
            k: np.broadcast_to(fn(k, *coords), grid.dims)
            for k in sym_indices(rank, grid.ndim)
        }
        return cls(rank, grid.origin, grid.spacing, data)

    @classmethod
    def zeros(cls, rank, geometry: ScalarGrid):
        data = {k: np.zeros(geometry.dims) for k in sym_indices(rank, geometry.ndim)}
        return cls(rank, geometry.origin, geometry.spacing, data)

    @property
    def ndim(self) -> int:
        return len(self.origin)

    @property
    def dims(self) -> tuple:
        return next(iter(self.data.values())).shape

    def __getitem__(self, index) -> np.ndarray:
        if not isinstance(index, tuple):
            index = (index,)
        return self.data[tuple(sorted(index))]

    def component(self, *index) -> ScalarGrid:
        return ScalarGrid(self.origin, self.spacing, self[index])

    def geometry(self) -> ScalarGrid:
        return ScalarGrid(self.origin, self.spacing, np.zeros(self.dims))

    def contract(self, xi) -> np.ndarray:
        """Full contraction with one vector on every index: a scalar array."""
        xi = np.asarray(xi, dtype=float)
        out = np.zeros(self.dims)
        for k, a in self.data.items():
            out += multiplicity(k) * np.prod(xi[list(k)]) * a
        return out

    def map(self, fn) -> "SymTensorField":
        return SymTensorField(
            self.rank, self.origin, self.spacing, {k: fn(a) for k, a in self.data.items()}
        )

    def __add__(self, other: "SymTensorField"):
        return SymTensorField(
            self.rank, self.origin, self.spacing,
            {k: a + other.data[k] for k, a in self.data.items()},
        )

    def __sub__(self, other: "SymTensorField"):
        return SymTensorField(
            self.rank, self.origin, self.spacing,
            {k: a - other.data[k] for k, a in self.data.items()},
        )

    def __mul__(self, c: float):
        return self.map(lambda a: c * a)

    __rmul__ = __mul__

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(a))) for a in self.data.values())


def sym_product(a: SymTensorField, b: SymTensorField) -> SymTensorField:
    """Symmetrized tensor product ``a (.) b``."""
    rank = a.rank + b.rank
    out = {}
    for k in sym_indices(rank, a.ndim):
        # average over the ways of splitting the multiset k between the factors
        total = np.zeros(a.dims)
        splits = 0
        for chosen in combinations(range(rank), a.rank):
            rest = tuple(k[i] for i in range(rank) if i not in chosen)
            total = total + a[tuple(k[i] for i in chosen)] * b[rest]
            splits += 1
        out[k] = total / splits
    return SymTensorField(rank, a.origin, a.spacing, out)


# --- HTGD file format ----------------------------------------------------------


def grid_to_bytes(grid: ScalarGrid) -> bytes:
    head = MAGIC + struct.pack("<BB", FORMAT_VERSION, grid.ndim)
    head += struct.pack(f"<{grid.ndim}I", *grid.dims)
    head += struct.pack(f"<{grid.ndim}d", *grid.origin)
    head += struct.pack("<d", grid.spacing)
    return head + np.ascontiguousarray(grid.values, dtype="<f8").tobytes()


def grid_from_bytes(buf: bytes) -> ScalarGrid:
    if len(buf) < 6:
        raise TruncatedPayloadError("file shorter than the HTGD header")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, ndim = struct.unpack_from("<BB", buf, 4)
    if version != FORMAT_VERSION:
        raise BadVersionError(f"unsupported HTGD version {version}")
    if ndim not in (1, 2, 3):
        raise DimOverflowError(f"ndim={ndim} out of range")
    head = 6 + 4 * ndim + 8 * ndim + 8
    if len(buf) < head:
        raise TruncatedPayloadError("truncated HTGD header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 6)
    origin = struct.unpack_from(f"<{ndim}d", buf, 6 + 4 * ndim)
    (spacing,) = struct.unpack_from("<d", buf, 6 + 12 * ndim)
    count = math.prod(dims)
    if count > MAX_SAMPLES:
        raise DimOverflowError(f"dims {dims} exceed {MAX_SAMPLES} samples")
    need = head + 8 * count
    if len(buf) < need:
        raise TruncatedPayloadError(f"payload has {len(buf) - head} bytes, need {8 * count}")
    values = np.frombuffer(buf, dtype="<f8", count=count, offset=head).reshape(dims)
    return ScalarGrid(origin, spacing, values.astype(np.float64))


def write_grid(grid: ScalarGrid, path) -> None:
    Path(path).write_bytes(grid_to_bytes(grid))


def read_grid(path) -> ScalarGrid:
    return grid_from_bytes(Path(path).read_bytes())
