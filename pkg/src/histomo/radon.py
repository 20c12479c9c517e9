"""Scalar Radon transform, its histogram variant, and filtered backprojection.

Rays are ``L(theta, p) = {x : x . Theta = p}`` with ``Theta = (cos, sin)``,
sampled as ``p Theta + s Theta_perp``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import ScalarGrid, SingularInputError, interpolate, planar_ray_arrays, ray_samples
from .distribution import Histogram, bin_many, check_edges, moments

ROLLOFF_START = 0.8
CHUNK_SAMPLES = 2_000_000


@dataclass(frozen=True, eq=False)
class Sinogram:
    thetas: np.ndarray
    ps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        thetas = np.asarray(self.thetas, dtype=float)
        ps = np.asarray(self.ps, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.shape != (len(thetas), len(ps)):
            raise ValueError(f"values shape {values.shape} != ({len(thetas)}, {len(ps)})")
        if not np.all(np.isfinite(values)):
            raise ValueError("sinogram values must be finite")
        object.__setattr__(self, "thetas", thetas)
        object.__setattr__(self, "ps", ps)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class HistogramSinogram:
    """Per-ray histograms on shared edges; ``mass`` is ``(theta, p, bin)``."""

    thetas: np.ndarray
    ps: np.ndarray
    edges: np.ndarray
    mass: np.ndarray
    underflow: np.ndarray | None = None
    overflow: np.ndarray | None = None

    def __post_init__(self):
        edges = check_edges(self.edges)
        mass = np.asarray(self.mass, dtype=float)
        shape = (len(self.thetas), len(self.ps), len(edges) - 1)
        if mass.shape != shape:
            raise ValueError(f"mass shape {mass.shape} != {shape}")
        object.__setattr__(self, "thetas", np.asarray(self.thetas, dtype=float))
        object.__setattr__(self, "ps", np.asarray(self.ps, dtype=float))
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "mass", mass)
        for name in ("underflow", "overflow"):
            v = getattr(self, name)
            v = np.zeros(shape[:2]) if v is None else np.asarray(v, dtype=float).reshape(shape[:2])
            object.__setattr__(self, name, v)

    def histogram(self, i: int, j: int) -> Histogram:
        return Histogram(self.edges, self.mass[i, j], float(self.underflow[i, j]), float(self.overflow[i, j]))

    def total(self) -> np.ndarray:
        return self.mass.sum(axis=-1) + self.underflow + self.overflow


def centered_edges(lo: float, hi: float, nbins: int) -> np.ndarray:
    """``nbins`` equal bins covering ``[lo, hi]`` with ``lo`` at a bin centre.

    Putting the background value at a bin centre keeps the midpoint rule
    exact for it.
    """
    if nbins < 1 or not hi > lo:
        raise ValueError("need hi > lo and at least one bin")
    w = (hi - lo) / (nbins - 0.5)
    return lo - w / 2 + w * np.arange(nbins + 1)


def _check_2d(grid: ScalarGrid):
    if grid.ndim != 2:
        raise ValueError(f"expected a 2D grid, got ndim={grid.ndim}")


def _ray_blocks(grid: ScalarGrid, thetas, ps, step):
    """Yield ``(first_ray, RaySamples, values)`` in bounded-memory chunks."""
    tt, pp = np.meshgrid(thetas, ps, indexing="ij")
    base, tangent = planar_ray_arrays(tt.ravel(), pp.ravel())
    n_rays = len(base)
    per_ray = 2 * max(grid.dims) * grid.spacing / step + 2
    chunk = max(1, int(CHUNK_SAMPLES // per_ray))
    for start in range(0, n_rays, chunk):
        stop = min(n_rays, start + chunk)
        rs = ray_samples(grid, base[start:stop], tangent[start:stop], step)
        yield start, stop, rs, interpolate(grid, rs.points)


def radon(grid: ScalarGrid, thetas, ps, step: float | None = None) -> Sinogram:
    """Line integrals ``step * sum`` of interpolated samples along each ray."""
    _check_2d(grid)
    step = step or grid.spacing / 2
    thetas = np.asarray(thetas, dtype=float)
    ps = np.asarray(ps, dtype=float)
    out = np.zeros(len(thetas) * len(ps))
    for start, stop, rs, vals in _ray_blocks(grid, thetas, ps, step):
        out[start:stop] = step * np.bincount(rs.ray, weights=vals, minlength=stop - start)
    return Sinogram(thetas, ps, out.reshape(len(thetas), len(ps)))


def hist_radon(grid: ScalarGrid, thetas, ps, edges, step: float | None = None) -> HistogramSinogram:
    """Distribution of the grid values along every ray, binned on ``edges``."""
    _check_2d(grid)
    edges = check_edges(edges)
    step = step or grid.spacing / 2
    thetas = np.asarray(thetas, dtype=float)
    ps = np.asarray(ps, dtype=float)
    n = len(thetas) * len(ps)
    mass = np.zeros((n, len(edges) - 1))
    under = np.zeros(n)
    over = np.zeros(n)
    for start, stop, rs, vals in _ray_blocks(grid, thetas, ps, step):
        m, u, o = bin_many(rs.ray, vals, stop - start, step, edges)
        mass[start:stop], under[start:stop], over[start:stop] = m, u, o
    shape = (len(thetas), len(ps))
    return HistogramSinogram(thetas, ps, edges, mass.reshape(shape + (-1,)), under.reshape(shape), over.reshape(shape))


def moment_sinogram(hs: HistogramSinogram, k: int) -> Sinogram:
    """k-th moment of every ray histogram; approximates ``radon(f**k)``."""
    if int(k) != k or k < 1:
        raise ValueError(f"moment order must be an integer >= 1, got {k}")
    return Sinogram(hs.thetas, hs.ps, moments(hs.mass, hs.edges, int(k)))


# --- filtered backprojection ---------------------------------------------------


def ramp_filter(n: int, dp: float) -> np.ndarray:
    """Frequency response of the band-limited ramp on a padded grid of ``n``.

    Built from the spatial Ram-Lak kernel so the DC term is right, then
    tapered by a raised cosine above ``ROLLOFF_START`` of Nyquist.
    """
    k = np.arange(n)
    k = np.where(k > n // 2, k - n, k)
    kernel = np.zeros(n)
    kernel[k == 0] = 1.0 / (4 * dp**2)
    odd = k % 2 == 1
    kernel[odd] = -1.0 / (np.pi * k[odd] * dp) ** 2
    response = np.real(np.fft.fft(kernel)) * dp
    freq = np.abs(np.fft.fftfreq(n))  # cycles per sample; Nyquist = 0.5
    t = np.clip((freq / 0.5 - ROLLOFF_START) / (1 - ROLLOFF_START), 0.0, 1.0)
    return response * 0.5 * (1 + np.cos(np.pi * t))


def filter_sinogram(values: np.ndarray, dp: float) -> np.ndarray:
    """Ramp-filter along the last axis (any leading shape)."""
    n_p = values.shape[-1]
    n = 1 << int(np.ceil(np.log2(2 * n_p)))
    resp = ramp_filter(n, dp)
    spec = np.fft.rfft(values, n=n, axis=-1) * resp[: n // 2 + 1]
    return np.fft.irfft(spec, n=n, axis=-1)[..., :n_p]


def _default_geometry(ps: np.ndarray) -> ScalarGrid:
    r = float(np.max(np.abs(ps)))
    n = len(ps)
    return ScalarGrid((-r, -r), 2 * r / (n - 1), np.zeros((n, n)))


def backproject(values, thetas, ps, geometry: ScalarGrid) -> np.ndarray:
    """Sum over angles of linearly interpolated sinogram rows.

    ``values`` may carry leading stack axes: ``(..., n_theta, n_p)``.
    """
    values = np.asarray(values, dtype=float)
    thetas = np.asarray(thetas, dtype=float)
    ps = np.asarray(ps, dtype=float)
    lead = values.shape[:-2]
    flat = values.reshape((-1,) + values.shape[-2:])
    x, y = geometry.coords()
    x, y = x.ravel(), y.ravel()
    dp = ps[1] - ps[0]
    out = np.zeros((flat.shape[0], x.size))
    for t, theta in enumerate(thetas):
        pos = (x * np.cos(theta) + y * np.sin(theta) - ps[0]) / dp
        i0 = np.floor(pos).astype(np.int64)
        w = pos - i0
        ok = (i0 >= 0) & (i0 < len(ps) - 1)
        i0c = np.clip(i0, 0, len(ps) - 2)
        row = flat[:, t, :]
        out += np.where(ok, (1 - w) * row[:, i0c] + w * row[:, i0c + 1], 0.0)
    return out.reshape(lead + geometry.dims)


def fbp(sino: Sinogram, geometry: ScalarGrid | None = None) -> ScalarGrid:
    """Filtered backprojection for angles spread evenly over ``[0, pi)``."""
    return ScalarGrid(*_fbp_parts(sino.values, sino.thetas, sino.ps, geometry))


def fbp_stack(values, thetas, ps, geometry: ScalarGrid | None = None) -> np.ndarray:
    """FBP of many sinograms sharing one ray geometry; returns a stack of arrays."""
    return _fbp_parts(values, thetas, ps, geometry)[2]


def _fbp_parts(values, thetas, ps, geometry):
    thetas = np.asarray(thetas, dtype=float)
    ps = np.asarray(ps, dtype=float)
    if len(thetas) < 2:
        raise ValueError("filtered backprojection needs at least two angles")
    dps = np.diff(ps)
    if len(ps) < 2 or not np.allclose(dps, dps[0], rtol=1e-9, atol=0):
        raise ValueError("offsets must be uniformly spaced")
    geometry = geometry or _default_geometry(ps)
    _check_2d(geometry)
    q = filter_sinogram(np.asarray(values, dtype=float), dps[0])
    img = backproject(q, thetas, ps, geometry) * (np.pi / len(thetas))
    return geometry.origin, geometry.spacing, img


# --- analytic oracles ----------------------------------------------------------


def oracle_circle_delta(p):
    """Radon transform of the unit-circle delta: ``2 / sqrt(1 - p^2)`` inside."""
    p = np.asarray(p, dtype=float)
    if np.any(np.abs(p) == 1.0):
        raise SingularInputError("circle-delta projection is singular at |p| = 1")
    inside = np.abs(p) < 1
    out = np.where(inside, 2.0 / np.sqrt(np.where(inside, 1 - p**2, 1.0)), 0.0)
    return float(out) if out.ndim == 0 else out


def oracle_line_delta_plane_transform(theta) -> float:
    """Plane transform of ``delta(x1) delta(x2)``: ``1 / |Theta_3|`` for every offset."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (3,) or not np.isclose(np.linalg.norm(theta), 1.0, atol=1e-9):
        raise ValueError("Theta must be a unit 3-vector")
    if theta[2] == 0:
        raise SingularInputError("the plane contains the line when Theta_3 = 0")
    return 1.0 / abs(theta[2])


def thin_annulus_projection(edges, width: float, theta: float = 0.0, n_r: int = 8, n_phi: int = 200_000):
    """Binned projection density of a unit-mass-per-length annulus.

    The annulus ``1 - width/2 < |x| < 1 + width/2`` with density
    ``1/width`` is integrated in polar coordinates and its mass pushed
    forward under ``x -> x . Theta``; returns mass per unit ``p``.
    """
    edges = check_edges(edges)
    gr, gw = np.polynomial.legendre.leggauss(n_r)
    r = 1 + 0.5 * width * gr
    wr = 0.5 * width * gw * r / width
    phi = (np.arange(n_phi) + 0.5) * (2 * np.pi / n_phi)
    p = r[:, None] * np.cos(phi[None, :] - theta)
    w = np.broadcast_to(wr[:, None] * (2 * np.pi / n_phi), p.shape)
    mass, _ = np.histogram(p.ravel(), bins=edges, weights=w.ravel())
    return mass / np.diff(edges)


def plane_integral(fn, theta, s: float, extent: float, n: int = 801) -> float:
    """Midpoint-rule integral of ``fn(x, y, z)`` over the plane ``x . Theta = s``."""
    theta = np.asarray(theta, dtype=float)
    theta = theta / np.linalg.norm(theta)
    helper = np.eye(3)[int(np.argmin(np.abs(theta)))]
    e1 = helper - theta * (helper @ theta)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(theta, e1)
    t = (np.arange(n) + 0.5) * (2 * extent / n) - extent
    a, b = np.meshgrid(t, t, indexing="ij")
    pts = s * theta + a[..., None] * e1 + b[..., None] * e2
    da = (2 * extent / n) ** 2
    return float(np.sum(fn(pts[..., 0], pts[..., 1], pts[..., 2])) * da)


# --- CSV -----------------------------------------------------------------------


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_sinogram_csv(sino: Sinogram, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta", "p", "value"])
        for i, t in enumerate(sino.thetas):
            for j, p in enumerate(sino.ps):
                w.writerow([_fmt(t), _fmt(p), _fmt(sino.values[i, j])])


def read_sinogram_csv(path) -> Sinogram:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    thetas = np.unique(data[:, 0])
    ps = np.unique(data[:, 1])
    return Sinogram(thetas, ps, data[:, 2].reshape(len(thetas), len(ps)))


def write_histogram_sinogram_csv(hs: HistogramSinogram, path, edges_path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta", "p", "bin_index", "mass"])
        for i, t in enumerate(hs.thetas):
            for j, p in enumerate(hs.ps):
                for k in np.flatnonzero(hs.mass[i, j]):
                    w.writerow([_fmt(t), _fmt(p), int(k), _fmt(hs.mass[i, j, k])])
    with open(edges_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["edge"])
        for e in hs.edges:
            w.writerow([_fmt(e)])
