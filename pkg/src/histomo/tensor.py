"""Symmetric tensor calculus and longitudinal/transverse ray transforms.

Derivatives are second-order central differences in the interior and
second-order one-sided at the boundary. Higher derivatives along one axis
use the standard central stencil for that order; mixed derivatives are
compositions of single-axis derivatives taken in axis order 0, 1, 2, so
every discrete mixed partial is independent of the order it was requested in.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from itertools import permutations, product

import numpy as np
from scipy import ndimage

from .core import (
    Ray3,
    ScalarGrid,
    SymTensorField,
    interpolate,
    multiplicity,
    ray_samples,
    sym_indices,
)
from .distribution import bin_many, moments

UNIT_TOL = 1e-9


# --- finite differences --------------------------------------------------------


def _shift(a, axis, lo, hi):
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(lo, a.shape[axis] + hi if hi <= 0 else hi)
    return a[tuple(sl)]


_WIDE_STENCILS = {
    1: np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0,
    2: np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0,
}


def axis_derivative(
    a: np.ndarray, h: float, axis: int, order: int, accuracy: int = 2
) -> np.ndarray:
    """``order``-th derivative along one axis (orders 0-4).

    ``accuracy=4`` swaps in five-point stencils for first and second
    derivatives away from the two outermost layers.
    """
    if order == 0:
        return a
    if accuracy == 4 and order in _WIDE_STENCILS and a.shape[axis] >= 5:
        out = axis_derivative(a, h, axis, order).copy()
        wide = ndimage.correlate1d(a, _WIDE_STENCILS[order], axis=axis, mode="nearest")
        inner = [slice(None)] * a.ndim
        inner[axis] = slice(2, a.shape[axis] - 2)
        out[tuple(inner)] = wide[tuple(inner)] / h**order
        return out
    if accuracy not in (2, 4):
        raise ValueError(f"accuracy must be 2 or 4, got {accuracy}")
    if order == 1:
        return np.gradient(a, h, axis=axis, edge_order=2)
    n = a.shape[axis]
    if order == 2:
        out = np.empty_like(a)
        inner = [slice(None)] * a.ndim
        inner[axis] = slice(1, n - 1)
        out[tuple(inner)] = (
            _shift(a, axis, 2, 0) - 2 * _shift(a, axis, 1, -1) + _shift(a, axis, 0, -2)
        ) / h**2
        take = lambda i: np.take(a, i, axis=axis)
        put = [slice(None)] * a.ndim
        put[axis] = 0
        out[tuple(put)] = (2 * take(0) - 5 * take(1) + 4 * take(2) - take(3)) / h**2
        put[axis] = n - 1
        out[tuple(put)] = (2 * take(n - 1) - 5 * take(n - 2) + 4 * take(n - 3) - take(n - 4)) / h**2
        return out
    if order == 3:
        out = axis_derivative(axis_derivative(a, h, axis, 2), h, axis, 1)
        inner = [slice(None)] * a.ndim
        inner[axis] = slice(2, n - 2)
        out[tuple(inner)] = (
            -_shift(a, axis, 0, -4) + 2 * _shift(a, axis, 1, -3)
            - 2 * _shift(a, axis, 3, -1) + _shift(a, axis, 4, 0)
        ) / (2 * h**3)
        return out
    if order == 4:
        out = axis_derivative(axis_derivative(a, h, axis, 2), h, axis, 2)
        inner = [slice(None)] * a.ndim
        inner[axis] = slice(2, n - 2)
        out[tuple(inner)] = (
            _shift(a, axis, 0, -4) - 4 * _shift(a, axis, 1, -3) + 6 * _shift(a, axis, 2, -2)
            - 4 * _shift(a, axis, 3, -1) + _shift(a, axis, 4, 0)
        ) / h**4
        return out
    raise ValueError(f"derivative order {order} not supported")


def partial(a: np.ndarray, h: float, axes: tuple, accuracy: int = 2) -> np.ndarray:
    """Mixed partial derivative, one entry of ``axes`` per differentiation."""
    out = a
    for ax in range(a.ndim):
        out = axis_derivative(out, h, ax, list(axes).count(ax), accuracy)
    return out


class _PartialCache:
    def __init__(self, field: SymTensorField, accuracy: int = 2):
        self.field = field
        self.accuracy = accuracy
        self.cache = {}

    def __call__(self, comp: tuple, axes: tuple) -> np.ndarray:
        key = (tuple(sorted(comp)), tuple(sorted(axes)))
        if key not in self.cache:
            self.cache[key] = partial(
                self.field[key[0]], self.field.spacing, key[1], self.accuracy
            )
        return self.cache[key]


def as_field(u) -> SymTensorField:
    if isinstance(u, ScalarGrid):
        return SymTensorField(0, u.origin, u.spacing, {(): u.values})
    return u


def sym_d(u) -> SymTensorField:
    """Symmetrized derivative: rank-k field to rank-(k+1) field.

    Accepts a :class:`ScalarGrid` (rank 0, giving the gradient) or a
    :class:`SymTensorField` of rank up to 3.
    """
    u = as_field(u)
    if u.rank >= 4:
        raise ValueError(f"sym_d does not support rank-{u.rank} input")
    k = u.rank
    grads = {}
    out = {}
    for idx in sym_indices(k + 1, u.ndim):
        total = 0.0
        for j in range(k + 1):
            rest = tuple(sorted(idx[:j] + idx[j + 1:]))
            key = (rest, idx[j])
            if key not in grads:
                grads[key] = np.gradient(u[rest], u.spacing, axis=idx[j], edge_order=2)
            total = total + grads[key]
        out[idx] = total / (k + 1)
    return SymTensorField(k + 1, u.origin, u.spacing, out)


def divergence(f: SymTensorField) -> SymTensorField:
    """Component-wise divergence ``(delta f)_{i..} = sum_j f_{j i..., j}``."""
    if f.rank < 1:
        raise ValueError("divergence needs rank >= 1")
    out = {}
    for idx in sym_indices(f.rank - 1, f.ndim):
        out[idx] = sum(
            np.gradient(f[(j,) + idx], f.spacing, axis=j, edge_order=2) for j in range(f.ndim)
        )
    return SymTensorField(f.rank - 1, f.origin, f.spacing, out)


@lru_cache(maxsize=None)
def levi_civita(ndim: int) -> np.ndarray:
    eps = np.zeros((ndim,) * ndim)
    for perm in permutations(range(ndim)):
        inversions = sum(perm[i] > perm[j] for i in range(ndim) for j in range(i + 1, ndim))
        eps[perm] = -1.0 if inversions % 2 else 1.0
    return eps


def saint_venant_vec(f: SymTensorField) -> SymTensorField:
    """Curl of a vector field: ``(curl f)_i = eps_ijk f_{k,j}``.

    In 2D the single skew component ``f_{2,1} - f_{1,2}`` is returned as a
    rank-0 field. Vanishes exactly on discrete gradients away from the
    boundary, since central differences along different axes commute.
    """
    if f.rank != 1:
        raise ValueError("saint_venant_vec needs a vector field")
    h = f.spacing
    d = lambda comp, ax: np.gradient(f[(comp,)], h, axis=ax, edge_order=2)
    if f.ndim == 2:
        return SymTensorField(0, f.origin, h, {(): d(1, 0) - d(0, 1)})
    curl = {
        (0,): d(2, 1) - d(1, 2),
        (1,): d(0, 2) - d(2, 0),
        (2,): d(1, 0) - d(0, 1),
    }
    return SymTensorField(1, f.origin, h, curl)


def kroner_rank2(f: SymTensorField, accuracy: int = 4) -> SymTensorField:
    """Kroner tensor ``K_mn = eps_mik eps_njl f_{il,jk}`` of a 3D rank-2 field.

    This is ``-eps_mik eps_njl f_{ij,kl}``; the sign is chosen so that
    ``K(du (.) du) = 2 Adj(d^2 u)``, e.g. ``K = 2 I`` for ``u = |x|^2 / 2``.
    Fourth-order stencils by default: ``du (.) du`` varies on half the length
    scale of ``u``, and second-order K is too coarse on small grids.
    """
    if f.rank != 2 or f.ndim != 3:
        raise ValueError("kroner_rank2 needs a rank-2 field in 3D")
    eps = levi_civita(3)
    d2 = _PartialCache(f, accuracy)
    out = {}
    for m, n in sym_indices(2, 3):
        total = np.zeros(f.dims)
        for i, k in product(range(3), repeat=2):
            if eps[m, i, k] == 0:
                continue
            for j, l in product(range(3), repeat=2):
                e = eps[m, i, k] * eps[n, j, l]
                if e:
                    total += e * d2((i, l), (j, k))
        out[(m, n)] = total
    return SymTensorField(2, f.origin, f.spacing, out)


# --- ray transforms ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TensorSinogram:
    """Ray-indexed transform values.

    ``values`` is ``(n,)`` for the LRT and ``(n, 3)`` holding
    ``(c11, c12, c22)`` in the transverse frame for the TRT.
    """

    base: np.ndarray
    xi: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != len(self.base):
            raise ValueError("value count does not match ray count")

    @property
    def rays(self) -> list[Ray3]:
        return [Ray3(tuple(x), tuple(d)) for x, d in zip(self.base, self.xi)]

    def write_csv(self, path) -> None:
        """``x1,x2,x3,xi1,xi2,xi3,c11,c12,c22``; the LRT fills ``c11`` only."""
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = np.stack([vals, np.zeros_like(vals), np.zeros_like(vals)], axis=1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x1", "x2", "x3", "xi1", "xi2", "xi3", "c11", "c12", "c22"])
            for row in np.hstack([self.base, self.xi, vals]):
                w.writerow([f"{v:.17g}" for v in row])


@dataclass(frozen=True, eq=False)
class RayHistograms:
    """Per-ray histograms over a shared set of bin edges."""

    base: np.ndarray
    xi: np.ndarray
    edges: np.ndarray
    mass: np.ndarray
    underflow: np.ndarray
    overflow: np.ndarray

    def moment(self, k: int) -> np.ndarray:
        return moments(self.mass, self.edges, k)


def _check_rays(rays):
    if isinstance(rays, tuple) and len(rays) == 2:
        base, xi = (np.atleast_2d(np.asarray(a, dtype=float)) for a in rays)
    else:
        rays = list(rays)
        base = np.array([r.x for r in rays], dtype=float).reshape(-1, 3)
        xi = np.array([r.xi for r in rays], dtype=float).reshape(-1, 3)
    norms = np.linalg.norm(xi, axis=1)
    if np.any(np.abs(norms - 1) > UNIT_TOL):
        raise ValueError("ray directions must be unit vectors")
    return base, xi


def transverse_frame(xi) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal basis of the plane normal to ``xi``.

    ``eta1`` is the axis with smallest ``|xi_k|`` made orthogonal to ``xi``;
    ``eta2 = xi x eta1``.
    """
    xi = np.asarray(xi, dtype=float)
    axis = np.argmin(np.abs(xi), axis=-1)
    e = np.eye(3)[axis]
    eta1 = e - np.sum(e * xi, axis=-1, keepdims=True) * xi
    eta1 /= np.linalg.norm(eta1, axis=-1, keepdims=True)
    eta2 = np.cross(xi, eta1)
    return eta1, eta2


CHUNK_SAMPLES = 1_500_000


def _ray_chunks(geometry, base, xi, step):
    """Yield ``(ray slice, RaySamples)`` over batches of rays."""
    n = len(base)
    if n == 0:
        return
    # rough per-ray sample estimate from the box diagonal
    diag = np.linalg.norm(np.asarray(geometry.upper) - np.asarray(geometry.origin))
    per_ray = max(1, int(diag / step) + 1)
    batch = max(1, CHUNK_SAMPLES // per_ray)
    for start in range(0, n, batch):
        sl = slice(start, min(n, start + batch))
        yield sl, ray_samples(geometry, base[sl], xi[sl], step)


def _contracted_samples(f: SymTensorField, rs, weights_fn):
    """Sum over components of ``weight(component, ray) * f_component(sample)``."""
    total = np.zeros(len(rs.s))
    for k, a in f.data.items():
        w = weights_fn(k)
        if not np.any(w):
            continue
        total += w[rs.ray] * interpolate(a, rs.points, f.geometry())
    return total


def _lrt_weights(f, xi):
    return lambda k: multiplicity(k) * np.prod(xi[:, list(k)], axis=1)


def sampled_contraction(f: SymTensorField, base, xi, step=None):
    """Samples of ``f`` fully contracted with each ray direction.

    Returns ``(RaySamples, values)`` for all rays at once.
    """
    geom = f.geometry()
    step = step or f.spacing / 2
    rs = ray_samples(geom, base, xi, step)
    return rs, _contracted_samples(f, rs, _lrt_weights(f, xi))


def lrt(f: SymTensorField, rays, step: float | None = None) -> TensorSinogram:
    """Longitudinal ray transform of a rank-1, 2 or 4 field (3D).

    The integrand is ``f`` contracted with the ray direction on every index.
    """
    if f.rank not in (1, 2, 4):
        raise ValueError(f"lrt supports rank 1, 2 and 4, got {f.rank}")
    base, xi = _check_rays(rays)
    step = step or f.spacing / 2
    out = np.zeros(len(base))
    for sl, rs in _ray_chunks(f.geometry(), base, xi, step):
        vals = _contracted_samples(f, rs, _lrt_weights(f, xi[sl]))
        out[sl] = step * np.bincount(rs.ray, weights=vals, minlength=sl.stop - sl.start)
    return TensorSinogram(base, xi, out)


def trt(f: SymTensorField, rays, step: float | None = None) -> TensorSinogram:
    """Transverse ray transform of a 3D rank-2 field.

    Values are ``(c11, c12, c22)`` with ``c_ab`` the ray integral of
    ``eta_a . f . eta_b`` in the frame from :func:`transverse_frame`.
    """
    if f.rank != 2 or f.ndim != 3:
        raise ValueError("trt needs a rank-2 field in 3D")
    base, xi = _check_rays(rays)
    step = step or f.spacing / 2
    eta1, eta2 = transverse_frame(xi)
    pairs = [(eta1, eta1), (eta1, eta2), (eta2, eta2)]
    out = np.zeros((len(base), 3))
    for sl, rs in _ray_chunks(f.geometry(), base, xi, step):
        for c, (ea, eb) in enumerate(pairs):
            ea_, eb_ = ea[sl], eb[sl]

            def weights(k, ea_=ea_, eb_=eb_):
                i, j = k
                w = ea_[:, i] * eb_[:, j]
                return w + ea_[:, j] * eb_[:, i] if i != j else w

            vals = _contracted_samples(f, rs, weights)
            out[sl, c] = step * np.bincount(rs.ray, weights=vals, minlength=sl.stop - sl.start)
    return TensorSinogram(base, xi, out)


def hlrt(f: SymTensorField, rays, edges, step: float | None = None) -> RayHistograms:
    """Histogram LRT: per-ray distribution of the contracted field values."""
    if f.rank not in (1, 2):
        raise ValueError(f"hlrt supports rank 1 and 2, got {f.rank}")
    base, xi = _check_rays(rays)
    step = step or f.spacing / 2
    edges = np.asarray(edges, dtype=float)
    nb = len(edges) - 1
    mass = np.zeros((len(base), nb))
    under = np.zeros(len(base))
    over = np.zeros(len(base))
    for sl, rs in _ray_chunks(f.geometry(), base, xi, step):
        vals = _contracted_samples(f, rs, _lrt_weights(f, xi[sl]))
        m, u, o = bin_many(rs.ray, vals, sl.stop - sl.start, step, edges)
        mass[sl], under[sl], over[sl] = m, u, o
    return RayHistograms(base, xi, edges, mass, under, over)


def fibonacci_directions(n: int, hemisphere: bool = True) -> np.ndarray:
    """Near-uniform unit vectors; on the upper hemisphere by default."""
    i = np.arange(n) + 0.5
    z = 1 - i / n if hemisphere else 1 - 2 * i / n
    phi = i * np.pi * (3 - np.sqrt(5))
    r = np.sqrt(1 - z**2)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def parallel_ray_set(directions, n_offsets: int, radius: float, center=(0.0, 0.0, 0.0)):
    """Rays on an ``n_offsets x n_offsets`` lattice normal to each direction.

    Offsets span ``[-radius, radius]`` in the transverse frame. Returns
    ``(base, xi)`` arrays, direction-major.
    """
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    t = np.linspace(-radius, radius, n_offsets)
    a, b = np.meshgrid(t, t, indexing="ij")
    a, b = a.ravel(), b.ravel()
    eta1, eta2 = transverse_frame(directions)
    base = (
        np.asarray(center)[None, None, :]
        + a[None, :, None] * eta1[:, None, :]
        + b[None, :, None] * eta2[:, None, :]
    ).reshape(-1, 3)
    xi = np.repeat(directions, len(a), axis=0)
    return base, xi


def random_rays(rng, n: int, radius: float, center=(0.0, 0.0, 0.0)):
    """Random rays with isotropic directions through a ball of ``radius``."""
    xi = rng.normal(size=(n, 3))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    eta1, eta2 = transverse_frame(xi)
    r = radius * np.sqrt(rng.uniform(size=n))
    phi = rng.uniform(0, 2 * np.pi, size=n)
    base = (
        np.asarray(center)
        + (r * np.cos(phi))[:, None] * eta1
        + (r * np.sin(phi))[:, None] * eta2
    )
    return base, xi
