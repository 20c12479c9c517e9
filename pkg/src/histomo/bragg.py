"""Bragg-edge transmission spectra and the rank-4 compatibility operator.

Each path element with strain ``e`` shifts the edge to ``lam_e (1 + e)``;
the transmission is the length-weighted fraction of shifted edges below
``lam``, i.e. the cumulative strain histogram in wavelength units, times a
linear trend.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import product

import numpy as np

from .core import HistomoError, ScalarGrid, SymTensorField, sym_indices, sym_product
from .distribution import Histogram, check_edges, moments
from .tensor import _check_rays, _ray_chunks, _contracted_samples, _lrt_weights, levi_civita
from .tensor import _PartialCache, as_field, sym_d

MIN_SAMPLES = 16
PLATEAU = 0.15
FLATNESS = 0.02


class IncompleteEdgeError(HistomoError):
    """The spectrum does not show a flat region on both sides of the edge."""


@dataclass(frozen=True, eq=False)
class Spectrum:
    wavelengths: np.ndarray
    transmission: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.wavelengths, dtype=float)
        t = np.asarray(self.transmission, dtype=float)
        if lam.ndim != 1 or lam.shape != t.shape:
            raise ValueError("wavelengths and transmission must be matching 1D arrays")
        if len(lam) < MIN_SAMPLES:
            raise ValueError(f"need at least {MIN_SAMPLES} wavelength samples")
        if np.any(np.diff(lam) <= 0):
            raise ValueError("wavelengths must be strictly increasing")
        object.__setattr__(self, "wavelengths", lam)
        object.__setattr__(self, "transmission", t)


@dataclass(frozen=True)
class EdgeModel:
    """Unstrained edge ``lambda_e`` and trend ``intercept + slope * lam``."""

    lambda_e: float
    slope: float = 0.0
    intercept: float = 1.0

    def __post_init__(self):
        if not self.lambda_e > 0:
            raise ValueError("edge wavelength must be positive")

    def trend(self, lam) -> np.ndarray:
        return self.intercept + self.slope * np.asarray(lam, dtype=float)

    def edge(self, strain) -> np.ndarray:
        return self.lambda_e * (1.0 + np.asarray(strain, dtype=float))

    def strain(self, lam) -> np.ndarray:
        return np.asarray(lam, dtype=float) / self.lambda_e - 1.0


def simulate_spectrum(strains, weights, model: EdgeModel, wavelengths) -> Spectrum:
    """``T(lam) = trend(lam) * sum_i w_i H(lam - lam_i) / sum_i w_i``.

    ``H(0) = 1``: a sample sitting exactly on a wavelength already transmits.
    """
    strains = np.asarray(strains, dtype=float).ravel()
    weights = np.broadcast_to(np.asarray(weights, dtype=float), strains.shape)
    if strains.size == 0:
        raise ValueError("no strain samples")
    total = weights.sum()
    if not total > 0:
        raise ValueError("total path length must be positive")
    lam = np.asarray(wavelengths, dtype=float)
    trend = model.trend(lam)
    if np.any(trend <= 0):
        raise ValueError("trend must stay positive over the wavelength window")
    order = np.argsort(model.edge(strains), kind="stable")
    edges = model.edge(strains)[order]
    cum = np.concatenate([[0.0], np.cumsum(weights[order])])
    frac = cum[np.searchsorted(edges, lam, side="right")] / total
    return Spectrum(lam, trend * frac)


def wavelength_window(strain_lo: float, strain_hi: float, model: EdgeModel, n: int = 512,
                      plateau: float = PLATEAU) -> np.ndarray:
    """Wavelengths covering the shifted edges with flat margins on both sides.

    The top ``plateau`` fraction and a matching bottom band lie beyond all
    edges; one extra step keeps the extreme edges off the margins.
    """
    lo, hi = model.edge(strain_lo), model.edge(strain_hi)
    span = max(hi - lo, 1e-6 * model.lambda_e)
    inner = 1.0 - 2.0 * plateau - 4.0 / n
    width = span / inner
    a = lo - (plateau + 2.0 / n) * width
    return np.linspace(a, a + width, n)


def _linear_fit(x, y):
    A = np.stack([np.ones_like(x), x], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef


def extract_histogram(sp: Spectrum, model: EdgeModel, edges, path_length: float = 1.0,
                      plateau: float = PLATEAU, flatness: float = FLATNESS) -> Histogram:
    """Strain histogram recovered from one transmission spectrum.

    The trend is fitted on the top ``plateau`` fraction of the window and
    divided out; the normalised cumulative is then read off at the strain
    edges, and the differences, clamped at zero, are rescaled to
    ``path_length``. Mass outside ``edges`` goes to under/overflow.
    """
    edges = check_edges(edges)
    lam = sp.wavelengths
    n_flat = max(2, int(np.ceil(plateau * len(lam))))
    a, b = _linear_fit(lam[-n_flat:], sp.transmission[-n_flat:])
    trend = a + b * lam
    if np.any(trend <= 0):
        raise IncompleteEdgeError("fitted trend is not positive over the window")
    c = sp.transmission / trend
    top, bottom = c[-n_flat:], c[:n_flat]
    if np.max(np.abs(top - 1.0)) > flatness or np.max(np.abs(bottom)) > flatness:
        raise IncompleteEdgeError(
            f"no flat region at both ends (top dev {np.max(np.abs(top - 1)):.3g}, "
            f"bottom dev {np.max(np.abs(bottom)):.3g})"
        )
    eps = model.strain(lam)
    # the cumulative is a step function sampled at the wavelengths; hold it
    # between samples so an edge on a sample boundary is not smeared
    idx = np.searchsorted(eps, edges, side="right") - 1
    at_edges = np.where(idx >= 0, c[np.clip(idx, 0, None)], 0.0)
    dens = np.diff(at_edges)
    dens = np.clip(dens, 0.0, None)
    under = max(float(at_edges[0]), 0.0)
    over = max(float(1.0 - at_edges[-1]), 0.0)
    total = dens.sum() + under + over
    if not total > 0:
        raise IncompleteEdgeError("extracted cumulative carries no mass")
    scale = path_length / total
    return Histogram(edges, dens * scale, underflow=under * scale, overflow=over * scale)


def bragg_moment_sinograms(du: SymTensorField, rays, model: EdgeModel, k, n_wavelengths: int = 512,
                           step: float | None = None) -> dict:
    """Per-ray strain moments measured through simulated Bragg spectra.

    For each ray, samples of ``xi . du . xi`` give a spectrum, which is
    inverted with :func:`extract_histogram`; the histogram moments of each
    order in ``k`` are returned as a dict ``{order: array}``. Each should
    match the LRT of the ``order``-th symmetric power of ``du``.
    """
    orders = [k] if np.isscalar(k) else list(k)
    if du.rank != 2:
        raise ValueError("strain field must be rank 2")
    base, xi = _check_rays(rays)
    step = step or du.spacing / 2
    out = {q: np.zeros(len(base)) for q in orders}
    vmax = du.max_abs()
    if vmax >= 1:
        raise ValueError("strains must stay above -1 for a positive edge wavelength")
    lo, hi = -vmax, vmax
    if vmax == 0:
        lo, hi = -1e-6, 1e-6
    lam = wavelength_window(lo, hi, model, n_wavelengths)
    edges = model.strain(lam)
    for sl, rs in _ray_chunks(du.geometry(), base, xi, step):
        vals = _contracted_samples(du, rs, _lrt_weights(du, xi[sl]))
        starts = np.searchsorted(rs.ray, np.arange(sl.stop - sl.start + 1))
        for r in range(sl.stop - sl.start):
            a, b = starts[r], starts[r + 1]
            if a == b:
                continue
            sp = simulate_spectrum(vals[a:b], step, model, lam)
            h = extract_histogram(sp, model, edges, path_length=step * (b - a))
            for q in orders:
                out[q][sl.start + r] = float(moments(h.mass, h.edges, q))
    return out


def write_spectrum_csv(sp: Spectrum, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["wavelength", "transmission"])
        for lam, t in zip(sp.wavelengths, sp.transmission):
            w.writerow([f"{lam:.17g}", f"{t:.17g}"])


def read_spectrum_csv(path) -> Spectrum:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Spectrum(data[:, 0], data[:, 1])


# --- rank-4 compatibility operator ---------------------------------------------------

GK_ACCURACY = 4
MIN_POINTS = 9  # five interior points after the two-layer stencil margins


def _check_gk_grid(dims):
    if min(dims) < MIN_POINTS:
        raise ValueError(f"grid too small for fourth derivatives: {dims}, need {MIN_POINTS} per axis")


def gk_component(f: SymTensorField, out_index: tuple, cache=None) -> np.ndarray:
    """One entry ``K_{abcd}`` of the rank-4 operator, by the literal contraction.

    ``K_{abcd} = eps_{a p q} eps_{b r s} eps_{c t u} eps_{d v w}
    f_{q r u v, p s t w}``: each permutation symbol pairs one field index
    with one derivative index.
    """
    eps = levi_civita(3)
    d4 = cache or _PartialCache(f, GK_ACCURACY)
    total = np.zeros(f.dims)
    a, b, c, d = out_index
    pairs = [
        [(p, q, eps[a, p, q]) for p in range(3) for q in range(3) if eps[a, p, q]],
        [(r, s, eps[b, r, s]) for r in range(3) for s in range(3) if eps[b, r, s]],
        [(t, u, eps[c, t, u]) for t in range(3) for u in range(3) if eps[c, t, u]],
        [(v, w, eps[d, v, w]) for v in range(3) for w in range(3) if eps[d, v, w]],
    ]
    for (p, q, e1), (r, s, e2), (t, u, e3), (v, w, e4) in product(*pairs):
        total += (e1 * e2 * e3 * e4) * d4((q, r, u, v), (p, s, t, w))
    return total


def gk_rank4(f: SymTensorField) -> SymTensorField:
    """Rank-4 compatibility operator of a 3D rank-4 field.

    Fourth derivatives use five-point stencils, mixed partials composed in
    axis order. The result is symmetric, so only the 15 sorted components
    are evaluated.
    """
    if f.rank != 4 or f.ndim != 3:
        raise ValueError("gk_rank4 needs a rank-4 field in 3D")
    _check_gk_grid(f.dims)
    cache = _PartialCache(f, GK_ACCURACY)
    out = {idx: gk_component(f, idx, cache) for idx in sym_indices(4, 3)}
    return SymTensorField(4, f.origin, f.spacing, out)


def gk_2d_scalar(u) -> ScalarGrid:
    """Planar form: ``eps_{ap} eps_{bq} eps_{cr} eps_{ds} F_{abcd, pqrs}``.

    ``u`` is a 2D vector field (rank-1 :class:`SymTensorField`) and
    ``F = du (.) du``.
    """
    u = as_field(u)
    if u.ndim != 2 or u.rank != 1:
        raise ValueError("gk_2d_scalar needs a 2D vector field")
    _check_gk_grid(u.dims)
    du = sym_d(u)
    F = sym_product(du, du)
    eps = levi_civita(2)
    d4 = _PartialCache(F, GK_ACCURACY)
    total = np.zeros(u.dims)
    for field_idx in product(range(2), repeat=4):
        deriv = tuple(1 - i for i in field_idx)
        sign = np.prod([eps[i, j] for i, j in zip(field_idx, deriv)])
        total += sign * d4(field_idx, deriv)
    return ScalarGrid(u.origin, u.spacing, total)
