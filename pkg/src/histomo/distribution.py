"""Distribution of a function with respect to Lebesgue measure.

Masses are preimage lengths (or areas), never normalised to probabilities:
a constant ``c`` on a segment of length ``L`` is an atom of mass ``L`` at ``c``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .core import SingularInputError

SCAN_POINTS = 4096
ROOT_XTOL = 1e-12
SINGULAR_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Histogram:
    """Bin edges plus per-bin mass.

    ``underflow`` and ``overflow`` hold mass that fell below the first edge
    or above the last one.
    """

    edges: np.ndarray
    mass: np.ndarray
    underflow: float = 0.0
    overflow: float = 0.0

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        mass = np.asarray(self.mass, dtype=float)
        if edges.ndim != 1 or len(edges) < 2:
            raise ValueError("need at least two bin edges")
        if np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        if mass.shape != (len(edges) - 1,):
            raise ValueError(f"expected {len(edges) - 1} masses, got {mass.shape}")
        if np.any(mass < 0) or not np.all(np.isfinite(mass)):
            raise ValueError("bin masses must be finite and non-negative")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "mass", mass)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def density(self) -> np.ndarray:
        return self.mass / self.widths

    @property
    def total(self) -> float:
        return float(self.mass.sum())


@dataclass(frozen=True, eq=False)
class CumulativeHistogram:
    """Cumulative mass at each edge; starts at 0, ends at the total mass."""

    edges: np.ndarray
    values: np.ndarray

    def differences(self) -> Histogram:
        return Histogram(self.edges, np.diff(self.values))


def check_edges(edges) -> np.ndarray:
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or len(edges) == 0:
        raise ValueError("edge list is empty")
    if len(edges) < 2:
        raise ValueError("need at least two bin edges")
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    return edges


def bin_index(values, edges) -> np.ndarray:
    """Bin of each value; -1 below range, ``nbins`` above.

    A value on an interior edge goes to the upper bin; the last edge is
    closed so ``edges[-1]`` lands in the final bin.
    """
    nbins = len(edges) - 1
    idx = np.searchsorted(edges, values, side="right") - 1
    idx = np.where(np.asarray(values) == edges[-1], nbins - 1, idx)
    return np.where(np.asarray(values) > edges[-1], nbins, idx)


def bin_samples(values, step: float, edges) -> Histogram:
    """Histogram of ray samples: each sample contributes ``step`` of length."""
    edges = check_edges(edges)
    if not step > 0:
        raise ValueError("step must be positive")
    values = np.asarray(values, dtype=float)
    nbins = len(edges) - 1
    idx = bin_index(values, edges)
    counts = np.bincount(idx[(idx >= 0) & (idx < nbins)], minlength=nbins)
    return Histogram(
        edges,
        step * counts.astype(float),
        underflow=step * float(np.count_nonzero(idx < 0)),
        overflow=step * float(np.count_nonzero(idx >= nbins)),
    )


def bin_many(ray, values, n_rays: int, step: float, edges):
    """Per-ray histograms of flattened samples.

    Returns ``(mass, underflow, overflow)`` with ``mass`` of shape
    ``(n_rays, nbins)``.
    """
    edges = check_edges(edges)
    nbins = len(edges) - 1
    idx = bin_index(values, edges)
    inside = (idx >= 0) & (idx < nbins)
    flat = np.bincount(ray[inside] * nbins + idx[inside], minlength=n_rays * nbins)
    under = np.bincount(ray[idx < 0], minlength=n_rays)
    over = np.bincount(ray[idx >= nbins], minlength=n_rays)
    return step * flat.reshape(n_rays, nbins).astype(float), step * under, step * over


def pushforward_linear(values, ds: float, edges) -> Histogram:
    """Exact pushforward of the piecewise-linear interpolant of ``values``.

    ``values`` are samples at uniform parameter spacing ``ds``; segment ``i``
    spreads its length ``ds`` evenly over ``[v_i, v_{i+1}]``.
    """
    edges = check_edges(edges)
    v = np.asarray(values, dtype=float)
    lo = np.minimum(v[:-1], v[1:])
    hi = np.maximum(v[:-1], v[1:])
    width = hi - lo
    flat = width <= 1e-14 * np.maximum(1.0, np.abs(hi))
    cdf = np.zeros(len(edges))
    chunk = max(1, 2_000_000 // len(edges))
    for start in range(0, len(lo), chunk):
        sl = slice(start, start + chunk)
        e = edges[None, :]
        w = np.where(flat[sl], 1.0, width[sl])[:, None]
        frac = np.clip((e - lo[sl, None]) / w, 0.0, 1.0)
        # degenerate segments act as atoms, placed like bin_samples places them
        frac = np.where(flat[sl, None], (e > lo[sl, None]).astype(float), frac)
        cdf += frac.sum(axis=0)
    cdf *= ds
    mass = np.diff(cdf)
    # atoms sitting exactly on the closing edge belong to the last bin
    last = flat & (lo == edges[-1])
    mass[-1] += ds * np.count_nonzero(last)
    total = ds * len(lo)
    under = float(cdf[0])
    over = total - float(cdf[-1]) - ds * np.count_nonzero(last)
    return Histogram(edges, np.clip(mass, 0.0, None), underflow=under, overflow=max(over, 0.0))


def cumulative(h: Histogram) -> CumulativeHistogram:
    values = np.concatenate([[0.0], np.cumsum(h.mass)])
    return CumulativeHistogram(h.edges, values)


def moment(h: Histogram, k: int) -> float:
    """k-th moment by the midpoint rule."""
    if int(k) != k or k < 0:
        raise ValueError(f"moment order must be a non-negative integer, got {k}")
    return float(np.sum(h.midpoints ** int(k) * h.mass))


def moments(mass: np.ndarray, edges, k: int) -> np.ndarray:
    """Midpoint-rule k-th moment along the last axis of a mass array."""
    if int(k) != k or k < 0:
        raise ValueError(f"moment order must be a non-negative integer, got {k}")
    mid = 0.5 * (np.asarray(edges[1:]) + np.asarray(edges[:-1]))
    return mass @ (mid ** int(k))


def _scan_roots(g, a: float, b: float, n: int = SCAN_POINTS) -> list[float]:
    x = np.linspace(a, b, n)
    gx = np.asarray(g(x), dtype=float)
    roots = list(x[gx == 0])
    sign_change = np.nonzero(gx[:-1] * gx[1:] < 0)[0]
    for i in sign_change:
        roots.append(optimize.bisect(g, x[i], x[i + 1], xtol=ROOT_XTOL))
    return sorted(roots)


def critical_points(fprime, interval) -> list[float]:
    a, b = interval
    return _scan_roots(fprime, a, b)


def analytic_distribution(f, fprime, interval, y: float) -> float:
    """Density ``sum over f(x) = y`` of ``1 / |f'(x)|``.

    Preimages come from a sign-change scan followed by bisection. Raises
    :class:`SingularInputError` when ``y`` is a critical value.
    """
    a, b = interval
    for xc in critical_points(fprime, interval):
        if abs(f(xc) - y) <= SINGULAR_TOL:
            raise SingularInputError(f"y={y} is the critical value f({xc:.12g})")
    preimages = _scan_roots(lambda x: f(x) - y, a, b)
    total = 0.0
    for x in preimages:
        slope = abs(fprime(x))
        if slope == 0:
            raise SingularInputError(f"f'(x)=0 at preimage x={x}")
        total += 1.0 / slope
    return total


def critical_values(h: Histogram, threshold: float = 5.0) -> list[float]:
    """Values where the binned density spikes.

    A bin qualifies when it is a local maximum and its mass exceeds
    ``threshold`` times the median bin mass. Runs of adjacent qualifying
    bins collapse onto their heaviest bin.
    """
    m = h.mass
    padded = np.concatenate([[0.0], m, [0.0]])
    local_max = (m >= padded[:-2]) & (m >= padded[2:]) & (m > 0)
    hits = np.nonzero(local_max & (m > threshold * np.median(m)))[0]
    out = []
    run = []
    for i in hits:
        if run and i != run[-1] + 1:
            out.append(run[int(np.argmax(m[run]))])
            run = []
        run.append(i)
    if run:
        out.append(run[int(np.argmax(m[run]))])
    return [float(h.midpoints[i]) for i in out]


def write_histogram_csv(h: Histogram, path) -> None:
    """``bin_left,bin_right,mass``, one row per bin, 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "mass"])
        for lo, hi, m in zip(h.edges[:-1], h.edges[1:], h.mass):
            w.writerow([f"{lo:.17g}", f"{hi:.17g}", f"{m:.17g}"])


def read_histogram_csv(path) -> Histogram:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Histogram(np.append(data[:, 0], data[-1, 1]), data[:, 2])
