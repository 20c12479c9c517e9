"""Diffraction patterns of a transverse strain curve.

A curve of 2x2 positive definite matrices ``A(s)`` describes the lattice
ellipses ``y^T A y = 1`` met along a beam. In the direction ``theta`` an
ellipse reaches radius ``r`` with ``q = r^-2 = n_theta . (a11, sqrt2 a12, a22)``,
``n_theta = (cos^2, sqrt2 sin cos, sin^2)``. One pattern slice is the
distribution of that projection over ``s``, so patterns are binned in ``q``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import HistomoError, ScalarGrid, SingularInputError
from .distribution import Histogram, check_edges, pushforward_linear

SQRT2 = np.sqrt(2.0)
CONE_TOL = 1e-9
ANGLE_TOL = 1e-9


class NotPositiveDefiniteError(HistomoError, ValueError):
    def __init__(self, s):
        super().__init__(f"matrix is not positive definite at s = {s:.6g}")
        self.s = s


def direction_vector(theta) -> np.ndarray:
    """``n_theta`` in the scaled coordinates ``(a11, sqrt2 a12, a22)``."""
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([c * c, SQRT2 * s * c, s * s], axis=-1)


@dataclass(frozen=True, eq=False)
class TransverseCurve:
    """Samples of ``A(s)`` at uniform ``s``.

    A closed curve is periodic: the segment from the last sample back to
    the first is part of it, and its length is ``n * ds`` instead of
    ``(n - 1) * ds``.
    """

    s: np.ndarray
    a11: np.ndarray
    a12: np.ndarray
    a22: np.ndarray
    closed: bool = False

    def __post_init__(self):
        arrs = [np.asarray(getattr(self, k), dtype=float) for k in ("s", "a11", "a12", "a22")]
        if len({a.shape for a in arrs}) != 1 or arrs[0].ndim != 1 or len(arrs[0]) < 2:
            raise ValueError("curve needs matching 1D arrays with at least two samples")
        ds = np.diff(arrs[0])
        if np.any(ds <= 0) or not np.allclose(ds, ds[0], rtol=1e-9, atol=0):
            raise ValueError("s samples must be uniform and increasing")
        s, a11, a12, a22 = arrs
        bad = (a11 <= 0) | (a11 * a22 - a12 * a12 <= 0)
        if np.any(bad):
            raise NotPositiveDefiniteError(float(s[np.argmax(bad)]))
        for k, a in zip(("s", "a11", "a12", "a22"), arrs):
            object.__setattr__(self, k, a)

    @property
    def ds(self) -> float:
        return float(self.s[1] - self.s[0])

    @property
    def length(self) -> float:
        n = len(self.s)
        return self.ds * (n if self.closed else n - 1)

    @property
    def uvw(self) -> np.ndarray:
        """``(u, v, w) = (a11 + a22, a11 - a22, 2 a12)`` per sample."""
        return np.stack([self.a11 + self.a22, self.a11 - self.a22, 2 * self.a12], axis=-1)

    def scaled(self) -> np.ndarray:
        return np.stack([self.a11, SQRT2 * self.a12, self.a22], axis=-1)

    def projection(self, theta: float) -> np.ndarray:
        """``q(s)`` in direction ``theta``; the first sample is repeated when closed."""
        q = self.scaled() @ direction_vector(theta)
        return np.append(q, q[0]) if self.closed else q

    def restrict(self, s_lo: float, s_hi: float) -> "TransverseCurve | None":
        keep = (self.s >= s_lo - 1e-12) & (self.s <= s_hi + 1e-12)
        if np.count_nonzero(keep) < 2:
            return None
        return TransverseCurve(self.s[keep], self.a11[keep], self.a12[keep], self.a22[keep])


@dataclass(frozen=True, eq=False)
class DiffractionPattern:
    thetas: np.ndarray
    q_edges: np.ndarray
    mass: np.ndarray
    underflow: np.ndarray
    overflow: np.ndarray

    def slice(self, i: int) -> Histogram:
        return Histogram(self.q_edges, self.mass[i], float(self.underflow[i]), float(self.overflow[i]))

    def totals(self) -> np.ndarray:
        return self.mass.sum(axis=1) + self.underflow + self.overflow

    def r_view(self) -> tuple[np.ndarray, np.ndarray]:
        """``(r_edges ascending, mass[theta, r bin])`` for display; needs ``q > 0``."""
        if self.q_edges[0] <= 0:
            raise ValueError("r view needs positive q edges")
        return self.q_edges[::-1] ** -0.5, self.mass[:, ::-1]


def pattern_from_curve(c: TransverseCurve, thetas, q_edges) -> DiffractionPattern:
    """Exact per-angle pushforward of the piecewise-linear curve projection."""
    q_edges = check_edges(q_edges)
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    mass = np.zeros((len(thetas), len(q_edges) - 1))
    under = np.zeros(len(thetas))
    over = np.zeros(len(thetas))
    for i, th in enumerate(thetas):
        h = pushforward_linear(c.projection(th), c.ds, q_edges)
        mass[i], under[i], over[i] = h.mass, h.underflow, h.overflow
    return DiffractionPattern(thetas, q_edges, mass, under, over)


def a1_curve(n: int) -> TransverseCurve:
    """``A(s) = (1 + cos^2 s, sin s cos s; sin s cos s, 1 + sin^2 s)`` on ``[0, pi)``.

    ``(u, v, w) = (3, cos 2s, sin 2s)``: one turn round a circle in the
    ``u = 3`` plane. The curve is closed.
    """
    if n < 8:
        raise ValueError("need at least 8 samples")
    s = np.pi * np.arange(n) / n
    c, sn = np.cos(s), np.sin(s)
    return TransverseCurve(s, 1 + c * c, sn * c, 1 + sn * sn, closed=True)


def g1_stated_endpoints() -> tuple[float, float]:
    """The two support endpoints exactly as stated for the closed form."""
    r0 = 2 / np.sqrt(2 + 3 * SQRT2)
    r1 = 2 / np.sqrt(4 + 3 * SQRT2)
    return float(r0), float(r1)


def g1_support() -> tuple[float, float]:
    """Where ``|2 sqrt2 r^-2 - 3| <= 1``, i.e. ``[2^-1/4, 2^1/4]``."""
    return 2.0**-0.25, 2.0**0.25


def g1_analytic(r, tol: float = 1e-12):
    """Closed-form radial density ``sqrt2 / sqrt(1 - (2 sqrt2 r^-2 - 3)^2)``.

    The indicator uses :func:`g1_support`; outside it the value is 0.
    """
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("r must be positive")
    arg = 2 * SQRT2 / r**2 - 3
    if np.any(np.abs(np.abs(arg) - 1) <= tol):
        raise SingularInputError("g1 is singular at its support endpoints")
    inside = np.abs(arg) < 1
    safe = np.where(inside, 1 - arg**2, 1.0)
    out = np.where(inside, (1 / SQRT2) * 2 / np.sqrt(safe), 0.0)
    return float(out) if out.ndim == 0 else out


def build_equivalent_uniaxial(reference: Histogram, n: int = 4096, length: float = np.pi) -> TransverseCurve:
    """Isotropic curve ``A(s) = (u(s) / 2) I`` with the same pattern as ``reference``.

    Every direction projects ``(u/2) I`` to ``u/2``, so all slices equal the
    distribution of ``u/2``. Choosing ``u/2`` as the inverse of the
    normalised cumulative of ``reference`` over ``s / length`` reproduces the
    reference slice at every angle.
    """
    mass = np.asarray(reference.mass, dtype=float)
    total = mass.sum()
    if not total > 0:
        raise ValueError("reference pattern has no mass")
    if n < 2:
        raise ValueError("need at least two samples")
    cdf = np.concatenate([[0.0], np.cumsum(mass)]) / total
    t = np.linspace(0.0, 1.0, n)
    # a strictly increasing cumulative keeps the inverse single valued;
    # a run of empty bins collapses onto the edge where mass starts again
    keep = np.concatenate([np.diff(cdf) > 0, [True]])
    q = np.interp(t, cdf[keep], reference.edges[keep])
    s = length * t
    return TransverseCurve(s, q, np.zeros(n), q.copy())


def marginal_from_pattern(dp: DiffractionPattern, which: str) -> Histogram:
    """Marginal law of ``a11`` (slice at 0) or ``a22`` (slice at pi/2)."""
    target = {"a11": 0.0, "a22": np.pi / 2}.get(which)
    if target is None:
        raise ValueError("which must be 'a11' or 'a22'")
    hit = np.flatnonzero(np.abs(dp.thetas - target) <= ANGLE_TOL)
    if len(hit) == 0:
        raise ValueError(f"pattern has no slice at theta = {target:.6g}")
    return dp.slice(int(hit[0]))


def cone_membership(alpha, tol: float = CONE_TOL) -> tuple[bool, float]:
    """Whether ``alpha`` is a positive multiple of some ``n_theta``.

    Tests ``alpha1, alpha3 >= 0`` and ``alpha2^2 = 2 alpha1 alpha3`` relative
    to ``|alpha|^2``. Returns the flag and the angle in ``[0, pi)`` that best
    matches (meaningful only for members).
    """
    a = np.asarray(alpha, dtype=float)
    if a.shape != (3,):
        raise ValueError("alpha must be a 3-vector")
    norm2 = float(a @ a)
    if norm2 == 0:
        raise ValueError("zero vector has no direction")
    scale = tol * norm2
    ok = a[0] >= -scale and a[2] >= -scale and abs(a[1] ** 2 - 2 * a[0] * a[2]) <= scale
    c = np.sqrt(max(a[0], 0.0))
    s = np.sqrt(max(a[2], 0.0))
    theta = float(np.arctan2(s, c if a[1] >= 0 else -c))
    if theta >= np.pi:
        theta -= np.pi
    return bool(ok), theta


def render_ellipse_superposition(c: TransverseCurve, dims=(256, 256), s_range=None,
                                 extent: float | None = None, n_phi: int = 720) -> ScalarGrid:
    """Image of the ellipses ``y^T A(s) y = 1`` laid on top of each other.

    Each ellipse carries angular density ``ds dphi`` and is splatted by
    nearest pixel. The image spans ``[-extent, extent]^2``.
    """
    dims = tuple(int(d) for d in dims)
    if extent is None:
        lam_min = 0.5 * (c.a11 + c.a22) - np.sqrt(0.25 * (c.a11 - c.a22) ** 2 + c.a12**2)
        extent = 1.1 / np.sqrt(lam_min.min())
    spacing = 2 * extent / (max(dims) - 1)
    origin = (-extent, -extent)
    img = np.zeros(dims)
    part = c if s_range is None else c.restrict(*s_range)
    if part is not None:
        phi = 2 * np.pi * np.arange(n_phi) / n_phi
        y = np.stack([np.cos(phi), np.sin(phi)])
        q = (part.a11[:, None] * y[0] ** 2 + 2 * part.a12[:, None] * y[0] * y[1]
             + part.a22[:, None] * y[1] ** 2)
        r = q**-0.5
        px = np.rint((r * y[0] + extent) / spacing).astype(int).ravel()
        py = np.rint((r * y[1] + extent) / spacing).astype(int).ravel()
        ok = (px >= 0) & (px < dims[0]) & (py >= 0) & (py < dims[1])
        weight = part.ds * 2 * np.pi / n_phi
        np.add.at(img, (px[ok], py[ok]), weight)
    return ScalarGrid(origin, spacing, img)


def write_pattern_csv(dp: DiffractionPattern, path) -> None:
    """``theta,q,mass`` with ``q`` the bin midpoint; empty bins are skipped."""
    mids = 0.5 * (dp.q_edges[1:] + dp.q_edges[:-1])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta", "q", "mass"])
        for i, th in enumerate(dp.thetas):
            for j in np.flatnonzero(dp.mass[i]):
                w.writerow([f"{th:.17g}", f"{mids[j]:.17g}", f"{dp.mass[i, j]:.17g}"])
