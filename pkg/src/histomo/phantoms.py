"""Test objects shared by the CLI and the test suite."""

from __future__ import annotations

import numpy as np

from .core import ScalarGrid, SymTensorField, grid_from_function


def _box2(n, half=1.0):
    return [-half, -half], [half, half], [n, n]


def gaussian(n: int = 128, width: float = 0.15, half: float = 1.0) -> ScalarGrid:
    return grid_from_function(*_box2(n, half), lambda x, y: np.exp(-(x * x + y * y) / width))


def two_gaussians(n: int = 128, half: float = 1.0) -> ScalarGrid:
    """Peaks of height 1 at (0.4, 0) and 0.6 at (-0.4, 0.2)."""

    def fn(x, y):
        a = np.exp(-((x - 0.4) ** 2 + y * y) / 0.05)
        b = 0.6 * np.exp(-((x + 0.4) ** 2 + (y - 0.2) ** 2) / 0.05)
        return a + b

    return grid_from_function(*_box2(n, half), fn)


TWO_GAUSSIAN_CENTRES = ((0.4, 0.0), (-0.4, 0.2))


def radial_bump(n: int = 128, radius: float = 0.8, half: float = 1.0) -> ScalarGrid:
    """``(1 - r^2 / R^2)^2`` inside ``R``: smooth, radial, single max 1 at the origin."""

    def fn(x, y):
        return np.clip(1 - (x * x + y * y) / radius**2, 0, None) ** 2

    return grid_from_function(*_box2(n, half), fn)


def disk(n: int = 128, radius: float = 0.6, half: float = 1.0) -> ScalarGrid:
    return grid_from_function(*_box2(n, half), lambda x, y: (x * x + y * y <= radius**2).astype(float))


def plane(n: int = 128, half: float = 1.0) -> ScalarGrid:
    return grid_from_function(*_box2(n, half), lambda x, y: 0.5 * x + 1.0)


def two_level(n: int = 128, half: float = 1.0) -> ScalarGrid:
    """1 outside, 3 on the square ``|x|, |y| < 0.4``."""

    def fn(x, y):
        return np.where((np.abs(x) < 0.4) & (np.abs(y) < 0.4), 3.0, 1.0)

    return grid_from_function(*_box2(n, half), fn)


PHANTOMS_2D = {
    "gaussian": gaussian,
    "two-gaussians": two_gaussians,
    "radial": radial_bump,
    "disk": disk,
    "plane": plane,
    "two-level": two_level,
}


def windowed_gaussian(n: int, half: float = 3.0, radius: float = 3.0, power: int = 3):
    """``u = exp(-r^2/2) (1 - r^2/R^2)^p`` on ``[-half, half]^3`` and its exact gradient.

    The polynomial window keeps ``u`` compactly supported with ``p - 1``
    continuous derivatives at ``r = R``.
    """

    def u_fn(x, y, z):
        r2 = x * x + y * y + z * z
        return np.exp(-r2 / 2) * np.clip(1 - r2 / radius**2, 0, None) ** power

    u = grid_from_function([-half] * 3, [half] * 3, [n] * 3, u_fn)
    X = u.coords()
    r2 = sum(c * c for c in X)
    w = np.clip(1 - r2 / radius**2, 0, None)
    # d u / d(r^2)
    dudr2 = np.exp(-r2 / 2) * (-0.5 * w**power - power * w ** (power - 1) / radius**2)
    du = SymTensorField(1, u.origin, u.spacing, {(i,): 2 * X[i] * dudr2 for i in range(3)})
    return u, du


def three_root_cubic(x):
    return (x - 1) * (x - 3) * (x - 6) + 20


def three_root_cubic_prime(x):
    return 3 * x * x - 20 * x + 27


def random_compact_field(rng, n: int, rank: int, half: float = 2.0, radius: float = 2.0, power: int = 4):
    """Random smooth symmetric field supported in the ball of ``radius``.

    Each component is a random quadratic polynomial times the window
    ``(1 - r^2/R^2)^power``.
    """
    g = grid_from_function([-half] * 3, [half] * 3, [n] * 3, lambda x, y, z: np.zeros_like(x))
    X = g.coords()
    r2 = sum(c * c for c in X)
    window = np.clip(1 - r2 / radius**2, 0, None) ** power
    monomials = [np.ones_like(r2)] + list(X) + [X[i] * X[j] for i in range(3) for j in range(i, 3)]
    fields = {}
    for k in SymTensorField.zeros(rank, g).data:
        coef = rng.normal(size=len(monomials))
        fields[k] = window * sum(c * m for c, m in zip(coef, monomials))
    return SymTensorField(rank, g.origin, g.spacing, fields)
