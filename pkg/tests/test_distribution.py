import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, optimize

from histomo.core import SingularInputError
from histomo.distribution import (
    Histogram,
    analytic_distribution,
    bin_samples,
    critical_values,
    cumulative,
    moment,
    pushforward_linear,
    read_histogram_csv,
    write_histogram_csv,
)
from histomo.phantoms import three_root_cubic, three_root_cubic_prime


def midpoint_samples(a, b, n):
    step = (b - a) / n
    return a + step * (np.arange(n) + 0.5), step


def test_constant_is_an_atom():
    x, step = midpoint_samples(0, 2.5, 1000)
    h = bin_samples(np.full_like(x, 0.73), step, np.linspace(0, 1, 11))
    assert h.mass[7] == pytest.approx(2.5)
    assert h.mass.sum() == pytest.approx(2.5)


def test_identity_is_uniform():
    x, step = midpoint_samples(0, 1, 10_000)
    h = bin_samples(x, step, np.linspace(0, 1, 11))
    np.testing.assert_allclose(h.mass, 0.1, atol=1e-12)


def test_square_density_near_quarter():
    x, step = midpoint_samples(-1, 1, 1_000_000)
    edges = np.linspace(0.24, 0.26, 3)
    h = bin_samples(x * x, step, edges)
    assert h.density.mean() == pytest.approx(2.0, rel=1e-2)


def test_empty_edges_rejected():
    with pytest.raises(ValueError):
        bin_samples([1.0], 0.1, [])


def test_out_of_range_goes_to_counters():
    h = bin_samples([-1.0, 0.5, 2.0, 3.0], 0.5, [0, 1])
    assert (h.underflow, h.mass[0], h.overflow) == (0.5, 0.5, 1.0)


def test_analytic_examples():
    assert analytic_distribution(lambda x: 2 * x, lambda x: 2 + 0 * x, (0, 1), 1.0) == pytest.approx(0.5)
    assert analytic_distribution(lambda x: x * x, lambda x: 2 * x, (-1, 1), 0.25) == pytest.approx(2.0)


def test_cubic_at_twenty():
    # preimages of 20 are the roots 1, 3, 6 of the cubic part
    expected = sum(1 / abs(three_root_cubic_prime(x)) for x in (1.0, 3.0, 6.0))
    got = analytic_distribution(three_root_cubic, three_root_cubic_prime, (0, 7), 20.0)
    assert got == pytest.approx(expected, rel=1e-9)
    x, step = midpoint_samples(0, 7, 2_000_000)
    h = bin_samples(three_root_cubic(x), step, [19.95, 20.05])
    assert h.density[0] == pytest.approx(expected, rel=0.01)


def test_singular_value_rejected():
    xc = optimize.brentq(three_root_cubic_prime, 1, 3)
    with pytest.raises(SingularInputError):
        analytic_distribution(three_root_cubic, three_root_cubic_prime, (0, 7), three_root_cubic(xc))


def test_analytic_matches_binning_for_cubic():
    x, step = midpoint_samples(0, 7, 2_000_000)
    edges = np.linspace(-25, 30, 221)
    h = bin_samples(three_root_cubic(x), step, edges)
    crit = [24.0618, 11.7902]
    for y, d in zip(h.midpoints, h.density):
        if min(abs(y - c) for c in crit) < 1.0 or y < 3 or y > 29:
            continue
        assert d == pytest.approx(analytic_distribution(three_root_cubic, three_root_cubic_prime, (0, 7), y), rel=0.05)


def test_cumulative_examples():
    h = Histogram([0, 1, 2, 3], [1, 2, 3])
    np.testing.assert_array_equal(cumulative(h).values, [0, 1, 3, 6])
    np.testing.assert_array_equal(cumulative(Histogram([0, 1, 2], [0, 0])).values, [0, 0, 0])
    np.testing.assert_array_equal(cumulative(Histogram([0, 1], [2.5])).values, [0, 2.5])


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=50))
def test_cumulative_inverts(masses):
    h = Histogram(np.arange(len(masses) + 1.0), masses)
    back = cumulative(h).differences().mass
    np.testing.assert_allclose(back, h.mass, rtol=1e-12, atol=1e-12 * max(1.0, sum(masses)))


def test_moment_examples():
    x, step = midpoint_samples(0, 1, 100_000)
    edges = np.linspace(0, 1, 1001)
    h = bin_samples(x, step, edges)
    assert moment(h, 1) == pytest.approx(0.5, abs=1e-3)
    assert moment(h, 2) == pytest.approx(1 / 3, abs=1e-3)
    c = bin_samples(np.full(100, 0.55), 0.02, np.linspace(0, 1, 11))
    for k in range(4):
        assert moment(c, k) == pytest.approx(0.55**k * 2.0, rel=0.2)
    with pytest.raises(ValueError):
        moment(h, -1)


def test_moment_error_shrinks_at_least_linearly():
    f = lambda x: np.sin(3 * x) + 1.5
    exact = {k: integrate.quad(lambda x: f(x) ** k, 0, 2)[0] for k in (1, 2, 3)}

    def err(n, nb):
        x, step = midpoint_samples(0, 2, n)
        # bins not aligned with anything in particular
        h = bin_samples(f(x), step, np.linspace(0.45, 2.55, nb + 1))
        return {k: abs(moment(h, k) - exact[k]) for k in exact}

    # midpoint moments are second order in the bin width, so halving both the
    # step and the bins shrinks the error by about 4; require at least 2 - 30%
    e1, e2 = err(20_000, 200), err(40_000, 400)
    for k in exact:
        ratio = e1[k] / e2[k]
        assert 2 * 0.7 <= ratio, (k, ratio)


@given(st.integers(10, 2000), st.floats(0.001, 0.1))
def test_mass_conservation(n, step):
    x = np.linspace(0, 1, n)
    h = bin_samples(x, step, np.linspace(0, 1, 17))
    assert h.underflow == 0 and h.overflow == 0
    assert h.total == pytest.approx(step * n, rel=1e-12)


def test_cubic_critical_values():
    x, step = midpoint_samples(0, 7, 700_000)
    h = bin_samples(three_root_cubic(x), step, np.linspace(-28, 32, 301))
    vals = critical_values(h, threshold=5)
    assert len(vals) == 2
    assert min(abs(v - 24.06) for v in vals) < 0.2
    assert min(abs(v - 11.79) for v in vals) < 0.2


def test_monotone_has_no_critical_values():
    x, step = midpoint_samples(0, 1, 10_000)
    assert critical_values(bin_samples(x, step, np.linspace(0, 1, 51))) == []


def test_constant_has_one_critical_value():
    h = bin_samples(np.full(1000, 0.33), 0.001, np.linspace(0, 1, 51))
    vals = critical_values(h)
    assert len(vals) == 1 and abs(vals[0] - 0.33) < 0.02


def test_edge_value_goes_up():
    h = bin_samples([1.0], 1.0, [0, 1, 2])
    assert h.mass.tolist() == [0.0, 1.0]


def test_pushforward_linear_is_conservative():
    v = np.sin(np.linspace(0, 6, 500))
    h = pushforward_linear(v, 0.01, np.linspace(-1.5, 1.5, 40))
    assert h.total + h.underflow + h.overflow == pytest.approx(0.01 * 499, rel=1e-12)


def test_histogram_csv(tmp_path):
    h = Histogram([0.0, 0.1, 0.25], [1 / 3, 2.0])
    write_histogram_csv(h, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "bin_left,bin_right,mass"
    back = read_histogram_csv(tmp_path / "h.csv")
    assert np.array_equal(back.mass, h.mass) and np.array_equal(back.edges, h.edges)
