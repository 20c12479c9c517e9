import numpy as np
import pytest

from histomo.core import ScalarGrid, grid_from_function
from histomo.levelset import (
    LevelStack,
    NestingWarning,
    assemble,
    cumulative_sinograms,
    band_values,
    enforce_nesting,
    level_stack,
    locate_critical_points,
    read_stack,
    reconstruct_level,
    sublevel_sinogram,
    superlevel_sinogram,
    write_stack,
)
from histomo.phantoms import TWO_GAUSSIAN_CENTRES, disk, plane, radial_bump, two_gaussians, two_level
from histomo.radon import Sinogram, centered_edges, hist_radon, radon

THETAS = np.linspace(0, np.pi, 180, endpoint=False)


def offsets(g, n):
    r = np.sqrt(2) * max(abs(c) for c in g.origin + g.upper) + g.spacing
    return np.linspace(-r, r, n)


def test_disk_sublevel_is_box_minus_disk():
    g = disk(128, radius=0.6)
    hs = hist_radon(g, [0.0, 0.9], [0.0], [-0.5, 0.5, 1.5])
    s = sublevel_sinogram(hs, 0)
    box_chord = hs.total()[:, 0]
    assert box_chord[0] == pytest.approx(2.0, abs=g.spacing)
    assert np.allclose(s.values[:, 0], box_chord - 1.2, atol=2 * g.spacing)


def test_levels_beyond_the_range():
    g = disk(64, radius=0.6)
    hs = hist_radon(g, THETAS[::20], np.linspace(-1.2, 1.2, 11), [-2.0, -1.0, 0.5, 2.0])
    assert np.all(sublevel_sinogram(hs, 0).values == 0)
    assert np.allclose(sublevel_sinogram(hs, 2).values, hs.total())
    assert np.allclose(superlevel_sinogram(hs, 2).values, 0.0)
    for k in (-1, 3):
        with pytest.raises(IndexError):
            sublevel_sinogram(hs, k)


def test_top_level_equals_radon_of_ones():
    g = radial_bump(64)
    thetas, ps = THETAS[::12], np.linspace(-1.3, 1.3, 21)
    hs = hist_radon(g, thetas, ps, centered_edges(0.0, 1.0, 32))
    ones = radon(g.like(np.ones(g.dims)), thetas, ps)
    assert np.max(np.abs(sublevel_sinogram(hs, 31).values - ones.values)) <= 1e-10


def test_cumulative_is_monotone_exactly():
    g = two_gaussians(64)
    hs = hist_radon(g, THETAS[::9], np.linspace(-1.3, 1.3, 31), centered_edges(0.0, 1.0, 64))
    cum = cumulative_sinograms(hs)
    assert np.all(np.diff(cum, axis=-1) >= 0)
    for k in (0, 17, 63):
        assert np.array_equal(sublevel_sinogram(hs, k).values, cum[..., k])


def test_reconstruct_level_trivial_sinograms():
    g = disk(64)
    ps = offsets(g, 128)
    zero = reconstruct_level(Sinogram(THETAS, ps, np.zeros((180, 128))), g)
    assert not zero.values.any()
    # chord lengths of a disk covering the box
    big = grid_from_function([-1, -1], [1, 1], [64, 64], lambda x, y: np.ones_like(x))
    full = radon(disk(64, radius=1.5, half=1.5).like(np.ones((64, 64))), THETAS, ps)
    rec = reconstruct_level(full, big)
    x, y = big.coords()
    assert rec.values[x * x + y * y < 0.9].all()


def dice(a, b):
    return 2 * np.count_nonzero(a & b) / (np.count_nonzero(a) + np.count_nonzero(b))


def test_superlevel_disk_dice():
    g = radial_bump(128)
    hs = hist_radon(g, THETAS, offsets(g, 256), centered_edges(0.0, 1.0, 64))
    for k in (8, 31, 50):
        y = hs.edges[k + 1]
        rec = reconstruct_level(superlevel_sinogram(hs, k), g).values > 0.5
        assert dice(rec, g.values > y) >= 0.95


def test_nesting_cleanup_warns():
    masks = np.array([[True, False], [False, True]])
    with pytest.warns(NestingWarning):
        out = enforce_nesting(masks)
    assert out.tolist() == [[True, False], [True, True]]
    ok = np.array([[False, True], [True, True]])
    assert np.array_equal(enforce_nesting(ok), ok)


def test_two_level_layer_cake_is_exact():
    g = two_level(64)
    masks = (g.values <= 2.0)[None]
    rec = assemble(LevelStack([2.0], masks, g), 1.0, 3.0)
    assert np.array_equal(rec.values, g.values)


def test_constant_phantom_stays_constant():
    g = ScalarGrid((-1, -1), 2 / 63, np.full((64, 64), 0.7))
    stack = LevelStack([0.75, 0.8], np.ones((2, 64, 64), bool), g)
    assert np.all(assemble(stack, 0.7).values == 0.7)


def test_band_values():
    assert band_values([1.0, 2.0, 4.0], 0.0, 5.0).tolist() == [0.0, 1.5, 3.0, 5.0]


def test_two_level_from_projections():
    g = two_level(128)
    hs = hist_radon(g, THETAS, offsets(g, 256), [0.0, 2.0, 4.0])
    stack = level_stack(hs, [0], g)
    rec = assemble(stack, 1.0, 3.0)
    assert set(np.unique(rec.values)) <= {1.0, 3.0}
    assert np.mean(rec.values == g.values) >= 0.98


def test_radial_round_trip_linf():
    g = radial_bump(96)
    nb = 256
    hs = hist_radon(g, THETAS[::2], offsets(g, 192), centered_edges(0.0, 1.0, nb))
    idx = np.unique(np.round(np.linspace(0, nb - 1, 66)[1:-1]).astype(int))
    stack = level_stack(hs, idx, g)
    rec = assemble(stack, 0.0, 1.0)
    dy = np.max(np.diff(stack.levels))
    assert np.linalg.norm(rec.values - g.values) / np.linalg.norm(g.values) <= 0.10
    assert np.max(np.abs(rec.values - g.values)) <= dy + 0.05


def fine_histograms(g, nbins=128):
    ps = offsets(g, 128)
    return hist_radon(g, THETAS[::4], ps, centered_edges(0.0, float(g.values.max()), nbins), step=g.spacing / 4)


def test_critical_point_of_radial_phantom():
    g = radial_bump(64)
    found = locate_critical_points(fine_histograms(g), 1.0, g)
    assert found
    assert np.hypot(*found[0]) <= 2 * g.spacing


def test_plane_has_no_critical_point():
    g = plane(64)
    hs = hist_radon(g, THETAS[::4], offsets(g, 128), np.linspace(0.4, 1.6, 129), step=g.spacing / 4)
    assert locate_critical_points(hs, 1.0, g) == []


def test_two_gaussian_peaks():
    # the peaks are narrow; a coarser grid leaves too few samples per bin
    g = two_gaussians(128)
    hs = fine_histograms(g)
    for y_c, centre in zip((1.0, 0.6), TWO_GAUSSIAN_CENTRES):
        found = locate_critical_points(hs, y_c, g)
        assert found
        assert np.hypot(found[0][0] - centre[0], found[0][1] - centre[1]) <= 3 * g.spacing


def test_stack_round_trip(tmp_path):
    g = disk(16)
    masks = np.stack([g.values < 0.5, np.ones(g.dims, bool)])
    stack = LevelStack([0.5, 1.5], masks, g)
    write_stack(stack, tmp_path / "levels")
    back = read_stack(tmp_path / "levels")
    assert np.array_equal(back.levels, stack.levels)
    assert np.array_equal(back.masks, stack.masks)
    assert back.geometry.spacing == g.spacing
