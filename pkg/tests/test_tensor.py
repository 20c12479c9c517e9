import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from histomo.core import Ray3, ScalarGrid, SymTensorField, grid_from_function, sym_product
from histomo.phantoms import windowed_gaussian
from histomo.radon import radon
from histomo.tensor import (
    divergence,
    fibonacci_directions,
    hlrt,
    kroner_rank2,
    lrt,
    parallel_ray_set,
    random_rays,
    saint_venant_vec,
    sym_d,
    transverse_frame,
    trt,
)


def box3(n, half=1.0, fn=lambda x, y, z: np.zeros_like(x)):
    return grid_from_function([-half] * 3, [half] * 3, [n] * 3, fn)


def ball_field(n, value_fn, rank=2):
    g = box3(n, 1.2)
    x, y, z = g.coords()
    inside = (x * x + y * y + z * z <= 1.0).astype(float)
    return SymTensorField.from_function(rank, g, lambda k, *c: value_fn(k) * inside)


def test_gradient_of_linear_is_constant():
    du = sym_d(box3(9, fn=lambda x, y, z: x))
    assert np.allclose(du[0], 1.0)
    assert np.allclose(du[1], 0.0) and np.allclose(du[2], 0.0)


def test_symmetrized_derivative_of_shear():
    g = box3(9)
    x, y, _ = g.coords()
    u = SymTensorField(1, g.origin, g.spacing, {(0,): y, (1,): x, (2,): np.zeros_like(x)})
    du = sym_d(u)
    assert np.allclose(du[0, 1], 1.0)
    for k in ((0, 0), (1, 1), (2, 2), (0, 2), (1, 2)):
        assert np.allclose(du[k], 0.0)


def test_zero_and_rank_limits():
    g = box3(6)
    assert sym_d(g).max_abs() == 0
    with pytest.raises(ValueError):
        sym_d(SymTensorField.zeros(4, g))


@given(st.lists(st.floats(-2, 2), min_size=10, max_size=10))
def test_sym_d_exact_on_quadratics(c):
    # u = quadratic scalar; its symmetrized Hessian is the constant matrix of coefficients
    def u(x, y, z):
        return (c[0] + c[1] * x + c[2] * y + c[3] * z + c[4] * x * x + c[5] * y * y
                + c[6] * z * z + c[7] * x * y + c[8] * x * z + c[9] * y * z)

    g = box3(7, fn=u)
    hess = sym_d(sym_d(g))
    expect = {(0, 0): 2 * c[4], (1, 1): 2 * c[5], (2, 2): 2 * c[6], (0, 1): c[7], (0, 2): c[8], (1, 2): c[9]}
    for k, v in expect.items():
        assert np.max(np.abs(hess[k] - v)) <= 1e-10


def test_constant_tensor_along_axis():
    f = ball_field(49, lambda k: 1.0 if k == (0, 0) else 0.0)
    s = lrt(f, [Ray3((0, 0, 0), (1, 0, 0))])
    assert s.values[0] == pytest.approx(2.0, abs=2 * f.spacing)


def test_non_unit_direction_rejected():
    f = ball_field(9, lambda k: 0.0)
    with pytest.raises(ValueError):
        lrt(f, (np.zeros((1, 3)), np.array([[1.0, 1e-4, 0]])))


def test_potential_vector_field_is_invisible():
    n = 32
    g = box3(n, 3.0, lambda x, y, z: np.exp(-(x * x + y * y + z * z)))
    f = sym_d(g)
    base, xi = random_rays(np.random.default_rng(3), 200, 2.0)
    vals = lrt(f, (base, xi)).values
    assert np.max(np.abs(vals)) <= 5 * g.spacing * f.max_abs()


def test_rank2_potential_is_invisible():
    u, _ = windowed_gaussian(32, half=2.0, radius=2.0)
    x, y, z = u.coords()
    v = SymTensorField(1, u.origin, u.spacing, {(0,): u.values * y, (1,): u.values * z * x, (2,): u.values})
    f = sym_d(v)
    base, xi = random_rays(np.random.default_rng(4), 200, 1.5)
    vals = lrt(f, (base, xi)).values
    assert np.max(np.abs(vals)) <= 5 * u.spacing * f.max_abs()


def test_isotropic_tensor_transverse_transform():
    c = 1.7
    f = ball_field(49, lambda k: c if k[0] == k[1] else 0.0)
    xi = np.array([1.0, 2.0, 2.0]) / 3
    s = trt(f, (np.zeros((1, 3)), xi[None]))
    c11, c12, c22 = s.values[0]
    assert c11 == pytest.approx(2 * c, abs=4 * c * f.spacing)
    assert c22 == pytest.approx(2 * c, abs=4 * c * f.spacing)
    assert abs(c12) <= 1e-12


def test_zero_field_transverse_transform():
    f = SymTensorField.zeros(2, box3(8))
    assert np.all(trt(f, [Ray3((0, 0, 0), (0, 0, 1))]).values == 0)


def test_transverse_component_is_scalar_radon_of_slice():
    g = box3(41)
    x, y, z = g.coords()
    f = SymTensorField.from_function(
        2, g, lambda k, x, y, z: np.exp(-3 * ((x - 0.2) ** 2 + y * y + z * z)) * (1 + k[0] + 2 * k[1])
    )
    thetas = np.array([0.1, 0.9, 2.0])
    p = 0.25
    Th = np.stack([np.cos(thetas), np.sin(thetas), np.zeros(3)], axis=1)
    perp = np.stack([-np.sin(thetas), np.cos(thetas), np.zeros(3)], axis=1)
    s = trt(f, (p * Th, perp))
    slice33 = ScalarGrid(g.origin[:2], g.spacing, f[2, 2][:, :, 20])
    ref = radon(slice33, thetas, [p]).values[:, 0]
    # the frame's first vector is e3 for in-plane directions
    assert np.allclose(transverse_frame(perp)[0], [0, 0, 1])
    assert np.allclose(s.values[:, 0], ref, rtol=1e-9)


def test_transverse_eigenvalues_do_not_depend_on_frame():
    rng = np.random.default_rng(0)
    g = box3(17)
    f = SymTensorField(2, g.origin, g.spacing, {k: rng.normal(size=g.dims) for k in SymTensorField.zeros(2, g).data})
    base, xi = random_rays(rng, 20, 0.6)
    a = trt(f, (base, xi)).values
    b = trt(f, (base, -xi)).values
    # reversing the ray flips the second frame vector, i.e. rotates the frame
    assert np.allclose(a[:, 1], -b[:, 1], atol=1e-12)

    def eig(v):
        return np.linalg.eigvalsh(np.stack([np.stack([v[:, 0], v[:, 1]], -1), np.stack([v[:, 1], v[:, 2]], -1)], 1))

    assert np.max(np.abs(eig(a) - eig(b))) <= 1e-10


def test_transverse_frame_is_orthonormal():
    xi = fibonacci_directions(50, hemisphere=False)
    e1, e2 = transverse_frame(xi)
    for a, b in ((e1, e1), (e2, e2)):
        assert np.allclose(np.sum(a * b, -1), 1)
    for a, b in ((e1, e2), (e1, xi), (e2, xi)):
        assert np.allclose(np.sum(a * b, -1), 0, atol=1e-14)


def test_hlrt_constant_tensor_single_bin():
    f = ball_field(49, lambda k: 0.5 if k == (2, 2) else 0.0)
    hs = hlrt(f, [Ray3((0.1, 0, 0), (0, 0, 1))], [-0.25, 0.25, 0.75])
    chord = 2 * np.sqrt(1 - 0.01)
    assert hs.mass[0, 1] == pytest.approx(chord, abs=2 * f.spacing)


def test_hlrt_first_moment_matches_lrt():
    rng = np.random.default_rng(5)
    u, du = windowed_gaussian(24, half=2.0, radius=2.0)
    f = sym_product(du, du)
    base, xi = random_rays(rng, 60, 1.2)
    ref = lrt(f, (base, xi)).values
    edges = np.linspace(-1.05, 1.05, 513) * f.max_abs()
    hs = hlrt(f, (base, xi), edges)
    err = np.max(np.abs(hs.moment(1) - ref)) / np.max(np.abs(ref))
    assert err <= 0.01


def test_radial_field_and_its_negative_share_histograms():
    g = box3(33, 2.0)
    x, y, z = g.coords()
    w = np.clip(1 - (x * x + y * y + z * z) / 2.25, 0, None) ** 3
    f = SymTensorField(1, g.origin, g.spacing, {(0,): x * w, (1,): y * w, (2,): z * w})
    base, xi = parallel_ray_set(fibonacci_directions(6), 5, 1.0)
    half = np.linspace(0.0, 0.5, 11)
    edges = np.concatenate([-half[:0:-1], half])
    a = hlrt(f, (base, xi), edges, step=g.spacing / 8).mass
    b = hlrt(-1 * f, (base, xi), edges, step=g.spacing / 8).mass
    # zeros outside the support all land right of the middle edge, so skip the two central bins
    keep = np.r_[0:9, 11:20]
    assert np.allclose(b[:, keep], a[:, ::-1][:, keep], atol=1e-12)
    # and the histograms are close to symmetric themselves
    assert np.abs(a - b)[:, keep].sum() <= 0.05 * a[:, keep].sum()


def test_curl_of_rotation_and_gradient():
    g = box3(9)
    x, y, z = g.coords()
    rot = SymTensorField(1, g.origin, g.spacing, {(0,): -y, (1,): x, (2,): np.zeros_like(x)})
    c = saint_venant_vec(rot)
    assert np.allclose(c[2], 2.0) and np.allclose(c[0], 0) and np.allclose(c[1], 0)
    grad = sym_d(box3(21, fn=lambda x, y, z: np.sin(x) * np.cos(2 * y) * z))
    inner = (slice(1, -1),) * 3
    assert max(np.max(np.abs(saint_venant_vec(grad)[i][inner])) for i in range(3)) <= 1e-12
    assert saint_venant_vec(SymTensorField.zeros(1, g)).max_abs() == 0


def test_kroner_of_identity_hessian():
    g = box3(11)
    x = g.coords()
    du = SymTensorField(1, g.origin, g.spacing, {(i,): x[i] for i in range(3)})
    K = kroner_rank2(sym_product(du, du))
    for k in ((0, 0), (1, 1), (2, 2)):
        assert np.allclose(K[k], 2.0, atol=1e-8)
    for k in ((0, 1), (0, 2), (1, 2)):
        assert np.allclose(K[k], 0.0, atol=1e-8)
    assert kroner_rank2(SymTensorField.zeros(2, g)).max_abs() == 0
    with pytest.raises(ValueError):
        kroner_rank2(du)


def test_kroner_annihilates_potentials_as_h_shrinks():
    errs = []
    for n in (17, 33):
        u, _ = windowed_gaussian(n, half=2.0, radius=2.0)
        x, y, z = u.coords()
        v = SymTensorField(1, u.origin, u.spacing, {(0,): u.values * y, (1,): u.values, (2,): u.values * x})
        K = kroner_rank2(sym_d(v))
        inner = (slice(4, -4),) * 3
        errs.append(max(np.max(np.abs(K[k][inner])) for k in K.data))
    assert errs[1] < 0.5 * errs[0]


def test_divergence_of_gradient_is_laplacian():
    g = box3(21, fn=lambda x, y, z: x * x + 2 * y * y - z * z)
    lap = divergence(sym_d(g))
    assert np.allclose(lap.data[()], 2.0 + 4.0 - 2.0, atol=1e-9)


def test_lrt_csv(tmp_path):
    f = ball_field(9, lambda k: 1.0)
    s = lrt(f, [Ray3((0, 0, 0), (0, 1, 0)), Ray3((0.1, 0, 0), (0, 0, 1))])
    s.write_csv(tmp_path / "l.csv")
    rows = (tmp_path / "l.csv").read_text().splitlines()
    assert rows[0] == "x1,x2,x3,xi1,xi2,xi3,c11,c12,c22"
    assert len(rows) == 3
