"""Recovery of a potential velocity field ``du`` from second-moment HLRT data.

Pipeline: second moments of the per-ray histograms are LRT data of
``du (.) du``; a regularized least-squares fit gives a rank-2 field whose
Kroner tensor ``K = 2 Adj(d^2 u)`` is then inverted pointwise for the
Hessian up to sign; the trace feeds a Dirichlet Poisson solve.
"""

from __future__ import annotations

import heapq
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import linalg as splinalg

from .core import HistomoError, ScalarGrid, SymTensorField, multiplicity, ray_samples, sym_indices
from .tensor import RayHistograms, kroner_rank2

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = 1.0
DEFAULT_TAU = 1e-8
SUPPORT_FRACTION = 1e-2
MAX_DEGENERATE_FRACTION = 0.2
RELIABLE = 0.2


class DegenerateKronerError(HistomoError):
    """Too much of the support has ``det K`` below tolerance."""

    def __init__(self, message, mask=None):
        super().__init__(message)
        self.mask = mask


class PoissonConvergenceError(HistomoError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class UnderdeterminedWarning(UserWarning):
    pass


# --- pointwise 3x3 algebra ------------------------------------------------------


def adjugate3(a: np.ndarray) -> np.ndarray:
    """Adjugate (transposed cofactor matrix) of ``(..., 3, 3)`` arrays."""
    a = np.asarray(a, dtype=float)
    adj = np.empty_like(a)
    for m in range(3):
        for n in range(3):
            # cofactor C_nm, transposed into position (m, n)
            r = [i for i in range(3) if i != n]
            c = [j for j in range(3) if j != m]
            minor = (
                a[..., r[0], c[0]] * a[..., r[1], c[1]]
                - a[..., r[0], c[1]] * a[..., r[1], c[0]]
            )
            adj[..., m, n] = (-1) ** (m + n) * minor
    return adj


def det3(a: np.ndarray) -> np.ndarray:
    return np.linalg.det(a)


def hessian_from_kroner(K: np.ndarray, tau_det: float = 0.0):
    """Both sign candidates of ``H`` with ``K = 2 Adj H``.

    Uses ``H = Adj(K) / sqrt(2 det K)``, the same as
    ``sqrt(det K / 2) K^{-1}`` without forming the inverse. Returns
    ``(H, -H, degenerate)``; degenerate points (``|det K| <= tau_det``) hold
    zeros. A noisy ``K`` can have slightly negative determinant although
    ``det(2 Adj H) = 8 det(H)^2``; the magnitude is used there.
    """
    K = np.asarray(K, dtype=float)
    det = np.abs(det3(K))
    degenerate = det <= tau_det
    safe = np.where(degenerate, 1.0, det)
    H = adjugate3(K) / np.sqrt(2.0 * safe)[..., None, None]
    H[degenerate] = 0.0
    return H, -H, degenerate


def field_to_matrices(f: SymTensorField) -> np.ndarray:
    """Rank-2 3D field to a ``dims + (3, 3)`` array."""
    out = np.empty(f.dims + (3, 3))
    for i in range(3):
        for j in range(3):
            out[..., i, j] = f[(i, j)]
    return out


def matrices_to_field(m: np.ndarray, geometry: ScalarGrid) -> SymTensorField:
    data = {(i, j): 0.5 * (m[..., i, j] + m[..., j, i]) for i, j in sym_indices(2, 3)}
    return SymTensorField(2, geometry.origin, geometry.spacing, data)


# --- Poisson ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PoissonProblem:
    """``laplacian(u) = rhs`` with ``u`` fixed on the outer layer of the grid.

    ``boundary`` is a grid-shaped array whose boundary entries are the
    Dirichlet values; ``None`` means zero. ``domain`` optionally restricts
    the unknowns further: nodes outside it are held at their boundary value
    too, e.g. zero outside a known object.
    """

    rhs: ScalarGrid
    boundary: np.ndarray | None = None
    domain: np.ndarray | None = None

    def __post_init__(self):
        if self.boundary is not None and np.shape(self.boundary) != self.rhs.dims:
            raise ValueError("boundary array must match the rhs grid shape")
        if self.domain is not None and np.shape(self.domain) != self.rhs.dims:
            raise ValueError("domain mask must match the rhs grid shape")
        if not np.all(np.isfinite(self.rhs.values)):
            raise ValueError("rhs must be finite")


def _laplacian_1d(n: int, h: float):
    main = -2.0 * np.ones(n)
    off = np.ones(n - 1)
    return sparse.diags([off, main, off], [-1, 0, 1], format="csr") / h**2


def laplacian_matrix(shape, h: float):
    """Negative-definite standard Laplacian on the interior nodes of ``shape``."""
    inner = [n - 2 for n in shape]
    eyes = [sparse.identity(n, format="csr") for n in inner]
    total = None
    for axis, n in enumerate(inner):
        factors = [eyes[a] if a != axis else _laplacian_1d(n, h) for a in range(len(inner))]
        term = factors[0]
        for fct in factors[1:]:
            term = sparse.kron(term, fct, format="csr")
        total = term if total is None else total + term
    return total.tocsr()


def poisson_solve(problem: PoissonProblem, rtol: float = 1e-10, maxiter: int = 20000) -> ScalarGrid:
    """Second-order Dirichlet Poisson solve by conjugate gradients."""
    rhs = problem.rhs
    shape, h = rhs.dims, rhs.spacing
    if any(n < 3 for n in shape):
        raise ValueError("Poisson solve needs at least 3 nodes per axis")
    u = np.zeros(shape) if problem.boundary is None else np.array(problem.boundary, dtype=float)
    interior = np.zeros(shape, dtype=bool)
    interior[tuple(slice(1, -1) for _ in shape)] = True
    if problem.domain is not None:
        interior &= np.asarray(problem.domain, dtype=bool)
    u[interior] = 0.0
    if not interior.any():
        return rhs.like(u)
    # move known values to the right-hand side
    lap_known = np.zeros(shape)
    for axis in range(len(shape)):
        lap_known += (np.roll(u, 1, axis) + np.roll(u, -1, axis)) / h**2
    keep = interior[tuple(slice(1, -1) for _ in shape)].ravel()
    A = -laplacian_matrix(shape, h)[keep][:, keep]
    rhs_vec = -(rhs.values[interior] - lap_known[interior])
    norm = np.linalg.norm(rhs_vec)
    if norm == 0:
        return rhs.like(u)
    x, info = splinalg.cg(A, rhs_vec, rtol=rtol, atol=0.0, maxiter=maxiter)
    residual = np.linalg.norm(A @ x - rhs_vec) / norm
    if info != 0 or residual > 10 * rtol:
        raise PoissonConvergenceError(
            f"CG stopped with relative residual {residual:.3e} (info={info})", residual
        )
    u[interior] = x
    return rhs.like(u)


# --- least-squares LRT fit -----------------------------------------------------------


def projection_matrix(geometry: ScalarGrid, base, xi, step: float | None = None):
    """Sparse ray-integration matrix with trilinear weights.

    Row ``i`` applied to a flattened grid gives the same quadrature as
    sampling ray ``i`` with :func:`histomo.core.ray_samples`.
    """
    step = step or geometry.spacing / 2
    rs = ray_samples(geometry, base, xi, step)
    dims = np.array(geometry.dims)
    idx = (rs.points - np.asarray(geometry.origin)) / geometry.spacing
    i0 = np.clip(np.floor(idx).astype(np.int64), 0, dims - 2)
    frac = idx - i0
    rows, cols, vals = [], [], []
    strides = np.array([dims[1] * dims[2], dims[2], 1])
    for corner in np.ndindex(2, 2, 2):
        c = np.array(corner)
        w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
        keep = w > 0
        rows.append(rs.ray[keep])
        cols.append(((i0[keep] + c) * strides).sum(axis=1))
        vals.append(step * w[keep])
    mat = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(base), int(np.prod(dims))),
    )
    return mat.tocsr()


def _group_directions(xi):
    uniq, inverse = np.unique(np.round(xi, 12), axis=0, return_inverse=True)
    return uniq, inverse.ravel()


def _gradient_operator(shape, h, split: bool = False):
    """Forward differences along each axis, stacked (or a list with ``split``)."""
    blocks = []
    for axis in range(len(shape)):
        n = shape[axis]
        d1 = sparse.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)) / h
        factors = [sparse.identity(m) if a != axis else d1 for a, m in enumerate(shape)]
        term = factors[0]
        for fct in factors[1:]:
            term = sparse.kron(term, fct)
        blocks.append(term.tocsr())
    if split:
        return blocks
    return sparse.vstack(blocks, format="csr")


@dataclass
class FitResult:
    field: SymTensorField
    iterations: int
    residual: float


def fit_rank2_from_lrt(
    values,
    base,
    xi,
    geometry: ScalarGrid,
    lam: float = DEFAULT_LAMBDA,
    step: float | None = None,
    iters: int = 400,
    min_directions: int = 60,
    domain: np.ndarray | None = None,
) -> FitResult:
    """Regularized least-squares rank-2 field matching LRT data.

    Minimises ``sum_rays (I g - data)^2 + lam * h^3 * sum_k w_k |grad g_k|^2``
    where ``w_k`` is the Frobenius multiplicity of component ``k``. The
    potential part of ``g`` is not determined by the data; only its Kroner
    tensor is meaningful. With a ``domain`` mask the field is held at zero
    outside it.
    """
    if not lam > 0:
        raise ValueError("regularization must be positive")
    values = np.asarray(values, dtype=float)
    base = np.atleast_2d(np.asarray(base, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    if geometry.ndim != 3:
        raise ValueError("fit needs a 3D geometry")
    dirs, which = _group_directions(xi)
    if len(dirs) < min_directions:
        warnings.warn(
            f"only {len(dirs)} ray directions (< {min_directions}); the fit is "
            "likely underdetermined beyond the potential null space",
            UnderdeterminedWarning,
            stacklevel=2,
        )
    cols = np.arange(int(np.prod(geometry.dims)))
    if domain is not None:
        cols = np.flatnonzero(np.asarray(domain, dtype=bool))
    N = len(cols)
    comps = sym_indices(2, 3)
    mult = np.array([multiplicity(k) for k in comps], dtype=float)
    # contraction weights per (direction, component)
    W = np.array([[mult[c] * d[i] * d[j] for c, (i, j) in enumerate(comps)] for d in dirs])
    order = np.argsort(which, kind="stable")
    groups = np.split(order, np.cumsum(np.bincount(which, minlength=len(dirs)))[:-1])
    mats = [projection_matrix(geometry, base[g], xi[g], step)[:, cols] for g in groups]
    G = _gradient_operator(geometry.dims, geometry.spacing)[:, cols]
    reg = np.sqrt(lam * geometry.spacing**3)
    reg_w = np.sqrt(mult)
    n_data = len(values)
    n_grad = G.shape[0]

    def matvec(x):
        X = x.reshape(6, N)
        C = W @ X
        out = np.empty(n_data + 6 * n_grad)
        for d, g in enumerate(groups):
            out[g] = mats[d] @ C[d]
        for c in range(6):
            out[n_data + c * n_grad: n_data + (c + 1) * n_grad] = reg * reg_w[c] * (G @ X[c])
        return out

    def rmatvec(y):
        B = np.empty((len(dirs), N))
        for d, g in enumerate(groups):
            B[d] = mats[d].T @ y[g]
        X = W.T @ B
        for c in range(6):
            X[c] += reg * reg_w[c] * (G.T @ y[n_data + c * n_grad: n_data + (c + 1) * n_grad])
        return X.ravel()

    op = splinalg.LinearOperator((n_data + 6 * n_grad, 6 * N), matvec=matvec, rmatvec=rmatvec)
    rhs = np.concatenate([values, np.zeros(6 * n_grad)])
    if not np.any(values):
        x, itn, r1 = np.zeros(6 * N), 0, 0.0
    else:
        x, istop, itn, r1 = splinalg.lsqr(op, rhs, atol=1e-10, btol=1e-10, iter_lim=iters)[:4]
    X = np.zeros((6, int(np.prod(geometry.dims))))
    X[:, cols] = x.reshape(6, N)
    X = X.reshape((6,) + geometry.dims)
    data = {k: X[c] for c, k in enumerate(comps)}
    field = SymTensorField(2, geometry.origin, geometry.spacing, data)
    rel = float(r1 / np.linalg.norm(values)) if np.any(values) else 0.0
    log.info("LRT fit: %d LSQR iterations, relative residual %.3e", itn, rel)
    return FitResult(field, int(itn), rel)


# --- sign field and the full pipeline ----------------------------------------------------


def second_moment_lrt(hs: RayHistograms) -> np.ndarray:
    """Per-ray second moment; the LRT of ``du (.) du`` for ``f = du``."""
    return hs.moment(2)


def sign_field(H: np.ndarray, mask: np.ndarray, seed=None, priority=None, core=None):
    """Per-point signs making ``sign * H`` vary continuously over ``mask``.

    Grows a tree from the seed in order of decreasing ``priority`` (default
    ``|H|``); each new point takes the sign that brings its matrix closest to
    its already-signed neighbour, so the trace inherits the continuity.
    With ``core`` given, trees are first grown inside ``core`` only and then
    extended to the rest of ``mask``. Returns ``(sign, labels)``: sign 0 and
    label -1 outside the mask, one label per tree. Heuristic: signs of
    separate trees are unrelated.
    """
    shape = mask.shape
    if priority is None:
        priority = np.sqrt(np.sum(H**2, axis=(-1, -2)))
    sign = np.zeros(shape, dtype=np.int8).ravel()
    labels = np.full(shape, -1, dtype=np.int64).ravel()
    if not mask.any():
        return sign.reshape(shape), labels.reshape(shape)
    pri = np.where(mask, priority, -np.inf).ravel()
    Hf = H.reshape(-1, 3, 3)
    strides = [int(np.prod(shape[a + 1:])) for a in range(len(shape))]

    def neighbours(i):
        c = np.unravel_index(i, shape)
        for axis in range(len(shape)):
            for step in (-1, 1):
                if 0 <= c[axis] + step < shape[axis]:
                    yield i + step * strides[axis]

    def grow(allowed, heap):
        while heap:
            _, j, parent = heapq.heappop(heap)
            if sign[j] != 0:
                continue
            ref = sign[parent] * Hf[parent]
            plus = np.sum((Hf[j] - ref) ** 2)
            minus = np.sum((Hf[j] + ref) ** 2)
            sign[j] = 1 if plus <= minus else -1
            labels[j] = labels[parent]
            for k in neighbours(j):
                if allowed[k] and sign[k] == 0:
                    heapq.heappush(heap, (-pri[k], k, j))

    phases = [mask.ravel()] if core is None else [(core & mask).ravel(), mask.ravel()]
    first = True
    for allowed in phases:
        if not first:
            # extend every tree into the newly allowed points
            heap = []
            for i in np.nonzero(sign)[0]:
                for k in neighbours(i):
                    if allowed[k] and sign[k] == 0:
                        heapq.heappush(heap, (-pri[k], k, i))
            grow(allowed, heap)
        cand = np.nonzero(allowed)[0]
        starts = sorted(cand.tolist(), key=lambda i: (-pri[i], i))
        if first and seed is not None:
            starts.insert(0, int(np.ravel_multi_index(seed, shape)))
        for start in starts:
            if sign[start] != 0:
                continue
            sign[start] = 1
            labels[start] = labels.max() + 1
            heap = [(-pri[k], k, start) for k in neighbours(start) if allowed[k] and sign[k] == 0]
            heapq.heapify(heap)
            grow(allowed, heap)
        first = False
    return sign.reshape(shape), labels.reshape(shape)


def hessian_operators(shape, h: float) -> dict:
    """Sparse second-difference operators, one per Hessian component."""
    n0, n1, n2 = shape

    def d1(n):
        return sparse.diags([-np.ones(n - 1), np.ones(n - 1)], [-1, 1], shape=(n, n)) / (2 * h)

    def d2(n):
        return sparse.diags(
            [np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1], shape=(n, n)
        ) / h**2

    def eye(n):
        return sparse.identity(n)

    def k3(a, b, c):
        return sparse.kron(sparse.kron(a, b), c, format="csr")

    return {
        (0, 0): k3(d2(n0), eye(n1), eye(n2)),
        (1, 1): k3(eye(n0), d2(n1), eye(n2)),
        (2, 2): k3(eye(n0), eye(n1), d2(n2)),
        (0, 1): k3(d1(n0), d1(n1), eye(n2)),
        (0, 2): k3(d1(n0), eye(n1), d1(n2)),
        (1, 2): k3(eye(n0), d1(n1), d1(n2)),
    }


SMOOTH_CELLS = 0.4


class HessianFit:
    """Potential whose Hessian best matches a given matrix field.

    Minimises ``sum weight * |d^2 u - H|_F^2 + ell^2 |grad d^2 u|^2`` over
    ``u`` vanishing outside ``domain`` (and on the grid boundary), with
    ``ell = smooth * h``. With unit weights and an exact Hessian field the
    normal equations reduce to the Dirichlet Poisson problem for its trace;
    the weights let unreliable points drop out instead of feeding noise to
    the Laplacian. The normal matrix is factorised once.
    """

    def __init__(self, geometry: ScalarGrid, domain, weight, smooth: float = SMOOTH_CELLS):
        self.geometry = geometry
        shape, h = geometry.dims, geometry.spacing
        domain = np.asarray(domain, dtype=bool).copy()
        for axis in range(3):
            idx = [slice(None)] * 3
            idx[axis] = 0
            domain[tuple(idx)] = False
            idx[axis] = -1
            domain[tuple(idx)] = False
        self.domain = domain
        self.cols = np.flatnonzero(domain)
        self.weight = np.asarray(weight, dtype=float).ravel()
        self.mu = (smooth * h) ** 2
        grads = [g for g in _gradient_operator(shape, h, split=True)]
        self.ops = {}
        self.smooth_ops = {}
        normal = None
        W = sparse.diags(self.weight)
        for k, op in hessian_operators(shape, h).items():
            A = op[:, self.cols]
            m2 = 1.0 if k[0] == k[1] else 2.0
            self.ops[k] = A
            self.smooth_ops[k] = [G @ A for G in grads]
            term = m2 * (A.T @ W @ A + self.mu * sum(B.T @ B for B in self.smooth_ops[k]))
            normal = term if normal is None else normal + term
        self.lu = splinalg.splu(normal.tocsc())

    def solve(self, H: np.ndarray) -> np.ndarray:
        rhs = np.zeros(len(self.cols))
        for k, A in self.ops.items():
            m2 = 1.0 if k[0] == k[1] else 2.0
            rhs += m2 * (A.T @ (self.weight * H[..., k[0], k[1]].ravel()))
        out = np.zeros(int(np.prod(self.geometry.dims)))
        out[self.cols] = self.lu.solve(rhs)
        return out.reshape(self.geometry.dims)

    def residual_vector(self, u: np.ndarray, H: np.ndarray) -> np.ndarray:
        x = u.ravel()[self.cols]
        sw = np.sqrt(self.weight)
        parts = []
        for k, A in self.ops.items():
            m = 1.0 if k[0] == k[1] else np.sqrt(2.0)
            parts.append(m * sw * (A @ x - H[..., k[0], k[1]].ravel()))
            parts.extend(m * np.sqrt(self.mu) * (B @ x) for B in self.smooth_ops[k])
        return np.concatenate(parts)


MAX_FREE_REGIONS = 12


def align_region_signs(H, sign, labels, solver: HessianFit):
    """Flip whole trees of the sign field so the result is one Hessian.

    Each tree ``c`` of signed matrices gives its own fit ``u_c``; signs
    ``s_c`` minimise the :class:`HessianFit` objective of ``sum_c s_c u_c``
    against ``sum_c s_c H_c``, by enumeration over the largest trees.
    Returns ``(sign, kept)``: points of smaller trees are dropped (``kept``
    is False there).
    """
    ids, sizes = np.unique(labels[labels >= 0], return_counts=True)
    free = ids[np.argsort(-sizes, kind="stable")][:MAX_FREE_REGIONS]
    kept = np.isin(labels, free)
    if len(free) <= 1:
        return sign, kept
    signed = sign[..., None, None] * H
    resid = []
    for c in free:
        Hc = np.where((labels == c)[..., None, None], signed, 0.0)
        resid.append(solver.residual_vector(solver.solve(Hc), Hc))
    R = np.array(resid)
    M = R @ R.T
    best, best_s = np.inf, None
    for bits in range(2 ** (len(free) - 1)):
        s = np.array([1.0] + [-1.0 if bits >> c & 1 else 1.0 for c in range(len(free) - 1)])
        val = s @ M @ s
        if val < best:
            best, best_s = val, s
    out = sign.copy()
    for c, s_c in zip(free, best_s):
        out[labels == c] *= int(s_c)
    return out, kept


@dataclass
class HessianEstimate:
    """Signed pointwise Hessian recovered from a Kroner tensor.

    ``valid`` marks points whose matrix is trusted; ``degenerate`` marks
    support points rejected for a near-singular ``K``.
    """

    H: np.ndarray
    valid: np.ndarray
    degenerate: np.ndarray
    support: np.ndarray


def kroner_to_hessian(
    K: SymTensorField,
    domain=None,
    tau_rel: float = DEFAULT_TAU,
    support_fraction: float = SUPPORT_FRACTION,
    max_degenerate: float = MAX_DEGENERATE_FRACTION,
    reliable: float = RELIABLE,
    smooth: float = SMOOTH_CELLS,
) -> HessianEstimate:
    """Invert ``K = 2 Adj H`` pointwise and fix the signs.

    The support is where ``|K|`` exceeds ``support_fraction`` of its maximum
    (inside ``domain`` when given). A support point is degenerate when
    ``|det K| <= tau_det`` or when ``sqrt(3) |det K|^(1/3) / |K|`` (1 for
    ``K ~ I``, 0 for singular ``K``) is below ``reliable``: near
    ``det d^2 u = 0`` the Kroner tensor loses the trace. Signs come from
    :func:`sign_field` followed by :func:`align_region_signs`.
    """
    Km = field_to_matrices(K)
    knorm = np.sqrt(np.sum(Km**2, axis=(-1, -2)))
    if domain is None:
        domain = np.ones(K.dims, dtype=bool)
    domain = np.asarray(domain, dtype=bool)
    kmax = knorm[domain].max() if domain.any() else 0.0
    if kmax == 0:
        z = np.zeros(K.dims, dtype=bool)
        return HessianEstimate(np.zeros(K.dims + (3, 3)), z, z, z)
    support = domain & (knorm >= support_fraction * kmax)
    scale = float(np.median(knorm[support]))
    H, _, singular = hessian_from_kroner(Km, tau_rel * scale**3)
    conditioning = np.sqrt(3.0) * np.cbrt(np.abs(det3(Km))) / np.where(knorm > 0, knorm, 1.0)
    degenerate = support & (singular | (conditioning < reliable))
    valid = support & ~degenerate
    frac = degenerate.sum() / max(1, support.sum())
    if frac > max_degenerate or not valid.any():
        raise DegenerateKronerError(
            f"det K degenerate on {frac:.1%} of the support", mask=degenerate
        )
    sign, labels = sign_field(H, valid, priority=conditioning)
    solver = HessianFit(K.geometry(), domain, valid.astype(float), smooth)
    sign, kept = align_region_signs(H, sign, labels, solver)
    valid &= kept
    H = np.where(valid[..., None, None], sign[..., None, None] * H, 0.0)
    return HessianEstimate(H, valid, degenerate, support)


def kroner_to_laplacian(K: SymTensorField, domain=None, **kwargs):
    """Sign-consistent Laplacian of ``u`` from its Kroner tensor.

    Returns ``(rhs, degenerate, support)``; rhs is 0 off the support and
    degenerate points take the value of their nearest valid neighbour.
    """
    est = kroner_to_hessian(K, domain, **kwargs)
    rhs = np.trace(est.H, axis1=-2, axis2=-1)
    fill = est.support & ~est.valid
    if fill.any() and est.valid.any():
        _, nearest = ndimage.distance_transform_edt(~est.valid, return_indices=True)
        rhs = np.where(fill, rhs[tuple(nearest)], rhs)
    return rhs, est.degenerate, est.support


def empty_rays(hs: RayHistograms) -> np.ndarray:
    """Rays whose second moment is at the binning floor of a zero field."""
    chord = hs.mass.sum(axis=1) + hs.underflow + hs.overflow
    width = np.max(np.diff(hs.edges))
    return second_moment_lrt(hs) <= chord * width**2


def carve_domain(geometry: ScalarGrid, base, xi, empty, step: float | None = None) -> np.ndarray:
    """Grid nodes not crossed by any empty ray.

    ``du . xi`` vanishes along an empty ray, which for a compactly supported
    potential field means the ray misses the object. Nodes nearest to its
    samples are removed, like carving a visual hull.
    """
    domain = np.ones(geometry.dims, dtype=bool)
    empty = np.asarray(empty, dtype=bool)
    if not empty.any():
        return domain
    rs = ray_samples(geometry, np.asarray(base)[empty], np.asarray(xi)[empty], step)
    idx = np.rint((rs.points - np.asarray(geometry.origin)) / geometry.spacing).astype(np.int64)
    idx = np.clip(idx, 0, np.array(geometry.dims) - 1)
    domain[tuple(idx.T)] = False
    return domain


@dataclass
class PotentialRecovery:
    """Result of :func:`recover_potential`.

    ``u_plus`` and ``u_minus`` are the two global-sign candidates.
    """

    u_plus: ScalarGrid
    u_minus: ScalarGrid
    kroner: SymTensorField
    hessian: HessianEstimate
    domain: np.ndarray
    fit: FitResult

    @property
    def degenerate(self) -> np.ndarray:
        return self.hessian.degenerate

    @property
    def support(self) -> np.ndarray:
        return self.hessian.support

    def candidates(self):
        return self.u_plus, self.u_minus

    def select(self, probe_index=None, probe_value=None) -> ScalarGrid:
        """Candidate agreeing in sign with a probe value, else ``u_plus``."""
        if probe_index is None or probe_value is None:
            return self.u_plus
        v = self.u_plus.values[tuple(probe_index)]
        return self.u_plus if v * probe_value >= 0 else self.u_minus


def recover_potential(
    hs: RayHistograms,
    geometry: ScalarGrid,
    lam: float = DEFAULT_LAMBDA,
    step: float | None = None,
    iters: int = 400,
    domain=None,
    method: str = "hessian",
    **hessian_kwargs,
) -> PotentialRecovery:
    """Recover ``u`` (up to global sign) from HLRT data of ``f = du``.

    ``u`` is held at zero on the grid boundary and outside ``domain``;
    by default the domain is carved from rays with empty histograms.
    ``method="poisson"`` solves the Poisson equation for the signed trace;
    ``"hessian"`` fits all six Hessian components (see :class:`HessianFit`).
    """
    if method not in ("hessian", "poisson"):
        raise ValueError(f"unknown method {method!r}")
    empty = empty_rays(hs)
    # an empty ray misses the object; what it carries is the binning floor
    data = np.where(empty, 0.0, second_moment_lrt(hs))
    if domain is None:
        domain = carve_domain(geometry, hs.base, hs.xi, empty, step)
    domain = np.asarray(domain, dtype=bool)
    fit = fit_rank2_from_lrt(
        data, hs.base, hs.xi, geometry, lam=lam, step=step, iters=iters, domain=domain
    )
    K = kroner_rank2(fit.field)
    est = kroner_to_hessian(K, domain, **hessian_kwargs)
    if method == "poisson":
        rhs, _, _ = kroner_to_laplacian(K, domain, **hessian_kwargs)
        u = poisson_solve(PoissonProblem(geometry.like(rhs), domain=domain)).values
    else:
        smooth = hessian_kwargs.get("smooth", SMOOTH_CELLS)
        u = HessianFit(geometry, domain, est.valid.astype(float), smooth).solve(est.H)
    u = geometry.like(u)
    return PotentialRecovery(u, u.like(-u.values), K, est, domain, fit)


def min_sign_error(u: ScalarGrid, reference: ScalarGrid) -> float:
    """Relative L2 error of ``u`` against ``reference`` minimised over sign."""
    ref = reference.values
    norm = np.linalg.norm(ref)
    e_plus = np.linalg.norm(u.values - ref)
    e_minus = np.linalg.norm(u.values + ref)
    return float(min(e_plus, e_minus) / norm) if norm else float(min(e_plus, e_minus))
