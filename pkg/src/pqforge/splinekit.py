"""Cubic B-spline curves, tensor-product surfaces, fitting, and FFD lattices.

All surfaces in the package share one layout: a 30x30 net of cubic control
points over clamped uniform knots on [0,1]^2.  Curves are clamped uniform
cubics of variable size.  The evaluator below computes basis functions and
their derivatives with the standard triangular recurrence, vectorized over
query points.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import DomainError, InputError, ParseError, SingularSurfaceError

DEGREE = 3
NET_SIZE = 30
_DEGEN_TOL = 1e-12


def clamped_knots(n_ctrl, degree=DEGREE):
    """Clamped uniform knot vector on [0,1] for n_ctrl control points."""
    if n_ctrl < degree + 1:
        raise InputError(f"need at least {degree + 1} control points, got {n_ctrl}")
    n_spans = n_ctrl - degree
    interior = np.arange(1, n_spans) / n_spans
    return np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])


def find_span(knots, degree, x):
    n = len(knots) - degree - 1
    s = np.searchsorted(knots, x, side="right") - 1
    return np.clip(s, degree, n - 1)


def basis_ders(knots, degree, x, nders):
    """Nonzero basis functions and derivatives at each x.

    Returns (span, ders) with span shape (m,) and ders shape
    (m, nders+1, degree+1); ders[:, k, r] is the k-th derivative of basis
    function span-degree+r.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    m = x.size
    p = degree
    span = find_span(knots, p, x)

    ndu = np.zeros((m, p + 1, p + 1))
    ndu[:, 0, 0] = 1.0
    left = np.zeros((m, p + 1))
    right = np.zeros((m, p + 1))
    for j in range(1, p + 1):
        left[:, j] = x - knots[span + 1 - j]
        right[:, j] = knots[span + j] - x
        saved = np.zeros(m)
        for r in range(j):
            ndu[:, j, r] = right[:, r + 1] + left[:, j - r]
            temp = ndu[:, r, j - 1] / ndu[:, j, r]
            ndu[:, r, j] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        ndu[:, j, j] = saved

    ders = np.zeros((m, nders + 1, p + 1))
    ders[:, 0, :] = ndu[:, :, p]
    if nders > 0:
        a = np.zeros((m, 2, p + 1))
        for r in range(p + 1):
            s1, s2 = 0, 1
            a[:] = 0.0
            a[:, 0, 0] = 1.0
            for k in range(1, nders + 1):
                d = np.zeros(m)
                rk = r - k
                pk = p - k
                if r >= k:
                    a[:, s2, 0] = a[:, s1, 0] / ndu[:, pk + 1, rk]
                    d = a[:, s2, 0] * ndu[:, rk, pk]
                j1 = 1 if rk >= -1 else -rk
                j2 = k - 1 if r - 1 <= pk else p - r
                for j in range(j1, j2 + 1):
                    a[:, s2, j] = (a[:, s1, j] - a[:, s1, j - 1]) / ndu[:, pk + 1, rk + j]
                    d = d + a[:, s2, j] * ndu[:, rk + j, pk]
                if r <= pk:
                    a[:, s2, k] = -a[:, s1, k - 1] / ndu[:, pk + 1, r]
                    d = d + a[:, s2, k] * ndu[:, r, pk]
                ders[:, k, r] = d
                s1, s2 = s2, s1
        fac = float(p)
        for k in range(1, nders + 1):
            ders[:, k, :] *= fac
            fac *= p - k
    return span, ders


def design_matrix(knots, degree, x, der=0):
    """Sparse (len(x), n_ctrl) matrix of basis values (or derivatives)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n_ctrl = len(knots) - degree - 1
    span, ders = basis_ders(knots, degree, x, der)
    cols = (span[:, None] - degree + np.arange(degree + 1)[None, :]).ravel()
    rows = np.repeat(np.arange(x.size), degree + 1)
    return sparse.csr_matrix(
        (ders[:, der, :].ravel(), (rows, cols)), shape=(x.size, n_ctrl)
    )


@dataclass
class BSplineCurve:
    """Clamped uniform cubic curve in 2D or 3D."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[0] < DEGREE + 1:
            raise InputError("curve needs at least 4 control points")
        if self.points.shape[1] not in (2, 3):
            raise InputError("curve control points must be 2D or 3D")
        if not np.all(np.isfinite(self.points)):
            raise InputError("curve control points must be finite")
        self.knots = clamped_knots(self.points.shape[0])

    @property
    def dim(self):
        return self.points.shape[1]

    def evaluate(self, t, der=0):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        tf = np.atleast_1d(t)
        if np.any((tf < 0.0) | (tf > 1.0)):
            raise DomainError("curve parameter outside [0, 1]")
        span, ders = basis_ders(self.knots, DEGREE, tf, der)
        idx = span[:, None] - DEGREE + np.arange(DEGREE + 1)[None, :]
        out = np.einsum("mr,mrd->md", ders[:, der, :], self.points[idx])
        return out[0] if scalar else out

    def arc_length(self, samples=256):
        pts = self.evaluate(np.linspace(0.0, 1.0, samples))
        return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


class ControlNet:
    """30x30 net of 3D control points over [0,1]^2."""

    def __init__(self, points):
        points = np.asarray(points, dtype=float)
        if points.shape != (NET_SIZE, NET_SIZE, 3):
            raise InputError(f"control net must be {NET_SIZE}x{NET_SIZE}x3, got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise InputError("control net points must be finite")
        self.points = points
        self.knots = clamped_knots(NET_SIZE)

    def copy(self):
        return ControlNet(self.points.copy())


@dataclass(frozen=True)
class SurfaceSamplePoint:
    u: float
    v: float
    position: np.ndarray
    normal: np.ndarray


def _check_domain(u, v):
    if np.any((u < 0.0) | (u > 1.0) | (v < 0.0) | (v > 1.0)):
        raise DomainError("surface parameter outside [0, 1]^2")


def surface_ders(net, u, v, nders=2):
    """Partial derivatives D[:, a, b] = d^(a+b) S / du^a dv^b, shape (m, n, n, 3)."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    _check_domain(u, v)
    span_u, Nu = basis_ders(net.knots, DEGREE, u, nders)
    span_v, Nv = basis_ders(net.knots, DEGREE, v, nders)
    iu = span_u[:, None] - DEGREE + np.arange(DEGREE + 1)[None, :]
    iv = span_v[:, None] - DEGREE + np.arange(DEGREE + 1)[None, :]
    P = net.points[iu[:, :, None], iv[:, None, :], :]
    return np.einsum("mai,mbj,mijc->mabc", Nu, Nv, P)


def eval_surface_many(net, u, v, with_normals=True):
    """Positions (and unit normals) at arrays of parameters."""
    if not with_normals:
        D = surface_ders(net, u, v, nders=0)
        return D[:, 0, 0, :]
    D = surface_ders(net, u, v, nders=1)
    pos = D[:, 0, 0, :]
    cr = np.cross(D[:, 1, 0, :], D[:, 0, 1, :])
    nrm = np.linalg.norm(cr, axis=1)
    bad = nrm < 1e-14
    nrm = np.where(bad, 1.0, nrm)
    normals = cr / nrm[:, None]
    normals[bad] = np.nan
    return pos, normals


def eval_surface(net, u, v):
    """Evaluate one surface point with its unit normal."""
    _check_domain(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
    D = surface_ders(net, [u], [v], nders=1)
    su, sv = D[0, 1, 0], D[0, 0, 1]
    cr = np.cross(su, sv)
    n = np.linalg.norm(cr)
    if n < 1e-14:
        raise SingularSurfaceError(f"degenerate tangent plane at ({u}, {v})")
    return SurfaceSamplePoint(float(u), float(v), D[0, 0, 0], cr / n)


def fundamental_forms(net, u, v):
    """First/second fundamental form coefficients (E, F, G, L, M, N) arrays."""
    D = surface_ders(net, u, v, nders=2)
    su, sv = D[:, 1, 0], D[:, 0, 1]
    suu, suv, svv = D[:, 2, 0], D[:, 1, 1], D[:, 0, 2]
    E = np.einsum("md,md->m", su, su)
    F = np.einsum("md,md->m", su, sv)
    G = np.einsum("md,md->m", sv, sv)
    cr = np.cross(su, sv)
    nrm = np.linalg.norm(cr, axis=1)
    safe = np.where(nrm < 1e-14, 1.0, nrm)
    nvec = cr / safe[:, None]
    L = np.einsum("md,md->m", suu, nvec)
    M = np.einsum("md,md->m", suv, nvec)
    N = np.einsum("md,md->m", svv, nvec)
    return E, F, G, L, M, N


def gaussian_curvature(net, u, v):
    """Gaussian curvature K = (LN - M^2) / (EG - F^2)."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    E, F, G, L, M, N = fundamental_forms(net, u, v)
    denom = E * G - F * F
    if np.any(denom < _DEGEN_TOL):
        raise SingularSurfaceError("EG - F^2 below tolerance; tangent plane degenerate")
    K = (L * N - M * M) / denom
    return float(K[0]) if K.size == 1 and np.isscalar(u[0]) and u.size == 1 else K


def conjugacy_residual(net, u, v, d1, d2):
    """Second fundamental form II(d1, d2) for tangent directions.

    Directions are coefficient pairs in the (S_u, S_v) tangent basis; the
    residual vanishes exactly when the two directions are conjugate.
    """
    d1 = np.asarray(d1, dtype=float)
    d2 = np.asarray(d2, dtype=float)
    if np.allclose(d1, 0.0) or np.allclose(d2, 0.0):
        raise InputError("conjugacy directions must be nonzero")
    E, F, G, L, M, N = fundamental_forms(net, [u], [v])
    return float(
        L[0] * d1[0] * d2[0] + M[0] * (d1[0] * d2[1] + d1[1] * d2[0]) + N[0] * d1[1] * d2[1]
    )


def principal_directions(net, u, v):
    """Principal curvatures and directions at one parameter point.

    Returns (k1, k2, p1, p2); directions are parameter-basis coefficient
    pairs normalized to unit length in 3D.  k1 <= k2.
    """
    E, F, G, L, M, N = fundamental_forms(net, [u], [v])
    I = np.array([[E[0], F[0]], [F[0], G[0]]])
    II = np.array([[L[0], M[0]], [M[0], N[0]]])
    denom = I[0, 0] * I[1, 1] - I[0, 1] * I[1, 0]
    if denom < _DEGEN_TOL:
        raise SingularSurfaceError("tangent plane degenerate")
    S = np.linalg.solve(I, II)
    w, vecs = np.linalg.eig(S)
    order = np.argsort(w.real)
    dirs = []
    for k in order:
        x = vecs[:, k].real
        scale = np.sqrt(x @ I @ x)
        dirs.append(x / scale)
    return float(w.real[order[0]]), float(w.real[order[1]]), dirs[0], dirs[1]


# ---------------------------------------------------------------------------
# fairness

_FAIR_CACHE = {}


def fairness_matrix(n=NET_SIZE):
    """Sparse stencil matrix F with ||F z||^2 = net fairness for scalar z.

    Rows cover both row- and column-direction second-difference stencils
    centered at interior grid nodes (indices 1..n-2 in both axes).
    """
    if n in _FAIR_CACHE:
        return _FAIR_CACHE[n]
    rows, cols, vals = [], [], []
    r = 0
    interior = range(1, n - 1)

    def nid(i, j):
        return i * n + j

    for i in interior:
        for j in interior:
            rows += [r, r, r]
            cols += [nid(i, j), nid(i - 1, j), nid(i + 1, j)]
            vals += [1.0, -0.5, -0.5]
            r += 1
            rows += [r, r, r]
            cols += [nid(i, j), nid(i, j - 1), nid(i, j + 1)]
            vals += [1.0, -0.5, -0.5]
            r += 1
    F = sparse.csr_matrix((vals, (rows, cols)), shape=(r, n * n))
    _FAIR_CACHE[n] = F
    return F


def control_net_fairness(net):
    """Sum of squared row/column Laplacians over interior control points."""
    P = net.points.reshape(NET_SIZE * NET_SIZE, 3)
    F = fairness_matrix()
    R = F @ P
    return float(np.sum(R * R))


# ---------------------------------------------------------------------------
# curve fitting


def chord_length_params(samples):
    d = np.linalg.norm(np.diff(samples, axis=0), axis=1)
    total = d.sum()
    if total <= 0.0:
        raise InputError("degenerate polyline: zero total length")
    t = np.concatenate([[0.0], np.cumsum(d)]) / total
    return t


def fit_curve(samples, n_ctrl):
    """Least-squares cubic fit with chord-length parameters.

    Endpoint control points are pinned to the first and last samples so the
    curve interpolates them exactly.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[1] not in (2, 3):
        raise InputError("samples must be an (m, 2) or (m, 3) array")
    if n_ctrl < DEGREE + 1:
        raise InputError("need at least 4 control points")
    if samples.shape[0] < n_ctrl:
        raise InputError(
            f"underdetermined fit: {samples.shape[0]} samples for {n_ctrl} control points"
        )
    t = chord_length_params(samples)
    knots = clamped_knots(n_ctrl)
    A = design_matrix(knots, DEGREE, t).toarray()
    b = samples - np.outer(A[:, 0], samples[0]) - np.outer(A[:, -1], samples[-1])
    mid, *_ = np.linalg.lstsq(A[:, 1:-1], b, rcond=None)
    ctrl = np.vstack([samples[0], mid, samples[-1]])
    return BSplineCurve(ctrl)


# ---------------------------------------------------------------------------
# surface fitting


def _foot_point_newton(net, targets, params, steps=10):
    """Refine parameter guesses toward closest surface points.

    Every accepted update is at least as close as the incoming guess, so
    objective bookkeeping in the caller stays monotone.
    """
    params = params.copy()
    pos = eval_surface_many(net, params[:, 0], params[:, 1], with_normals=False)
    best_d2 = np.sum((pos - targets) ** 2, axis=1)
    for _ in range(steps):
        D = surface_ders(net, params[:, 0], params[:, 1], nders=2)
        r = D[:, 0, 0] - targets
        su, sv = D[:, 1, 0], D[:, 0, 1]
        g1 = np.einsum("md,md->m", r, su)
        g2 = np.einsum("md,md->m", r, sv)
        h11 = np.einsum("md,md->m", su, su) + np.einsum("md,md->m", r, D[:, 2, 0])
        h12 = np.einsum("md,md->m", su, sv) + np.einsum("md,md->m", r, D[:, 1, 1])
        h22 = np.einsum("md,md->m", sv, sv) + np.einsum("md,md->m", r, D[:, 0, 2])
        det = h11 * h22 - h12 * h12
        det = np.where(np.abs(det) < 1e-14, 1e-14, det)
        du = -(h22 * g1 - h12 * g2) / det
        dv = -(-h12 * g1 + h11 * g2) / det
        cand = np.clip(params + np.stack([du, dv], axis=1), 0.0, 1.0)
        cpos = eval_surface_many(net, cand[:, 0], cand[:, 1], with_normals=False)
        cd2 = np.sum((cpos - targets) ** 2, axis=1)
        better = cd2 < best_d2
        params[better] = cand[better]
        best_d2[better] = cd2[better]
        if not np.any(better):
            break
    return params, best_d2


def foot_points(net, targets, prev_params=None, grid=64, steps=10):
    """Closest-point parameters on the surface for each 3D target."""
    targets = np.asarray(targets, dtype=float)
    gs = np.linspace(0.0, 1.0, grid)
    gu, gv = np.meshgrid(gs, gs, indexing="ij")
    gpts = eval_surface_many(net, gu.ravel(), gv.ravel(), with_normals=False)
    tree = cKDTree(gpts)
    _, idx = tree.query(targets, workers=-1)
    params = np.stack([gu.ravel()[idx], gv.ravel()[idx]], axis=1)
    if prev_params is not None:
        gpos = eval_surface_many(net, params[:, 0], params[:, 1], with_normals=False)
        gd2 = np.sum((gpos - targets) ** 2, axis=1)
        ppos = eval_surface_many(net, prev_params[:, 0], prev_params[:, 1], with_normals=False)
        pd2 = np.sum((ppos - targets) ** 2, axis=1)
        use_prev = pd2 < gd2
        params[use_prev] = prev_params[use_prev]
    return _foot_point_newton(net, targets, params, steps=steps)


def _linear_surface_fit(targets, params, fairness_weight, n=NET_SIZE):
    """Solve the control net minimizing mean squared residual + fairness."""
    m = targets.shape[0]
    knots = clamped_knots(n)
    Au = design_matrix(knots, DEGREE, params[:, 0])
    Av = design_matrix(knots, DEGREE, params[:, 1])
    rows = []
    cols = []
    vals = []
    au = Au.tocoo()
    # tensor-product rows: for each sample the 16 nonzero net weights
    su, du = basis_ders(knots, DEGREE, params[:, 0], 0)
    sv, dv = basis_ders(knots, DEGREE, params[:, 1], 0)
    iu = su[:, None] - DEGREE + np.arange(DEGREE + 1)[None, :]
    iv = sv[:, None] - DEGREE + np.arange(DEGREE + 1)[None, :]
    w = du[:, 0, :, None] * dv[:, 0, None, :]
    colg = (iu[:, :, None] * n + iv[:, None, :]).reshape(m, -1)
    rowg = np.repeat(np.arange(m), (DEGREE + 1) ** 2)
    A = sparse.csr_matrix(
        (w.reshape(m, -1).ravel(), (rowg, colg.ravel())), shape=(m, n * n)
    )
    F = fairness_matrix(n)
    lhs = (A.T @ A) / m + fairness_weight * (F.T @ F)
    lhs = lhs + 1e-12 * sparse.identity(n * n)
    rhs = A.T @ targets / m
    sol = sparse.linalg.spsolve(lhs.tocsc(), rhs)
    return ControlNet(sol.reshape(n, n, 3)), A


def fit_objective(net, targets, params, fairness_weight):
    pos = eval_surface_many(net, params[:, 0], params[:, 1], with_normals=False)
    mse = float(np.mean(np.sum((pos - targets) ** 2, axis=1)))
    return mse + fairness_weight * control_net_fairness(net)


def fit_surface_to_points(targets, init, fairness_weight, max_iter=20, tol=1e-6,
                          params0=None, trace=None):
    """Iterative closest-point surface fit.

    Alternates foot-point projection with a linear least-squares solve for
    the control points; stops when the relative objective decrease drops
    below tol.  Objective values are appended to ``trace`` when given.
    """
    targets = np.asarray(targets, dtype=float)
    if targets.ndim != 2 or targets.shape[1] != 3:
        raise InputError("targets must be an (m, 3) array")
    if targets.shape[0] < 100:
        raise InputError("too few target points for a stable surface fit")
    net = init.copy()
    if params0 is None:
        params, _ = foot_points(net, targets)
    else:
        params = np.asarray(params0, dtype=float).copy()
    obj = fit_objective(net, targets, params, fairness_weight)
    if trace is not None:
        trace.append(obj)
    for _ in range(max_iter):
        net, _ = _linear_surface_fit(targets, params, fairness_weight)
        params, _ = foot_points(net, targets, prev_params=params)
        new_obj = fit_objective(net, targets, params, fairness_weight)
        if trace is not None:
            trace.append(new_obj)
        if obj - new_obj < tol * max(abs(obj), 1e-12):
            obj = new_obj
            break
        obj = new_obj
    return net, params


# ---------------------------------------------------------------------------
# free-form deformation

FFD_SIZE = 16
FFD_BOUNDS = (-5.0, 5.0)


class FFDLattice:
    """Tricubic displacement lattice over the fixed generation box."""

    def __init__(self, displacements=None):
        if displacements is None:
            displacements = np.zeros((FFD_SIZE, FFD_SIZE, FFD_SIZE, 3))
        displacements = np.asarray(displacements, dtype=float)
        if displacements.shape != (FFD_SIZE, FFD_SIZE, FFD_SIZE, 3):
            raise InputError("FFD lattice must be 16x16x16x3")
        if not np.all(np.isfinite(displacements)):
            raise InputError("FFD displacements must be finite")
        self.displacements = displacements
        self.knots = clamped_knots(FFD_SIZE)

    def copy(self):
        return FFDLattice(self.displacements.copy())


def ffd_apply(lattice, points):
    """Displace points through the lattice; identity when displacements are 0."""
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    lo, hi = FFD_BOUNDS
    if np.any((pts < lo) | (pts > hi)):
        raise DomainError("point outside FFD lattice bounds")
    local = (pts - lo) / (hi - lo)
    spans = []
    weights = []
    for axis in range(3):
        s, d = basis_ders(lattice.knots, DEGREE, local[:, axis], 0)
        spans.append(s[:, None] - DEGREE + np.arange(DEGREE + 1)[None, :])
        weights.append(d[:, 0, :])
    block = lattice.displacements[
        spans[0][:, :, None, None], spans[1][:, None, :, None], spans[2][:, None, None, :]
    ]
    disp = np.einsum("mi,mj,mk,mijkc->mc", weights[0], weights[1], weights[2], block)
    out = pts + disp
    return out[0] if single else out


# ---------------------------------------------------------------------------
# serialization


def net_to_dict(net):
    return {
        "degree": DEGREE,
        "nu": NET_SIZE,
        "nv": NET_SIZE,
        "points": [[float(c) for c in p] for p in net.points.reshape(-1, 3)],
    }


def net_from_dict(d):
    try:
        if int(d["degree"]) != DEGREE:
            raise ParseError(f"unsupported degree {d['degree']}", "degree")
        nu, nv = int(d["nu"]), int(d["nv"])
        pts = np.asarray(d["points"], dtype=float)
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"bad control net payload: {e}") from e
    if pts.shape != (nu * nv, 3):
        raise ParseError(f"expected {nu * nv} points, got {pts.shape}", "points")
    if nu != NET_SIZE or nv != NET_SIZE:
        raise ParseError(f"unsupported net size {nu}x{nv}")
    return ControlNet(pts.reshape(nu, nv, 3))


def save_net(net, path):
    with open(path, "w") as f:
        json.dump(net_to_dict(net), f, separators=(",", ":"))
        f.write("\n")


def load_net(path):
    try:
        with open(path) as f:
            d = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", f"{path}:{e.lineno}:{e.colno}") from e
    return net_from_dict(d)


def tessellate(net, res=100):
    """Triangulated sampling of the surface: (V, F) with 2(res-1)^2 faces."""
    s = np.linspace(0.0, 1.0, res)
    uu, vv = np.meshgrid(s, s, indexing="ij")
    V = eval_surface_many(net, uu.ravel(), vv.ravel(), with_normals=False)
    idx = np.arange(res * res).reshape(res, res)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    F = np.concatenate([np.stack([a, b, c], axis=1), np.stack([a, c, d], axis=1)])
    return V, F


def export_obj(path, vertices, faces):
    """Write vertices and (tri or quad) faces as a Wavefront OBJ file."""
    lines = []
    for v in np.asarray(vertices, dtype=float):
        lines.append("v " + " ".join(f"{c:.9g}" for c in v))
    for f in faces:
        lines.append("f " + " ".join(str(int(i) + 1) for i in f))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def import_obj(path):
    """Read an OBJ written by export_obj; returns (vertices, faces)."""
    verts, faces = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ParseError("vertex needs 3 coordinates", f"{path}:{ln}")
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                try:
                    faces.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
                except ValueError as e:
                    raise ParseError(f"bad face: {e}", f"{path}:{ln}") from e
    return np.asarray(verts, dtype=float), faces


def surface_obj(net, path, res=100):
    V, F = tessellate(net, res)
    export_obj(path, V, F)
