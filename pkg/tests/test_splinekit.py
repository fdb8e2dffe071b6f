from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pqforge import splinekit as sk
from pqforge.errors import DomainError, InputError, SingularSurfaceError


# --- independent oracles ----------------------------------------------------


def _naive_basis(knots, degree, i, x):
    """Textbook recursive basis function, closed on the last span."""
    if degree == 0:
        if knots[i] <= x < knots[i + 1]:
            return 1.0
        if x == knots[-1] and knots[i] < x <= knots[i + 1]:
            return 1.0
        return 0.0
    out = 0.0
    den = knots[i + degree] - knots[i]
    if den > 0.0:
        out += (x - knots[i]) / den * _naive_basis(knots, degree - 1, i, x)
    den = knots[i + degree + 1] - knots[i + 1]
    if den > 0.0:
        out += (knots[i + degree + 1] - x) / den * _naive_basis(knots, degree - 1, i + 1, x)
    return out


def _naive_surface_point(net, u, v):
    acc = np.zeros(3)
    for i in range(sk.NET_SIZE):
        bu = _naive_basis(net.knots, 3, i, u)
        if bu == 0.0:
            continue
        for j in range(sk.NET_SIZE):
            bv = _naive_basis(net.knots, 3, j, v)
            if bv:
                acc += bu * bv * net.points[i, j]
    return acc


def _random_net(seed, scale=1.0):
    rng = np.random.default_rng(seed)
    ii, jj = np.meshgrid(np.arange(30.0), np.arange(30.0), indexing="ij")
    base = np.stack([ii, jj, np.zeros((30, 30))], axis=-1)
    bumps = rng.normal(scale=scale, size=(4, 4, 3))
    # low-frequency displacement so the net stays regular
    gx = np.linspace(0, 3, 30)
    wob = np.zeros((30, 30, 3))
    for a in range(4):
        for b in range(4):
            wob += (
                np.outer(np.cos(gx * (a + 1)), np.cos(gx * (b + 1)))[:, :, None]
                * bumps[a, b][None, None, :]
            )
    return sk.ControlNet(base + wob)


def _fit_height_field(f, half=1.0, grid=50, fairness=1e-9):
    """Fit a net to z = f(x, y) over [-half, half]^2 with exact parameters."""
    xs = np.linspace(-half, half, grid)
    xx, yy = np.meshgrid(xs, xs, indexing="ij")
    targets = np.stack([xx.ravel(), yy.ravel(), f(xx.ravel(), yy.ravel())], axis=1)
    params = np.stack(
        [(xx.ravel() + half) / (2 * half), (yy.ravel() + half) / (2 * half)], axis=1
    )
    net, _ = sk._linear_surface_fit(targets, params, fairness)
    return net


# --- basis ------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
def test_basis_partition_of_unity(x):
    knots = sk.clamped_knots(30)
    _, ders = sk.basis_ders(knots, 3, np.array([x]), 0)
    assert abs(ders[0, 0, :].sum() - 1.0) <= 1e-12


def test_basis_matches_naive_recursion():
    knots = sk.clamped_knots(30)
    xs = np.array([0.0, 0.013, 0.37, 0.5, 0.81, 26 / 27, 0.999, 1.0])
    A = sk.design_matrix(knots, 3, xs).toarray()
    for r, x in enumerate(xs):
        naive = np.array([_naive_basis(knots, 3, i, x) for i in range(30)])
        assert np.allclose(A[r], naive, atol=1e-12)


def test_basis_first_derivative_matches_finite_difference():
    knots = sk.clamped_knots(30)
    xs = np.array([0.11, 0.37, 0.62, 0.93])
    h = 1e-6
    _, d = sk.basis_ders(knots, 3, xs, 1)
    up = sk.design_matrix(knots, 3, xs + h).toarray()
    dn = sk.design_matrix(knots, 3, xs - h).toarray()
    fd = (up - dn) / (2 * h)
    span, _ = sk.basis_ders(knots, 3, xs, 0)
    for r in range(len(xs)):
        cols = span[r] - 3 + np.arange(4)
        assert np.allclose(d[r, 1, :], fd[r, cols], atol=1e-4)


# --- surface evaluation -----------------------------------------------------


def test_eval_surface_matches_naive_sum():
    net = _random_net(7)
    for (u, v) in [(0.0, 0.0), (0.37, 0.81), (0.5, 0.5), (1.0, 1.0), (0.02, 0.97)]:
        sp = sk.eval_surface(net, u, v)
        assert np.allclose(sp.position, _naive_surface_point(net, u, v), atol=1e-10)


def test_eval_surface_corner_interpolates_control_point():
    net = _random_net(3)
    assert np.allclose(sk.eval_surface(net, 0.0, 0.0).position, net.points[0, 0], atol=1e-12)
    assert np.allclose(sk.eval_surface(net, 1.0, 1.0).position, net.points[-1, -1], atol=1e-12)


def test_eval_surface_rejects_out_of_domain():
    net = _random_net(1)
    with pytest.raises(DomainError):
        sk.eval_surface(net, 1.2, 0.5)
    with pytest.raises(DomainError):
        sk.eval_surface(net, 0.5, -0.01)


@settings(max_examples=20, deadline=None)
@given(
    st.floats(min_value=0.0, max_value=1.0),
    st.floats(min_value=0.0, max_value=1.0),
    st.integers(min_value=0, max_value=10_000),
)
def test_eval_surface_affine_invariance(u, v, seed):
    net = _random_net(11)
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 3))
    t = rng.normal(size=3)
    moved = sk.ControlNet(net.points @ A.T + t)
    p0 = sk.eval_surface(net, u, v).position
    p1 = sk.eval_surface(moved, u, v).position
    assert np.allclose(p1, p0 @ A.T + t, atol=1e-9 * (1 + np.abs(p0).max()) * 40)


def test_surface_normal_is_unit_and_matches_finite_difference():
    net = _random_net(5)
    h = 1e-5
    for (u, v) in [(0.3, 0.4), (0.62, 0.18), (0.5, 0.91)]:
        sp = sk.eval_surface(net, u, v)
        assert abs(np.linalg.norm(sp.normal) - 1.0) <= 1e-9
        pu = sk.eval_surface(net, u + h, v).position - sk.eval_surface(net, u - h, v).position
        pv = sk.eval_surface(net, u, v + h).position - sk.eval_surface(net, u, v - h).position
        fd_n = np.cross(pu, pv)
        fd_n /= np.linalg.norm(fd_n)
        assert np.degrees(np.arccos(np.clip(abs(fd_n @ sp.normal), 0, 1))) < 1e-3


# --- curvature and conjugacy ------------------------------------------------


def test_gaussian_curvature_of_sphere_patch():
    # dome of a radius-2 sphere; K should be 1/R^2 = 0.25 away from the rim
    net = _fit_height_field(lambda x, y: np.sqrt(4.0 - x * x - y * y))
    us = np.linspace(0.25, 0.75, 7)
    uu, vv = np.meshgrid(us, us, indexing="ij")
    K = sk.gaussian_curvature(net, uu.ravel(), vv.ravel())
    assert np.all(np.abs(K - 0.25) < 0.25 * 0.05)


def test_gaussian_curvature_of_cylinder_patch():
    net = _fit_height_field(lambda x, y: np.sqrt(4.0 - x * x))
    us = np.linspace(0.25, 0.75, 7)
    uu, vv = np.meshgrid(us, us, indexing="ij")
    K = sk.gaussian_curvature(net, uu.ravel(), vv.ravel())
    assert np.all(np.abs(K) < 1e-3)


def test_degenerate_net_raises_singularity():
    net = sk.ControlNet(np.zeros((30, 30, 3)))
    with pytest.raises(SingularSurfaceError):
        sk.gaussian_curvature(net, 0.5, 0.5)


def test_conjugacy_residual_on_principal_directions():
    net = _fit_height_field(lambda x, y: np.sqrt(4.0 - x * x))
    k1, k2, p1, p2 = sk.principal_directions(net, 0.5, 0.5)
    # principal pair is conjugate
    assert abs(sk.conjugacy_residual(net, 0.5, 0.5, p1, p2)) < 1e-8
    # residual of a doubled unit principal direction is its normal curvature
    assert abs(sk.conjugacy_residual(net, 0.5, 0.5, p1, p1) - k1) < 1e-9
    # analytic values for the cylinder: one direction flat, one at -1/r
    assert abs(k1 + 0.5) < 0.01
    assert abs(k2) < 1e-3


def test_conjugacy_residual_symmetry_and_guards():
    net = _random_net(13)
    r1 = sk.conjugacy_residual(net, 0.4, 0.6, (1.0, 0.2), (-0.3, 1.0))
    r2 = sk.conjugacy_residual(net, 0.4, 0.6, (-0.3, 1.0), (1.0, 0.2))
    assert abs(r1 - r2) < 1e-12
    with pytest.raises(InputError):
        sk.conjugacy_residual(net, 0.4, 0.6, (0.0, 0.0), (1.0, 0.0))


def test_second_derivatives_match_finite_difference():
    net = _random_net(17)
    h = 1e-5
    u, v = 0.41, 0.67
    D = sk.surface_ders(net, [u], [v], nders=2)
    fd_uu = (
        sk.eval_surface(net, u + h, v).position
        - 2 * sk.eval_surface(net, u, v).position
        + sk.eval_surface(net, u - h, v).position
    ) / h**2
    assert np.allclose(D[0, 2, 0], fd_uu, rtol=1e-4, atol=1e-3)


# --- fairness ---------------------------------------------------------------


def test_fairness_zero_on_flat_uniform_net():
    ii, jj = np.meshgrid(np.arange(30.0), np.arange(30.0), indexing="ij")
    net = sk.ControlNet(np.stack([ii, jj, np.zeros_like(ii)], axis=-1))
    assert sk.control_net_fairness(net) == 0.0


def test_fairness_of_single_displaced_interior_point():
    ii, jj = np.meshgrid(np.arange(30.0), np.arange(30.0), indexing="ij")
    pts = np.stack([ii, jj, np.zeros_like(ii)], axis=-1)
    pts[5, 7, 2] += 1.0
    # unit Laplacians at the point plus four half-sized ones at its neighbors
    assert abs(sk.control_net_fairness(sk.ControlNet(pts)) - 3.0) < 1e-12


def test_fairness_translation_invariant():
    net = _random_net(23)
    moved = sk.ControlNet(net.points + np.array([3.0, -2.0, 11.0]))
    assert abs(sk.control_net_fairness(net) - sk.control_net_fairness(moved)) < 1e-9


# --- curve fitting ----------------------------------------------------------


def test_fit_curve_quarter_circle_within_half_pixel():
    theta = np.linspace(0.0, np.pi / 2, 200)
    pts = 100.0 * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    curve = sk.fit_curve(pts, 8)
    samples = curve.evaluate(np.linspace(0, 1, 400))
    dev = np.abs(np.linalg.norm(samples, axis=1) - 100.0)
    assert dev.max() < 0.5


def test_fit_curve_interpolates_endpoints():
    rng = np.random.default_rng(2)
    pts = np.cumsum(rng.normal(size=(40, 2)), axis=0)
    curve = sk.fit_curve(pts, 6)
    assert np.allclose(curve.evaluate(0.0), pts[0], atol=1e-12)
    assert np.allclose(curve.evaluate(1.0), pts[-1], atol=1e-12)


def test_fit_curve_closed_polyline_closes():
    theta = np.linspace(0.0, 2 * np.pi, 120)
    pts = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    curve = sk.fit_curve(pts, 12)
    gap = np.linalg.norm(curve.evaluate(0.0) - curve.evaluate(1.0))
    assert gap < 1e-6


def test_fit_curve_rejects_bad_input():
    with pytest.raises(InputError):
        sk.fit_curve(np.zeros((6, 2)), 8)  # underdetermined
    with pytest.raises(InputError):
        sk.fit_curve(np.ones((10, 2)), 4)  # degenerate: zero length


# --- surface fitting --------------------------------------------------------


def test_fit_surface_recovers_sampled_surface():
    net = _random_net(31, scale=0.6)
    us = np.linspace(0, 1, 55)
    uu, vv = np.meshgrid(us, us, indexing="ij")
    targets = sk.eval_surface_many(net, uu.ravel(), vv.ravel(), with_normals=False)
    fi, fj = np.meshgrid(np.linspace(0, 29, 30), np.linspace(0, 29, 30), indexing="ij")
    flat = sk.ControlNet(np.stack([fi, fj, np.zeros((30, 30))], axis=-1))
    trace = []
    fitted, params = sk.fit_surface_to_points(
        targets, flat, fairness_weight=1e-8, trace=trace
    )
    pos = sk.eval_surface_many(fitted, params[:, 0], params[:, 1], with_normals=False)
    assert np.mean(np.linalg.norm(pos - targets, axis=1)) < 1e-2
    # objective decreases monotonically
    diffs = np.diff(trace)
    assert np.all(diffs <= 1e-9)


def test_fit_surface_rejects_sparse_targets():
    flat = _random_net(1)
    with pytest.raises(InputError):
        sk.fit_surface_to_points(np.zeros((50, 3)), flat, 1.0)


# --- free-form deformation --------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(
    st.floats(min_value=-5.0, max_value=5.0),
    st.floats(min_value=-5.0, max_value=5.0),
    st.floats(min_value=-5.0, max_value=5.0),
)
def test_ffd_zero_lattice_is_identity(x, y, z):
    lat = sk.FFDLattice()
    p = np.array([x, y, z])
    assert np.allclose(sk.ffd_apply(lat, p), p, atol=1e-12)


def test_ffd_constant_displacement_translates():
    lat = sk.FFDLattice(np.tile(np.array([0.5, -1.0, 2.0]), (16, 16, 16, 1)))
    rng = np.random.default_rng(4)
    pts = rng.uniform(-5, 5, size=(200, 3))
    out = sk.ffd_apply(lat, pts)
    assert np.allclose(out, pts + np.array([0.5, -1.0, 2.0]), atol=1e-12)


def test_ffd_planar_displacement_preserves_z():
    rng = np.random.default_rng(9)
    disp = np.zeros((16, 16, 16, 3))
    disp[..., :2] = rng.uniform(-0.2, 0.2, size=(16, 16, 16, 2))
    lat = sk.FFDLattice(disp)
    pts = rng.uniform(-5, 5, size=(500, 3))
    out = sk.ffd_apply(lat, pts)
    assert np.array_equal(out[:, 2], pts[:, 2])


def test_ffd_rejects_points_outside_lattice():
    with pytest.raises(DomainError):
        sk.ffd_apply(sk.FFDLattice(), np.array([5.2, 0.0, 0.0]))


# --- serialization ----------------------------------------------------------


def test_net_json_round_trip_exact(tmp_path):
    net = _random_net(41)
    path = tmp_path / "net.json"
    sk.save_net(net, path)
    loaded = sk.load_net(path)
    assert np.array_equal(loaded.points, net.points)


def test_net_json_rejects_wrong_count(tmp_path):
    import json

    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"degree": 3, "nu": 30, "nv": 30, "points": [[0, 0, 0]] * 10}))
    from pqforge.errors import ParseError

    with pytest.raises(ParseError):
        sk.load_net(path)


def test_obj_round_trip_preserves_counts(tmp_path):
    net = _random_net(43)
    path = tmp_path / "surf.obj"
    sk.surface_obj(net, path, res=20)
    V, F = sk.import_obj(path)
    assert V.shape[0] == 400
    assert len(F) == 2 * 19 * 19
