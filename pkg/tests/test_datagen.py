import filecmp
import json
import math

import numpy as np
import pytest

from pqforge import datagen, metrics, shapesolver, splinekit
from pqforge.errors import InputError
from pqforge.sketchdoc import StrokeKind
from pqforge.visibility import validate_assumptions


# ---------------------------------------------------------------------------
# recipes and boundaries


def test_recipe_ranges_and_determinism():
    r1 = datagen.make_recipe(5)
    r2 = datagen.make_recipe(5)
    assert r1.rho.shape == (datagen.N_BOUNDARY,)
    assert r1.theta.shape == (datagen.N_BOUNDARY,)
    assert r1.z_coeffs.shape == (30,)
    assert r1.ffd_xy.shape == (splinekit.FFD_SIZE,) * 3 + (2,)
    assert np.all((r1.rho >= 2.0) & (r1.rho <= 10.0))
    assert np.all((r1.theta >= 0.0) & (r1.theta < 2 * math.pi))
    assert np.all(np.diff(r1.theta) >= 0.0)
    assert np.all(np.abs(r1.z_coeffs) <= 1.0)
    assert np.all(np.abs(r1.ffd_xy) <= 0.2)
    for name in ("rho", "theta", "z_coeffs", "ffd_xy"):
        assert np.array_equal(getattr(r1, name), getattr(r2, name))


def test_recipe_validation():
    r = datagen.make_recipe(1)
    bad_rho = r.rho.copy()
    bad_rho[0] = 1.0
    with pytest.raises(InputError):
        datagen.ShapeRecipe(r.seed, bad_rho, r.theta, r.z_coeffs, r.ffd_xy)
    bad_theta = r.theta[::-1].copy()
    with pytest.raises(InputError):
        datagen.ShapeRecipe(r.seed, r.rho, bad_theta, r.z_coeffs, r.ffd_xy)


def _recipe_with(seed=1, **overrides):
    r = datagen.make_recipe(seed)
    fields = {
        "seed": r.seed,
        "rho": r.rho,
        "theta": r.theta,
        "z_coeffs": r.z_coeffs,
        "ffd_xy": r.ffd_xy,
    }
    fields.update(overrides)
    return datagen.ShapeRecipe(**fields)


def test_boundary_regular_polygon():
    n = datagen.N_BOUNDARY
    r = _recipe_with(
        rho=np.full(n, 2.0),
        theta=np.linspace(0.0, 2 * math.pi, n, endpoint=False),
    )
    pts = datagen.gen_boundary_xy(r)
    assert pts.shape == (n, 2)
    assert np.allclose(np.linalg.norm(pts, axis=1), 2.0, atol=1e-12)
    ang = np.arctan2(pts[:, 1], pts[:, 0])
    steps = np.diff(np.unwrap(ang))
    assert np.allclose(steps, 2 * math.pi / n, atol=1e-9)


def _segments_cross(p1, p2, q1, q2):
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def test_boundary_annulus_and_simple():
    n = datagen.N_BOUNDARY
    for seed in range(100):
        pts = datagen.gen_boundary_xy(datagen.make_recipe([41, seed]))
        rad = np.linalg.norm(pts, axis=1)
        assert np.all((rad >= 2.0 - 1e-12) & (rad <= 10.0 + 1e-12))
        # non-adjacent edges of the closed polygon must never cross
        for i in range(n):
            a, b = pts[i], pts[(i + 1) % n]
            for j in range(i + 2, n):
                if (j + 1) % n == i:
                    continue
                c, d = pts[j], pts[(j + 1) % n]
                assert not _segments_cross(a, b, c, d), (seed, i, j)


# ---------------------------------------------------------------------------
# interior solve


def test_interior_bbox_and_monotone():
    r = datagen.make_recipe(9)
    cands = datagen.gen_boundary_xy(r)
    trace = []
    grid = datagen.solve_interior_xy(cands, r, trace=trace)
    assert grid.shape == (30, 30, 2)
    assert np.all(grid >= -4.0 - 1e-9) and np.all(grid <= 4.0 + 1e-9)
    span = np.max(np.ptp(grid.reshape(-1, 2), axis=0))
    assert abs(span - 8.0) < 1e-9
    t = np.asarray(trace)
    assert t.size >= 2
    assert np.all(np.diff(t) <= 1e-9 * max(1.0, t[0]))


def test_interior_injective_on_circle():
    n = datagen.N_BOUNDARY
    r = _recipe_with(
        seed=2,
        rho=np.full(n, 6.0),
        theta=np.linspace(0.0, 2 * math.pi, n, endpoint=False),
    )
    grid = datagen.solve_interior_xy(datagen.gen_boundary_xy(r), r)
    du = grid[1:, :-1] - grid[:-1, :-1]
    dv = grid[:-1, 1:] - grid[:-1, :-1]
    cross = du[..., 0] * dv[..., 1] - du[..., 1] * dv[..., 0]
    sign = np.sign(np.median(cross))
    frac = np.mean(cross * sign > 0)
    assert frac >= 0.99


def test_interior_rejects_degenerate_polygon():
    n = datagen.N_BOUNDARY
    r = _recipe_with(theta=np.sort(np.linspace(0.0, 1e-4, n)))
    with pytest.raises(InputError):
        datagen.solve_interior_xy(datagen.gen_boundary_xy(r), r)


# ---------------------------------------------------------------------------
# heights


def test_heights_scaling_and_smoothness():
    F = splinekit.fairness_matrix()
    const = np.ones(900)
    assert np.allclose(F @ const, 0.0, atol=1e-12)

    rng = np.random.default_rng(77)
    for seed in range(100):
        z = datagen.gen_heights(datagen.make_recipe([13, seed]))
        assert z.shape == (30, 30)
        assert abs(np.max(np.abs(z)) - 5.0) < 1e-9
        zf = z.reshape(900)
        rough = rng.uniform(-1.0, 1.0, 900)
        rough *= 5.0 / np.max(np.abs(rough))
        fair_gen = float(np.sum((F @ zf) ** 2))
        fair_iid = float(np.sum((F @ rough) ** 2))
        assert fair_gen <= fair_iid


# ---------------------------------------------------------------------------
# FFD perturbation


def _box_net(half=4.0, zmax=5.0, rng=None):
    g = np.linspace(-half, half, 30)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    if rng is None:
        zz = np.zeros_like(xx)
    else:
        zz = rng.uniform(-zmax, zmax, xx.shape)
    return splinekit.ControlNet(np.stack([xx, yy, zz], axis=-1))


def test_ffd_identity_and_z_preservation():
    n = datagen.N_BOUNDARY
    zero = _recipe_with(ffd_xy=np.zeros((16, 16, 16, 2)))
    net = _box_net(rng=np.random.default_rng(3))
    out = datagen.perturb_ffd(net, zero)
    assert np.array_equal(out.points, net.points)

    moved = datagen.perturb_ffd(net, datagen.make_recipe(8))
    assert np.array_equal(moved.points[..., 2], net.points[..., 2])
    assert not np.array_equal(moved.points[..., :2], net.points[..., :2])


def test_ffd_displacement_bounded():
    net = _box_net(rng=np.random.default_rng(5))
    worst = 0.0
    for seed in range(100):
        r = datagen.make_recipe([29, seed])
        out = datagen.perturb_ffd(net, r)
        d = np.linalg.norm(out.points[..., :2] - net.points[..., :2], axis=-1)
        worst = max(worst, float(d.max()))
    assert worst < 0.25


# ---------------------------------------------------------------------------
# curvature filter


def test_curvature_accept_plane_rejects_small_sphere():
    assert datagen.curvature_accept(_box_net()) is True

    g = np.linspace(-0.22, 0.22, 30)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    zz = np.sqrt(0.16 - xx**2 - yy**2)
    sphere = splinekit.ControlNet(np.stack([xx, yy, zz], axis=-1))
    assert datagen.curvature_accept(sphere) is False


def test_curvature_filter_not_vacuous():
    accepted = 0
    total = 0
    for seed in range(120):
        try:
            net = datagen.roof_net(datagen.make_recipe([61, seed]))
        except InputError:
            continue
        total += 1
        accepted += int(datagen.curvature_accept(net))
    assert total >= 100
    assert 0 < accepted < total


# ---------------------------------------------------------------------------
# quadric patches


def test_hemisphere_cap_fit_quality():
    net, info = datagen.ellipsoid_cap_net((3.0, 3.0, 3.0), (0.0, 0.0, 1.0), 0.0)
    hs, ht = info["half_s"], info["half_t"]
    assert hs > 1.0 and ht > 1.0
    g = np.linspace(-1.0, 1.0, 60)
    ss, tt = np.meshgrid(hs * g, ht * g, indexing="ij")
    hh = np.sqrt(9.0 - ss**2 - tt**2)
    pts = np.stack([ss.ravel(), tt.ravel(), hh.ravel()], axis=1)
    nrm = pts / 3.0
    gt = metrics.PointSampleSet(pts, nrm, "ground-truth")
    rec = metrics.sample_surface(net, "recovered", n=60)
    assert metrics.chamfer_position(rec, gt) < 1e-2


def test_quadric_patch_height_field_and_convex():
    net, info = datagen.ellipsoid_cap_net((3.0, 2.5, 2.0), (0.2, -0.1, 0.95), 0.4)
    g = np.linspace(0.0, 1.0, 64)
    uu, vv = np.meshgrid(g, g, indexing="ij")
    _, nrm = splinekit.eval_surface_many(net, uu.ravel(), vv.ravel())
    assert np.all(nrm[:, 2] > 0.0)
    E, F, G, L, M, N = splinekit.fundamental_forms(net, uu.ravel(), vv.ravel())
    K = (L * N - M * M) / (E * G - F * F)
    assert np.all(K > 0.0)


def test_gen_quadric_patch_is_height_field():
    seen = set()
    for seed in (3, 4, 5, 6, 7, 8):
        net, info = datagen.gen_quadric_patch(np.random.default_rng(seed))
        seen.add(info["kind"])
        assert info["kind"] in ("ellipsoid", "cuboid")
        if info["kind"] == "cuboid":
            sides = np.asarray(info["sides"])
            assert 0.2 * sides.min() <= info["radius"] <= 0.5 * sides.min()
        g = np.linspace(0.0, 1.0, 32)
        uu, vv = np.meshgrid(g, g, indexing="ij")
        _, nrm = splinekit.eval_surface_many(net, uu.ravel(), vv.ravel())
        assert np.all(nrm[:, 2] > 0.0)
    assert len(seen) == 2


# ---------------------------------------------------------------------------
# rendering


def _first_sample(level="full", gentle=False, seed0=101):
    for attempt in range(12):
        if gentle:
            net, _ = datagen.ellipsoid_cap_net((4.0, 3.6, 1.1), (0.05, 0.02, 1.0), 0.12)
        else:
            try:
                net = datagen.roof_net(datagen.make_recipe([seed0, attempt]))
            except InputError:
                continue
            if not datagen.curvature_accept(net):
                continue
        for k in (7, 18, 31, 44, 57):
            rng = np.random.default_rng([seed0, attempt, k])
            s = datagen.render_sample(net, k, rng, level=level)
            if s is not None:
                return s
        if gentle:
            break
    raise AssertionError("no renderable sample found")


def test_render_sample_document_and_layers():
    s = _first_sample()
    assert validate_assumptions(s.doc) == []
    assert 1 <= s.k <= 60
    assert s.masks.visible.any()

    for ds in s.doc.samples:
        layer = s.depth_visible if ds.layer == "visible" else s.depth_occluded
        assert ds.depth == layer[ds.y, ds.x]

    # the first-corner control point must project into the upper left
    row, col = s.frame.xy_to_pixel(s.net.points[0, 0, 0], s.net.points[0, 0, 1])
    assert row < s.frame.size / 2 and col < s.frame.size / 2

    s.field.validate()
    s.mesh.validate()
    assert len(s.doc.strokes_of(StrokeKind.FEATURE)) >= 2
    stats = s.stats
    assert stats["P_max"] <= 0.05
    assert np.isfinite(stats["P_mean"])


def test_render_gentle_cap_no_contour_no_occlusion():
    s = _first_sample(level="sketch", gentle=True)
    assert s.doc.strokes_of(StrokeKind.CONTOUR) == []
    assert not s.masks.occluded.any()
    assert s.field is None and s.mesh is None


def test_render_deterministic():
    from pqforge.sketchdoc import doc_to_dict

    net, _ = datagen.ellipsoid_cap_net((4.0, 3.6, 1.1), (0.05, 0.02, 1.0), 0.12)
    runs = []
    for _ in range(2):
        rng = np.random.default_rng([55, 3])
        runs.append(datagen.render_sample(net, 12, rng, level="full"))
    a, b = runs
    assert a is not None and b is not None
    assert json.dumps(doc_to_dict(a.doc), sort_keys=True) == json.dumps(
        doc_to_dict(b.doc), sort_keys=True
    )
    assert np.array_equal(a.field.visible, b.field.visible)
    assert np.array_equal(a.mesh.vertices, b.mesh.vertices)
    assert np.array_equal(a.mesh.faces, b.mesh.faces)


def test_render_layers_recover_surface():
    net, _ = datagen.ellipsoid_cap_net((1.7, 1.5, 0.8), (0.0, 0.0, 1.0), 0.1)
    s = None
    for k in (4, 11, 26, 39):
        s = datagen.render_sample(net, k, np.random.default_rng([71, k]), level="sketch")
        if s is not None:
            break
    assert s is not None
    layers = datagen.sample_layers(s)
    rec = shapesolver.surface_from_layers(layers, frame=s.frame)
    d_c = metrics.chamfer_position(
        metrics.sample_surface(rec, "recovered"),
        metrics.sample_surface(s.net, "ground-truth"),
    )
    d_n = metrics.chamfer_normal(
        metrics.sample_surface(rec, "recovered"),
        metrics.sample_surface(s.net, "ground-truth"),
    )
    assert d_c < 1e-3
    assert d_n < math.radians(1.0)


# ---------------------------------------------------------------------------
# corpus writer


def test_corpus_write_reload_deterministic(tmp_path):
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    dirs1 = datagen.generate_corpus(out1, count=2, seed=911)
    dirs2 = datagen.generate_corpus(out2, count=2, seed=911)
    assert len(dirs1) == 2

    names = [
        "manifest.json",
        "sketch.json",
        "net.json",
        "vf.png",
        "vb.png",
        "of.png",
        "ob.png",
        "depth_visible.png",
        "depth_occluded.png",
        "normals_visible.png",
        "normals_occluded.png",
        "field.pqf4",
        "mesh.obj",
    ]
    for d1, d2 in zip(dirs1, dirs2):
        for name in names:
            f1 = d1 / name
            assert f1.exists(), name
            assert filecmp.cmp(f1, d2 / name, shallow=False), name

    sample = datagen.load_sample(dirs1[0])
    assert sample["net"].points.shape == (30, 30, 3)
    assert sample["mesh"].faces.shape[1] == 4
    assert sample["field"].visible_mask.any()
    man = json.loads((dirs1[0] / "manifest.json").read_text())
    assert man["seed"] == [911, 0]
    assert 1 <= man["k"] <= 60
