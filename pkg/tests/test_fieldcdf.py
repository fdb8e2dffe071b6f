import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pqforge import camera, fieldcdf as fc, splinekit
from pqforge.errors import DegenerateFieldError, InputError
from pqforge.visibility import MaskSet


# ---------------------------------------------------------------------------
# encoding


def test_encode_axis_pair():
    c = fc.encode((1.0, 0.0), (0.0, 1.0))
    assert np.allclose(c, [0.0, 0.0, -1.0, 0.0], atol=1e-15)


def test_encode_repeated_pair():
    c = fc.encode((1.0, 0.0), (1.0, 0.0))
    assert np.allclose(c, [2.0, 0.0, 1.0, 0.0], atol=1e-15)


def test_encode_zero_raises():
    with pytest.raises(InputError):
        fc.encode((0.0, 0.0), (1.0, 0.0))


_unit = st.floats(min_value=-2.0, max_value=2.0, allow_nan=False)


@settings(max_examples=80, deadline=None)
@given(_unit, _unit, _unit, _unit)
def test_encode_symmetry_group(ux, uy, vx, vy):
    u = np.array([ux, uy])
    v = np.array([vx, vy])
    if np.hypot(*u) < 1e-3 or np.hypot(*v) < 1e-3:
        return
    base = fc.encode(u, v)
    for uu, vv in ((-u, v), (u, -v), (-u, -v), (v, u), (-v, u), (v, -u)):
        # operand order flips the rounding of the fused product terms by an
        # ulp, so "exact" here means to the last couple of bits
        assert np.allclose(fc.encode(uu, vv), base, rtol=1e-14, atol=1e-14)


def test_decode_axis_pair():
    pair = fc.decode(np.array([0.0, 0.0, -1.0, 0.0]))
    assert np.allclose(pair.u, [1.0, 0.0], atol=1e-12)
    assert np.allclose(pair.v, [0.0, 1.0], atol=1e-12)


def _set_match(u, v, u2, v2, tol):
    """The crosses {±u, ±v} and {±u2, ±v2} agree as sets."""
    for a in (u2, v2):
        da = min(np.linalg.norm(a - u), np.linalg.norm(a + u))
        db = min(np.linalg.norm(a - v), np.linalg.norm(a + v))
        if min(da, db) > tol:
            return False
    return True


def test_decode_round_trip():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        u = rng.uniform(-2, 2, 2)
        v = rng.uniform(-2, 2, 2)
        if min(np.linalg.norm(u), np.linalg.norm(v)) < 1e-2:
            continue
        uc = complex(*u) ** 2
        vc = complex(*v) ** 2
        if abs(uc - vc) < 1e-10:
            continue
        c = fc.encode(u, v)
        pair = fc.decode(c)
        assert _set_match(u, v, pair.u, pair.v, 1e-9)
        assert np.allclose(fc.encode(pair.u, pair.v), c, atol=1e-9)


def test_decode_repeated_root():
    u = np.array([0.6, -1.1])
    pair = fc.decode(fc.encode(u, u))
    for a in (pair.u, pair.v):
        assert min(np.linalg.norm(a - u), np.linalg.norm(a + u)) < 1e-7


def test_decode_double_zero_root():
    with pytest.raises(DegenerateFieldError):
        fc.decode(np.zeros(4))


def test_encode_homogeneity():
    rng = np.random.default_rng(3)
    u = rng.uniform(-1, 1, 2) + 0.5
    v = rng.uniform(-1, 1, 2) - 0.5
    c = fc.encode(u, v)
    for s in (0.5, 2.0, 3.0):
        cs = fc.encode(s * u, s * v)
        assert np.allclose(cs[:2], s**2 * c[:2], rtol=1e-12, atol=1e-14)
        assert np.allclose(cs[2:], s**4 * c[2:], rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------------------
# field maps and energies


def _const_field(mask, u, v, occluded=None):
    enc = np.full(mask.shape + (4,), np.nan)
    enc[mask] = fc.encode(u, v)
    if occluded is None:
        return fc.FieldMap(visible=enc, visible_mask=mask)
    enc_o = np.full(mask.shape + (4,), np.nan)
    enc_o[occluded] = fc.encode(u, v)
    return fc.FieldMap(visible=enc, visible_mask=mask,
                       occluded=enc_o, occluded_mask=occluded)


def _block_mask(size=32, pad=6):
    m = np.zeros((size, size), dtype=bool)
    m[pad:-pad, pad:-pad] = True
    return m


def test_energy_identity_field():
    mask = _block_mask()
    rng = np.random.default_rng(1)
    enc = np.full(mask.shape + (4,), np.nan)
    enc[mask] = rng.normal(size=(int(mask.sum()), 4))
    field = fc.FieldMap(visible=enc.copy(), visible_mask=mask)
    gt = fc.FieldMap(visible=enc.copy(), visible_mask=mask)
    rep = fc.field_energy(field, gt)
    assert rep.data == 0.0
    assert rep.total == rep.data + 0.1 * rep.smoothness + 0.01 * rep.consistency


def test_energy_constant_field_smoothness():
    field = _const_field(_block_mask(), (1.0, 0.2), (-0.3, 1.0))
    rep = fc.field_energy(field)
    assert rep.smoothness == 0.0


def test_energy_rotation_invariance():
    mask = _block_mask()
    rng = np.random.default_rng(5)
    n = int(mask.sum())
    u = rng.uniform(-1, 1, (n, 2)) + [2.0, 0.0]
    v = rng.uniform(-1, 1, (n, 2)) + [0.0, 2.0]
    enc = np.full(mask.shape + (4,), np.nan)
    enc[mask] = fc.encode(u, v)
    enc_rot = np.full(mask.shape + (4,), np.nan)
    enc_rot[mask] = fc.encode(v, -u)
    assert np.allclose(enc[mask], enc_rot[mask], rtol=1e-13, atol=1e-13)
    a = fc.field_energy(fc.FieldMap(visible=enc, visible_mask=mask))
    b = fc.field_energy(fc.FieldMap(visible=enc_rot, visible_mask=mask))
    assert abs(a.smoothness - b.smoothness) < 1e-9


def test_energy_mask_mismatch():
    m1 = _block_mask()
    m2 = _block_mask(pad=7)
    f1 = _const_field(m1, (1, 0), (0, 1))
    f2 = _const_field(m2, (1, 0), (0, 1))
    with pytest.raises(InputError):
        fc.field_energy(f1, f2)


def test_energy_consistency_offset():
    # both layers over the same block; occluded encodings shifted by one unit
    # in channel 0, so every ordered pair contributes 1 + 1
    mask = _block_mask()
    rng = np.random.default_rng(9)
    enc = np.full(mask.shape + (4,), np.nan)
    enc[mask] = rng.normal(size=(int(mask.sum()), 4))
    enc_o = enc.copy()
    enc_o[mask] += [1.0, 0.0, 0.0, 0.0]
    field = fc.FieldMap(visible=enc, visible_mask=mask,
                        occluded=enc_o, occluded_mask=mask.copy())

    class _Band:
        def omega_pairs(self, eligible):
            rr, cc = np.nonzero(eligible)
            return rr, cc, rr, cc

    rep = fc.field_energy(field, band=_Band())
    assert abs(rep.consistency - 2.0) < 1e-12


# ---------------------------------------------------------------------------
# lifting


def test_lift_flat():
    d = np.array([[1.0, 0.0], [0.3, -0.8]])
    n = np.tile([0.0, 0.0, 1.0], (2, 1))
    t, bad = fc.lift_vectors(d, n)
    assert not bad.any()
    assert np.allclose(t[:, 2], 0.0)
    assert np.allclose(t[:, :2], d)


def test_lift_tilted_plane():
    # plane z = y: tilted 45 degrees about the x axis
    n = np.array([[0.0, -1.0, 1.0]]) / np.sqrt(2.0)
    t_along, _ = fc.lift_vectors(np.array([[1.0, 0.0]]), n)
    assert np.allclose(t_along[0], [1.0, 0.0, 0.0], atol=1e-12)
    t_across, _ = fc.lift_vectors(np.array([[0.0, 1.0]]), n)
    assert np.allclose(t_across[0], [0.0, 1.0, 1.0], atol=1e-12)


def test_lift_orthogonal_to_normal():
    rng = np.random.default_rng(11)
    n = rng.normal(size=(200, 3))
    n[:, 2] = np.sign(n[:, 2]) * (np.abs(n[:, 2]) + 0.3)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    d = rng.uniform(-1, 1, (200, 2))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t, bad = fc.lift_vectors(d, n)
    assert not bad.any()
    assert np.max(np.abs(np.sum(t * n, axis=1))) < 1e-6


def test_lift_degenerate_flag():
    n = np.array([[1.0, 0.0, 0.0]])
    t, bad = fc.lift_vectors(np.array([[0.0, 1.0]]), n)
    assert bad[0]


# ---------------------------------------------------------------------------
# Dirichlet energy on a triangle mesh


def test_dirichlet_constant_zero():
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.2]], float)
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    enc = np.tile([0.3, -1.0, 0.5, 2.0], (4, 1))
    assert fc.dirichlet_smoothness(enc, verts, faces) == 0.0


def test_dirichlet_unit_square_ramp():
    # linear ramp c = x on the unit square split into two triangles; the
    # cotangent formula reproduces the continuous Dirichlet integral, 1
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    enc = np.zeros((4, 4))
    enc[:, 0] = verts[:, 0]
    e = fc.dirichlet_smoothness(enc, verts, faces)
    assert abs(e - 1.0) < 1e-12


def test_dirichlet_quartic_scaling_of_product_term():
    rng = np.random.default_rng(2)
    u = rng.uniform(0.5, 1.5, (6, 2))
    v = rng.uniform(-1.5, -0.5, (6, 2))
    c1 = fc.encode(u, v)
    c2 = fc.encode(2.0 * u, 2.0 * v)
    assert np.allclose(c2[:, 2:], 16.0 * c1[:, 2:], rtol=1e-12)


# ---------------------------------------------------------------------------
# optimize_field


def _plane_net(z=1.0, half=3.0):
    g = np.linspace(-half, half, splinekit.NET_SIZE)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([xx, yy, np.full_like(xx, z)], axis=-1)
    return splinekit.ControlNet(pts)


def _cap_net(a=2.6, b=1.9, h=0.9, half_x=1.55, half_y=1.15):
    gx = np.linspace(-half_x, half_x, splinekit.NET_SIZE)
    gy = np.linspace(-half_y, half_y, splinekit.NET_SIZE)
    xx, yy = np.meshgrid(gx, gy, indexing="ij")
    zz = h * np.sqrt(1.0 - (xx / a) ** 2 - (yy / b) ** 2) + 1.0
    return splinekit.ControlNet(np.stack([xx, yy, zz], axis=-1))


def _masks_for(mask):
    z = np.zeros_like(mask)
    return MaskSet(vf=mask, vb=z.copy(), of=z.copy(), ob=z.copy())


def _rect_mask(r0, r1, c0, c1, size=256):
    m = np.zeros((size, size), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def test_optimize_plane_single_feature():
    net = _plane_net()
    mask = _rect_mask(96, 160, 88, 168)
    field = fc.optimize_field(net, _masks_for(mask), features=[((100, 128), (1.0, 0.0))])
    field.validate()
    rep = fc.field_energy(field)
    assert rep.smoothness < 1e-9
    u, v = fc.decode_many(field.visible[mask])
    ang = np.abs(np.arctan2(u[:, 1], u[:, 0]))
    ang = np.minimum(ang, np.pi - ang)
    assert np.max(ang) < 1e-6


def test_optimize_plane_matches_dense_solve():
    # tiny canvas so the same quadratic can be solved densely from scratch
    frame = camera.CanvasFrame(center_x=0.0, center_y=0.0, size=16)
    net = _plane_net()
    mask = np.ones((16, 16), dtype=bool)
    feats = [((3, 8), (1.0, 0.0)), ((12, 8), (np.cos(0.52), np.sin(0.52)))]
    field = fc.optimize_field(net, _masks_for(mask), features=feats, frame=frame)
    e_opt = fc.field_energy(field).smoothness

    # independent dense solve of the harmonic interpolation, channel by
    # channel, followed by the same per-pixel decode/normalize convention
    fixed = {}
    for (x, y), t in feats:
        t = np.asarray(t) / np.hypot(*t)
        fixed[y * 16 + x] = fc.encode(t, (-t[1], t[0]))
    n = 256
    lap = np.zeros((n, n))
    for r in range(16):
        for c in range(16):
            i = r * 16 + c
            for j in (i + 1, i + 16):
                if c == 15 and j == i + 1 or j >= n:
                    continue
                lap[i, i] += 1
                lap[j, j] += 1
                lap[i, j] -= 1
                lap[j, i] -= 1
    free = [i for i in range(n) if i not in fixed]
    enc = np.zeros((n, 4))
    for i, c in fixed.items():
        enc[i] = c
    rhs = -lap[np.ix_(free, list(fixed))] @ np.array([fixed[i] for i in fixed])
    enc[free] = np.linalg.solve(lap[np.ix_(free, free)], rhs)
    u, v = fc.decode_many(enc)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    dense = np.full((16, 16, 4), np.nan)
    dense[mask] = fc.encode(u, v)
    e_dense = fc.field_energy(fc.FieldMap(visible=dense, visible_mask=mask)).smoothness
    assert e_dense > 1e-6
    assert abs(e_opt - e_dense) <= 0.01 * e_dense


def test_optimize_plane_orthogonal_features_constant():
    frame = camera.CanvasFrame(center_x=0.0, center_y=0.0, size=16)
    net = _plane_net()
    mask = np.ones((16, 16), dtype=bool)
    feats = [((3, 8), (1.0, 0.0)), ((12, 8), (0.0, 1.0))]
    field = fc.optimize_field(net, _masks_for(mask), features=feats, frame=frame)
    # the two crosses are the same set, so the smooth interpolation stays put
    assert fc.field_energy(field).smoothness < 1e-12


def test_optimize_ellipsoid_principal_directions():
    net = _cap_net()
    mask = _rect_mask(102, 154, 92, 164)
    field = fc.optimize_field(net, _masks_for(mask))
    lifted = fc.lift_to_tangent(field, net)["visible"]
    rows, cols = lifted.pixels[:, 0], lifted.pixels[:, 1]

    raster = camera.rasterize_surface(
        lambda u, v: splinekit.eval_surface_many(net, u, v, with_normals=False),
        camera.CanvasFrame(),
    )
    good = 0
    total = 0
    for k in range(0, rows.size, 7):
        uu, vv = raster.param1[rows[k], cols[k]]
        if not np.isfinite(uu):
            continue
        k1, k2, p1, p2 = splinekit.principal_directions(net, float(uu), float(vv))
        if abs(k1 - k2) < 0.02 * (abs(k1) + abs(k2)):
            continue  # near-umbilic: directions not well defined
        D = splinekit.surface_ders(net, [float(uu)], [float(vv)], nders=1)
        su, sv = D[0, 1, 0], D[0, 0, 1]
        pd1 = p1[0] * su + p1[1] * sv
        pd2 = p2[0] * su + p2[1] * sv
        total += 1
        angs = []
        for d in (lifted.d1[k], lifted.d2[k]):
            best = min(_axis_angle(d, pd1), _axis_angle(d, pd2))
            angs.append(best)
        if max(angs) < np.radians(5.0):
            good += 1
    assert total > 100
    assert good / total >= 0.9


def _axis_angle(a, b):
    c = abs(float(np.dot(a, b))) / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.arccos(min(c, 1.0)))


def test_optimize_feature_alignment_on_curved_surface():
    net = _cap_net()
    mask = _rect_mask(102, 154, 92, 164)
    feats = [((100, 120), (1.0, 0.4)), ((150, 140), (0.2, 1.0))]
    field = fc.optimize_field(net, _masks_for(mask), features=feats)
    for (x, y), t in feats:
        u, v = fc.decode_many(field.visible[None, y, x])
        t = np.asarray(t, float)
        best = min(
            _axis_angle2(u[0], t),
            _axis_angle2(v[0], t),
        )
        assert best < 1e-6


def _axis_angle2(a, b):
    c = abs(float(np.dot(a, b))) / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.arccos(min(c, 1.0)))


def test_optimize_conjugacy_fraction():
    net = _cap_net()
    mask = _rect_mask(102, 154, 92, 164)
    field = fc.optimize_field(net, _masks_for(mask))
    assert fc.conjugacy_ok_fraction(field, net) >= 0.95


def test_optimize_never_worse_than_constant_baseline():
    net = _cap_net()
    mask = _rect_mask(102, 154, 92, 164)
    feats = [((100, 120), (1.0, 0.0)), ((150, 140), (0.0, 1.0))]
    masks = _masks_for(mask)
    field = fc.optimize_field(net, masks, features=feats)
    e_out = fc.field_objective(field, net)
    for _, t in feats:
        t = np.asarray(t, float)
        base = _const_field(mask, t, (-t[1], t[0]))
        assert e_out <= fc.field_objective(base, net) + 1e-12


def test_optimize_deterministic():
    net = _cap_net()
    mask = _rect_mask(104, 150, 96, 160)
    feats = [((110, 120), (1.0, 0.1))]
    a = fc.optimize_field(net, _masks_for(mask), features=feats)
    b = fc.optimize_field(net, _masks_for(mask), features=feats)
    assert np.array_equal(a.visible[mask], b.visible[mask])


def test_optimize_contradictory_features():
    net = _plane_net()
    mask = _rect_mask(96, 160, 88, 168)
    feats = [((100, 128), (1.0, 0.0)), ((100, 128), (0.3, 1.0))]
    with pytest.raises(InputError):
        fc.optimize_field(net, _masks_for(mask), features=feats)


def test_optimize_two_layer_smoke():
    net = _cap_net()
    vis = _rect_mask(102, 154, 92, 164)
    occ = _rect_mask(110, 146, 100, 156)
    z = np.zeros_like(vis)
    masks = MaskSet(vf=vis, vb=z.copy(), of=z.copy(), ob=occ)

    class _Band:
        def omega_pairs(self, eligible):
            rr, cc = np.nonzero(eligible)
            return rr, cc, rr, cc

    field = fc.optimize_field(net, masks, band=_Band())
    field.validate()
    assert field.occluded is not None
    rep = fc.field_energy(field, band=_Band())
    assert np.isfinite(rep.consistency)


# ---------------------------------------------------------------------------
# serialization


def test_pqf4_round_trip(tmp_path):
    mask = _block_mask()
    occ = _block_mask(pad=9)
    rng = np.random.default_rng(4)
    enc = np.full(mask.shape + (4,), np.nan)
    enc[mask] = rng.normal(size=(int(mask.sum()), 4))
    enc_o = np.full(mask.shape + (4,), np.nan)
    enc_o[occ] = rng.normal(size=(int(occ.sum()), 4))
    field = fc.FieldMap(visible=enc, visible_mask=mask,
                        occluded=enc_o, occluded_mask=occ)
    path = tmp_path / "field.pqf4"
    field.save(path)
    raw = path.read_bytes()
    assert raw[:8] == b"PQF4\x00\x00\x00\x01"
    back = fc.FieldMap.load(path)
    assert np.array_equal(back.visible_mask, mask)
    assert np.array_equal(back.occluded_mask, occ)
    assert np.allclose(back.visible[mask], enc[mask].astype(np.float32))
    assert np.allclose(back.occluded[occ], enc_o[occ].astype(np.float32))


def test_pqf4_single_layer(tmp_path):
    field = _const_field(_block_mask(), (1.0, 0.0), (0.0, 1.0))
    path = tmp_path / "field.pqf4"
    field.save(path)
    back = fc.FieldMap.load(path)
    assert back.occluded is None
    assert np.array_equal(back.visible_mask, field.visible_mask)


def test_fieldmap_validate_rejects_nan_on_mask():
    mask = _block_mask()
    enc = np.full(mask.shape + (4,), np.nan)
    enc[mask] = 1.0
    r, c = np.argwhere(mask)[0]
    enc[r, c, 2] = np.nan
    with pytest.raises(InputError):
        fc.FieldMap(visible=enc, visible_mask=mask).validate()


def test_glyph_svg():
    field = _const_field(_block_mask(64, 8), (1.0, 0.0), (0.0, 1.0))
    svg = fc.glyph_svg(field, every=4)
    assert svg.startswith("<svg")
    assert svg.count("<line") > 50
