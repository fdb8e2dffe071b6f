"""Projected conjugate direction fields and their 4-channel encoding.

A cross of canvas-plane directions {u, -u, v, -v} is stored as the four
real coefficients of the complex polynomial whose roots are the four
directions: c = (Re(u^2+v^2), Im(u^2+v^2), Re(u^2 v^2), Im(u^2 v^2)) with
u, v read as complex numbers.  The encoding is invariant under sign flips
and swapping, which makes per-pixel comparisons well defined without
matching quadruplet members.  Dense fields live on the canvas pixel grid,
one layer for the visible side of the surface and optionally one for the
occluded side.
"""

from dataclasses import dataclass
import struct

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage
from scipy.sparse import csgraph

from . import camera, splinekit
from .errors import DegenerateFieldError, InputError

W_SMOOTH = 0.1
W_CONS = 0.01

# conjugacy acceptance: |II(d1,d2)| <= CONJ_TOL * (|II(d1,d1)| + |II(d2,d2)| + eps)
CONJ_TOL = 1e-3
CONJ_EPS = 1e-12

PQF4_MAGIC = b"PQF4\x00\x00\x00\x01"

_ROUNDS = 5
_ATTACH_BASE = 0.1
_CURV_FLOOR = 1e-8


# ---------------------------------------------------------------------------
# encoding


@dataclass
class CrossPair:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        for a in (self.u, self.v):
            if a.shape != (2,) or not np.all(np.isfinite(a)):
                raise InputError("cross directions must be finite 2-vectors")
            if a[0] == 0.0 and a[1] == 0.0:
                raise InputError("cross directions must be nonzero")


def encode(u, v):
    """Polynomial-coefficient encoding of the cross {u, -u, v, -v}.

    Accepts (..., 2) arrays and returns (..., 4).
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    uc = u[..., 0] + 1j * u[..., 1]
    vc = v[..., 0] + 1j * v[..., 1]
    if np.any(uc == 0) or np.any(vc == 0):
        raise InputError("cross directions must be nonzero")
    u2 = uc * uc
    v2 = vc * vc
    s = u2 + v2
    p = u2 * v2
    return np.stack([s.real, s.imag, p.real, p.imag], axis=-1)


def _canonical(z):
    """Representative of {z, -z} with angle in [0, pi)."""
    neg = (z.imag < 0) | ((z.imag == 0) & (z.real < 0))
    return np.where(neg, -z, z)


def decode_many(c):
    """Decode (..., 4) encodings to two (..., 2) direction arrays.

    Each returned vector is the class representative with angle in
    [0, pi); the pair is ordered by angle with a lexicographic tie-break.
    """
    c = np.asarray(c, dtype=float)
    s = c[..., 0] + 1j * c[..., 1]
    p = c[..., 2] + 1j * c[..., 3]
    disc = np.sqrt(s * s - 4.0 * p)
    # pick the discriminant sign that avoids cancellation in s + disc
    flip = s.real * disc.real + s.imag * disc.imag < 0
    disc = np.where(flip, -disc, disc)
    w1 = 0.5 * (s + disc)
    bad = w1 == 0
    if np.any(bad & (p == 0)):
        raise DegenerateFieldError("double root at the origin; no directions")
    w2 = p / np.where(bad, 1.0, w1)
    if np.any(w2 == 0):
        raise DegenerateFieldError("zero root; a field direction vanishes")
    zu = _canonical(np.sqrt(w1))
    zv = _canonical(np.sqrt(w2))
    au = np.angle(zu)
    av = np.angle(zv)
    swap = (au > av) | (
        (au == av)
        & ((zu.real > zv.real) | ((zu.real == zv.real) & (zu.imag > zv.imag)))
    )
    first = np.where(swap, zv, zu)
    second = np.where(swap, zu, zv)
    u = np.stack([first.real, first.imag], axis=-1)
    v = np.stack([second.real, second.imag], axis=-1)
    return u, v


def decode(c):
    u, v = decode_many(np.reshape(np.asarray(c, dtype=float), (1, 4)))
    return CrossPair(u[0], v[0])


# ---------------------------------------------------------------------------
# field maps


@dataclass
class FieldMap:
    """Per-pixel encodings on the visible and optional occluded layer."""

    visible: np.ndarray
    visible_mask: np.ndarray
    occluded: np.ndarray = None
    occluded_mask: np.ndarray = None

    def layers(self):
        out = [("visible", self.visible, self.visible_mask)]
        if self.occluded is not None:
            out.append(("occluded", self.occluded, self.occluded_mask))
        return out

    def validate(self):
        for name, enc, mask in self.layers():
            if enc.shape != mask.shape + (4,):
                raise InputError(f"{name} layer shape mismatch")
            if not np.all(np.isfinite(enc[mask])):
                raise InputError(f"{name} field has non-finite encodings on its mask")
        return self

    def save(self, path):
        layers = [enc for _, enc, _ in self.layers()]
        h, w = self.visible_mask.shape
        blob = bytearray(PQF4_MAGIC)
        blob += struct.pack("<III", h, w, len(layers))
        for enc in layers:
            blob += np.ascontiguousarray(enc, dtype=np.float32).tobytes()
        with open(path, "wb") as fh:
            fh.write(blob)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:8] != PQF4_MAGIC:
            raise InputError("not a PQF4 field file")
        h, w, nlayers = struct.unpack("<III", raw[8:20])
        need = 20 + nlayers * h * w * 4 * 4
        if len(raw) != need or nlayers not in (1, 2):
            raise InputError("corrupt PQF4 field file")
        data = np.frombuffer(raw[20:], dtype=np.float32).reshape(nlayers, h, w, 4)
        data = data.astype(float)
        masks = [np.all(np.isfinite(layer), axis=-1) for layer in data]
        if nlayers == 1:
            return cls(visible=data[0], visible_mask=masks[0])
        return cls(visible=data[0], visible_mask=masks[0],
                   occluded=data[1], occluded_mask=masks[1])


@dataclass
class FieldEnergyReport:
    data: float
    smoothness: float
    consistency: float
    total: float

    @classmethod
    def build(cls, data, smoothness, consistency):
        total = data + W_SMOOTH * smoothness + W_CONS * consistency
        return cls(data=data, smoothness=smoothness, consistency=consistency,
                   total=total)

    def to_dict(self):
        return {
            "data": self.data,
            "smoothness": self.smoothness,
            "consistency": self.consistency,
            "total": self.total,
        }


def _pair_mean(enc, mask):
    """Mean squared encoding difference over right/down in-mask pairs."""
    total = 0.0
    count = 0
    for dr, dc in ((0, 1), (1, 0)):
        a = mask[: mask.shape[0] - dr, : mask.shape[1] - dc]
        b = mask[dr:, dc:]
        both = a & b
        if not both.any():
            continue
        d = enc[: enc.shape[0] - dr, : enc.shape[1] - dc][both] - enc[dr:, dc:][both]
        total += float(np.sum(d * d))
        count += int(both.sum())
    return total / count if count else 0.0


def field_energy(field, gt=None, masks=None, band=None):
    """Data / smoothness / consistency report for a field map.

    The data term needs ``gt``; the consistency term needs ``band`` and an
    occluded layer.  ``masks`` (a MaskSet) is an optional cross-check that
    the field layers live on the expected pixel sets.
    """
    field.validate()
    if masks is not None:
        if not np.array_equal(field.visible_mask, masks.visible):
            raise InputError("field visible mask does not match the mask set")
        if field.occluded is not None and not np.array_equal(
            field.occluded_mask, masks.occluded
        ):
            raise InputError("field occluded mask does not match the mask set")

    data = 0.0
    if gt is not None:
        gt.validate()
        if not np.array_equal(field.visible_mask, gt.visible_mask) or (
            (field.occluded is None) != (gt.occluded is None)
        ):
            raise InputError("field and ground truth masks differ")
        if field.occluded is not None and not np.array_equal(
            field.occluded_mask, gt.occluded_mask
        ):
            raise InputError("field and ground truth masks differ")
        for (_, enc, mask), (_, genc, _) in zip(field.layers(), gt.layers()):
            d = enc[mask] - genc[mask]
            data += float(np.mean(np.sum(d * d, axis=-1))) if mask.any() else 0.0

    smooth = 0.0
    for _, enc, mask in field.layers():
        smooth += _pair_mean(enc, mask)

    cons = 0.0
    if band is not None and field.occluded is not None:
        eligible = field.visible_mask & field.occluded_mask
        ri, ci, rj, cj = band.omega_pairs(eligible)
        if ri.size:
            d1 = field.occluded[ri, ci] - field.visible[rj, cj]
            d2 = field.visible[ri, ci] - field.occluded[rj, cj]
            cons = float(np.mean(np.sum(d1 * d1, axis=-1) + np.sum(d2 * d2, axis=-1)))
    return FieldEnergyReport.build(data, smooth, cons)


# ---------------------------------------------------------------------------
# surface geometry per pixel


@dataclass
class _LayerGeom:
    rows: np.ndarray
    cols: np.ndarray
    params: np.ndarray
    normal: np.ndarray
    what: np.ndarray      # projected second fundamental form, (n, 2, 2)
    usable: np.ndarray    # projection invertible at the pixel
    curved: np.ndarray    # usable and measurably curved


def _layer_geometry(net, mask, uv_grid, fallback=None):
    have = mask & np.isfinite(uv_grid[..., 0]) & np.isfinite(uv_grid[..., 1])
    if not have.any():
        if fallback is not None:
            return _layer_geometry(net, mask, fallback)
        raise InputError("surface rasterization does not cover the field mask")
    uv = np.array(uv_grid, dtype=float)
    need = mask & ~have
    if need.any():
        _, (ir, ic) = ndimage.distance_transform_edt(~have, return_indices=True)
        uv[need] = uv_grid[ir[need], ic[need]]
    rows, cols = np.nonzero(mask)
    uu = np.clip(uv[rows, cols, 0], 0.0, 1.0)
    vv = np.clip(uv[rows, cols, 1], 0.0, 1.0)

    D = splinekit.surface_ders(net, uu, vv, nders=2)
    su, sv = D[:, 1, 0], D[:, 0, 1]
    suu, suv, svv = D[:, 2, 0], D[:, 1, 1], D[:, 0, 2]
    cr = np.cross(su, sv)
    nrm = np.linalg.norm(cr, axis=1)
    safe = np.where(nrm < 1e-14, 1.0, nrm)
    normal = cr / safe[:, None]
    L = np.einsum("nd,nd->n", suu, normal)
    M = np.einsum("nd,nd->n", suv, normal)
    N = np.einsum("nd,nd->n", svv, normal)

    det = su[:, 0] * sv[:, 1] - su[:, 1] * sv[:, 0]
    usable = (nrm >= 1e-14) & (np.abs(normal[:, 2]) > 1e-6)
    safe_det = np.where(np.abs(det) < 1e-300, 1.0, det)
    jinv = np.empty((rows.size, 2, 2))
    jinv[:, 0, 0] = sv[:, 1] / safe_det
    jinv[:, 0, 1] = -sv[:, 0] / safe_det
    jinv[:, 1, 0] = -su[:, 1] / safe_det
    jinv[:, 1, 1] = su[:, 0] / safe_det
    B = np.empty((rows.size, 2, 2))
    B[:, 0, 0] = L
    B[:, 0, 1] = M
    B[:, 1, 0] = M
    B[:, 1, 1] = N
    what = np.einsum("nji,njk,nkl->nil", jinv, B, jinv)
    what[~usable] = 0.0
    curved = usable & (np.linalg.norm(what.reshape(-1, 4), axis=1) > _CURV_FLOOR)
    return _LayerGeom(rows=rows, cols=cols, params=np.stack([uu, vv], axis=1),
                      normal=normal, what=what, usable=usable, curved=curved)


def _eigen_pairs(what):
    """Eigenvector pair of each symmetric 2x2 form, larger |eigenvalue| first."""
    a = what[:, 0, 0]
    b = what[:, 0, 1]
    d = what[:, 1, 1]
    th = 0.5 * np.arctan2(2.0 * b, a - d)
    c, s = np.cos(th), np.sin(th)
    e1 = np.stack([c, s], axis=-1)
    e2 = np.stack([-s, c], axis=-1)
    l1 = a * c * c + 2.0 * b * c * s + d * s * s
    l2 = a * s * s - 2.0 * b * c * s + d * c * c
    swap = np.abs(l2) > np.abs(l1)
    u = np.where(swap[:, None], e2, e1)
    v = np.where(swap[:, None], e1, e2)
    return u, v


def _rot90(d):
    return np.stack([-d[..., 1], d[..., 0]], axis=-1)


def _conjugate_partner(what, u, prev):
    """Unit direction on the conjugate line of u, sign-matched to prev."""
    w = np.einsum("nij,nj->ni", what, u)
    wn = np.linalg.norm(w, axis=1)
    line = _rot90(w) / np.where(wn < 1e-300, 1.0, wn)[:, None]
    flip = np.einsum("ni,ni->n", line, prev) < 0
    line = np.where(flip[:, None], -line, line)
    # kernel of the form: every direction is conjugate, keep the previous one
    keep = wn < 1e-12
    out = np.where(keep[:, None], prev, line)
    # avoid collapsing onto u (asymptotic direction)
    cross = np.abs(u[:, 0] * out[:, 1] - u[:, 1] * out[:, 0])
    out = np.where((cross < 1e-6)[:, None], _rot90(u), out)
    return out


def _project_pairs(what, u0, v0):
    """Nearest unit conjugate pair to (u0, v0), per pixel.

    Newton iteration on the two direction angles solving conjugacy plus
    the nearest-point optimality condition; pixels that fail to converge
    fall back to keeping u and rotating v onto the conjugate line.
    """
    tu0 = np.arctan2(u0[:, 1], u0[:, 0])
    tv0 = np.arctan2(v0[:, 1], v0[:, 0])
    tu, tv = tu0.copy(), tv0.copy()
    for _ in range(12):
        cu, su = np.cos(tu), np.sin(tu)
        cv, sv = np.cos(tv), np.sin(tv)
        u = np.stack([cu, su], axis=-1)
        up = np.stack([-su, cu], axis=-1)
        v = np.stack([cv, sv], axis=-1)
        vp = np.stack([-sv, cv], axis=-1)
        Wv = np.einsum("nij,nj->ni", what, v)
        Wvp = np.einsum("nij,nj->ni", what, vp)
        g = np.einsum("ni,ni->n", u, Wv)
        gu = np.einsum("ni,ni->n", up, Wv)
        gv = np.einsum("ni,ni->n", u, Wvp)
        guv = np.einsum("ni,ni->n", up, Wvp)
        du, dv = tu - tu0, tv - tv0
        f1 = g
        f2 = du * gv - dv * gu
        j11, j12 = gu, gv
        j21 = gv + du * guv + dv * g
        j22 = -du * g - gu - dv * guv
        det = j11 * j22 - j12 * j21
        det = np.where(np.abs(det) < 1e-14, np.copysign(1e-14, det + 1e-300), det)
        step_u = np.clip((f1 * j22 - f2 * j12) / det, -0.3, 0.3)
        step_v = np.clip((j11 * f2 - j21 * f1) / det, -0.3, 0.3)
        tu = tu - step_u
        tv = tv - step_v
    u = np.stack([np.cos(tu), np.sin(tu)], axis=-1)
    v = np.stack([np.cos(tv), np.sin(tv)], axis=-1)
    g = np.einsum("ni,nij,nj->n", u, what, v)
    scale = (
        np.abs(np.einsum("ni,nij,nj->n", u, what, u))
        + np.abs(np.einsum("ni,nij,nj->n", v, what, v))
        + CONJ_EPS
    )
    ok = (np.abs(g) <= 1e-6 * scale) & (np.abs(np.sin(tu - tv)) > 1e-6)
    if not ok.all():
        sel = ~ok
        nu = u0[sel] / np.linalg.norm(u0[sel], axis=1, keepdims=True)
        u[sel] = nu
        v[sel] = _conjugate_partner(what[sel], nu, v0[sel])
    return u, v


# ---------------------------------------------------------------------------
# direct field optimization


def _parse_features(features, vis_mask):
    feat = {}
    for xy, t in features:
        x, y = int(xy[0]), int(xy[1])
        t = np.asarray(t, dtype=float)
        n = np.linalg.norm(t)
        if n == 0 or not np.all(np.isfinite(t)):
            raise InputError("feature tangent must be a nonzero 2-vector")
        t = t / n
        if not (0 <= y < vis_mask.shape[0] and 0 <= x < vis_mask.shape[1]):
            raise InputError(f"feature pixel ({x}, {y}) outside the canvas")
        if not vis_mask[y, x]:
            raise InputError(f"feature pixel ({x}, {y}) outside the visible region")
        key = (y, x)
        if key in feat:
            cross = abs(feat[key][0] * t[1] - feat[key][1] * t[0])
            if cross > 1e-9:
                raise InputError(f"contradictory feature directions at pixel ({x}, {y})")
            continue
        feat[key] = t
    return feat


def _mask_pair_ids(idx_grid, mask):
    pairs = []
    for dr, dc in ((0, 1), (1, 0)):
        a = mask[: mask.shape[0] - dr, : mask.shape[1] - dc]
        b = mask[dr:, dc:]
        both = a & b
        ia = idx_grid[: mask.shape[0] - dr, : mask.shape[1] - dc][both]
        ib = idx_grid[dr:, dc:][both]
        pairs.append((ia, ib))
    ia = np.concatenate([p[0] for p in pairs]) if pairs else np.zeros(0, int)
    ib = np.concatenate([p[1] for p in pairs]) if pairs else np.zeros(0, int)
    return ia, ib


def optimize_field(net, masks, band=None, features=(), frame=None, rounds=_ROUNDS):
    """Smooth conjugate cross field on the canvas, aligned to feature strokes.

    Alternates a linear smoothing solve in encoding space (feature pixels
    held fixed) with a per-pixel projection onto unit conjugate pairs of
    the surface; the attachment to the projected field is ramped tenfold
    each round so the final field is conjugate almost everywhere while
    staying as smooth as the constraints allow.  Deterministic.
    """
    frame = frame or camera.CanvasFrame()
    vis_mask = masks.visible
    occ_mask = masks.occluded
    if not vis_mask.any():
        raise InputError("empty visible mask")
    feat = _parse_features(features, vis_mask)

    raster = camera.rasterize_surface(
        lambda u, v: splinekit.eval_surface_many(net, u, v, with_normals=False),
        frame,
    )
    geoms = [_layer_geometry(net, vis_mask, raster.param1)]
    layer_masks = [vis_mask]
    if occ_mask.any():
        geoms.append(_layer_geometry(net, occ_mask, raster.param2,
                                     fallback=raster.param1))
        layer_masks.append(occ_mask)

    counts = [g.rows.size for g in geoms]
    offsets = np.concatenate([[0], np.cumsum(counts)])[:-1]
    n_total = int(sum(counts))

    idx_grids = []
    for g, mask, off in zip(geoms, layer_masks, offsets):
        grid = np.full(mask.shape, -1, dtype=np.int64)
        grid[g.rows, g.cols] = off + np.arange(g.rows.size)
        idx_grids.append(grid)

    # smoothness pairs per layer, each with its own mean normalization
    smo = []
    for grid, mask in zip(idx_grids, layer_masks):
        ia, ib = _mask_pair_ids(grid, mask)
        if ia.size:
            smo.append((ia, ib, np.sqrt(W_SMOOTH / ia.size)))

    cons = []
    if band is not None and len(geoms) == 2:
        eligible = layer_masks[0] & layer_masks[1]
        ri, ci, rj, cj = band.omega_pairs(eligible)
        if ri.size:
            w = np.sqrt(W_CONS / ri.size)
            cons.append((idx_grids[1][ri, ci], idx_grids[0][rj, cj], w))
            cons.append((idx_grids[0][ri, ci], idx_grids[1][rj, cj], w))

    feat_ids = np.array(
        [idx_grids[0][y, x] for (y, x) in feat], dtype=np.int64
    )
    feat_dirs = np.array([feat[k] for k in feat], dtype=float).reshape(-1, 2)
    is_fixed = np.zeros(n_total, dtype=bool)
    is_fixed[feat_ids] = True

    curved = np.concatenate([g.curved for g in geoms])
    what = np.concatenate([g.what for g in geoms])
    attach_on = curved & ~is_fixed

    # components with neither a feature nor a curvature anchor would make
    # the smoothing singular; pin them to their initial cross instead
    rows_i = np.concatenate([p[0] for p in smo + cons]) if smo + cons else np.zeros(0, int)
    rows_j = np.concatenate([p[1] for p in smo + cons]) if smo + cons else np.zeros(0, int)
    adj = sp.coo_matrix(
        (np.ones(rows_i.size), (rows_i, rows_j)), shape=(n_total, n_total)
    )
    n_comp, labels = csgraph.connected_components(adj, directed=False)
    anchored = np.zeros(n_comp, dtype=bool)
    np.add.at(anchored, labels[is_fixed | attach_on], True)
    free_comp = ~anchored[labels]
    attach_on |= free_comp & ~is_fixed

    # initial pairs: curvature eigenframe where available, axes otherwise
    u_cur = np.tile([1.0, 0.0], (n_total, 1))
    v_cur = np.tile([0.0, 1.0], (n_total, 1))
    if curved.any():
        ue, ve = _eigen_pairs(what[curved])
        u_cur[curved] = ue
        v_cur[curved] = ve
    if feat_ids.size:
        u_cur[feat_ids] = feat_dirs
        v_cur[feat_ids] = _conjugate_partner(
            what[feat_ids], feat_dirs, _rot90(feat_dirs)
        )
    c_proj = encode(u_cur, v_cur)

    att_w = []
    for off, cnt in zip(offsets, counts):
        on = attach_on[off : off + cnt]
        att_w.append(np.sqrt(1.0 / on.sum()) if on.any() else 0.0)

    free_col = np.cumsum(~is_fixed) - 1
    n_free = int((~is_fixed).sum())

    for r in range(rounds):
        w_att = _ATTACH_BASE * 10.0**r
        data_i, data_j, data_v = [], [], []
        b_rows = []
        row = 0

        def _pair_rows(ia, ib, w):
            nonlocal row
            fa, fb = is_fixed[ia], is_fixed[ib]
            both = ~fa & ~fb
            n_rows = int(both.sum()) + int((fa & ~fb).sum()) + int((~fa & fb).sum())
            rr = np.arange(row, row + int(both.sum()))
            data_i.append(np.repeat(rr, 2))
            cols = np.stack([free_col[ia[both]], free_col[ib[both]]], axis=1).ravel()
            data_j.append(cols)
            data_v.append(np.tile([w, -w], rr.size))
            b_rows.append(np.zeros((rr.size, 4)))
            row += rr.size
            sel = fa & ~fb
            if sel.any():
                rr = np.arange(row, row + int(sel.sum()))
                data_i.append(rr)
                data_j.append(free_col[ib[sel]])
                data_v.append(np.full(rr.size, -w))
                b_rows.append(-w * c_proj[ia[sel]])
                row += rr.size
            sel = ~fa & fb
            if sel.any():
                rr = np.arange(row, row + int(sel.sum()))
                data_i.append(rr)
                data_j.append(free_col[ia[sel]])
                data_v.append(np.full(rr.size, w))
                b_rows.append(w * c_proj[ib[sel]])
                row += rr.size
            return n_rows

        for ia, ib, w in smo + cons:
            _pair_rows(ia, ib, w)
        for off, cnt, wl in zip(offsets, counts, att_w):
            if wl == 0.0:
                continue
            on = np.flatnonzero(attach_on[off : off + cnt]) + off
            w = np.sqrt(w_att) * wl
            rr = np.arange(row, row + on.size)
            data_i.append(rr)
            data_j.append(free_col[on])
            data_v.append(np.full(on.size, w))
            b_rows.append(w * c_proj[on])
            row += on.size

        R = sp.coo_matrix(
            (np.concatenate(data_v), (np.concatenate(data_i), np.concatenate(data_j))),
            shape=(row, n_free),
        ).tocsr()
        b = np.concatenate(b_rows, axis=0)
        AtA = (R.T @ R).tocsc()
        Atb = R.T @ b
        x = spla.splu(AtA).solve(Atb)

        c_full = np.empty((n_total, 4))
        c_full[~is_fixed] = x
        c_full[is_fixed] = c_proj[is_fixed]

        # degenerate interpolants (vanishing product coefficient) cannot be
        # decoded; keep their previous projection
        dead = (c_full[:, 2] == 0.0) & (c_full[:, 3] == 0.0)
        c_full[dead] = c_proj[dead]
        u0, v0 = decode_many(c_full)

        u_new = np.array(u0)
        v_new = np.array(v0)
        plain = ~curved & ~is_fixed
        if plain.any():
            nu = u0[plain] / np.linalg.norm(u0[plain], axis=1, keepdims=True)
            nv = v0[plain] / np.linalg.norm(v0[plain], axis=1, keepdims=True)
            cross = np.abs(nu[:, 0] * nv[:, 1] - nu[:, 1] * nv[:, 0])
            nv = np.where((cross < 1e-6)[:, None], _rot90(nu), nv)
            u_new[plain] = nu
            v_new[plain] = nv
        target = curved & ~is_fixed
        if target.any():
            u_new[target], v_new[target] = _project_pairs(
                what[target], u0[target], v0[target]
            )
        if feat_ids.size:
            u_new[feat_ids] = feat_dirs
            v_new[feat_ids] = _conjugate_partner(
                what[feat_ids], feat_dirs, v0[feat_ids]
            )
        c_proj = encode(u_new, v_new)

    out = []
    for g, mask, off, cnt in zip(geoms, layer_masks, offsets, counts):
        enc = np.full(mask.shape + (4,), np.nan)
        enc[g.rows, g.cols] = c_proj[off : off + cnt]
        out.append(enc)
    if len(out) == 1:
        return FieldMap(visible=out[0], visible_mask=vis_mask).validate()
    return FieldMap(visible=out[0], visible_mask=vis_mask,
                    occluded=out[1], occluded_mask=occ_mask).validate()


# ---------------------------------------------------------------------------
# conjugacy diagnostics


def _layer_conjugacy(net, enc, mask, uv_grid, fallback=None):
    geom = _layer_geometry(net, mask, uv_grid, fallback=fallback)
    u, v = decode_many(enc[geom.rows, geom.cols])
    m12 = np.abs(np.einsum("ni,nij,nj->n", u, geom.what, v))
    m11 = np.abs(np.einsum("ni,nij,nj->n", u, geom.what, u))
    m22 = np.abs(np.einsum("ni,nij,nj->n", v, geom.what, v))
    return m12, m11, m22, geom.usable


def conjugacy_ok_fraction(field, net, frame=None, tol=CONJ_TOL):
    """Share of usable mask samples whose decoded pair is conjugate.

    A sample passes when |II(d1,d2)| <= tol * (|II(d1,d1)| + |II(d2,d2)| + eps)
    with the fundamental form taken on the lifted pair.  Pixels where the
    tangent plane is edge-on to the view carry no usable projection and are
    left out.
    """
    frame = frame or camera.CanvasFrame()
    raster = camera.rasterize_surface(
        lambda u, v: splinekit.eval_surface_many(net, u, v, with_normals=False),
        frame,
    )
    ok = 0
    total = 0
    for name, enc, mask in field.layers():
        uv = raster.param1 if name == "visible" else raster.param2
        fb = None if name == "visible" else raster.param1
        m12, m11, m22, usable = _layer_conjugacy(net, enc, mask, uv, fallback=fb)
        good = m12 <= tol * (m11 + m22 + CONJ_EPS)
        ok += int(np.sum(good & usable))
        total += int(usable.sum())
    return ok / total if total else 1.0


def field_objective(field, net, masks=None, band=None, frame=None):
    """Solver merit: weighted smoothness + consistency + conjugacy penalty.

    The penalty is the mean squared normalized conjugacy residual (clipped
    at one) over usable samples, so a field that ignores the surface pays
    for it even when it is perfectly smooth.
    """
    frame = frame or camera.CanvasFrame()
    rep = field_energy(field, masks=masks, band=band)
    raster = camera.rasterize_surface(
        lambda u, v: splinekit.eval_surface_many(net, u, v, with_normals=False),
        frame,
    )
    num = 0.0
    total = 0
    for name, enc, mask in field.layers():
        uv = raster.param1 if name == "visible" else raster.param2
        fb = None if name == "visible" else raster.param1
        m12, m11, m22, usable = _layer_conjugacy(net, enc, mask, uv, fallback=fb)
        r = np.minimum(m12 / (m11 + m22 + CONJ_EPS), 1.0)
        num += float(np.sum(r[usable] ** 2))
        total += int(usable.sum())
    penalty = num / total if total else 0.0
    return W_SMOOTH * rep.smoothness + W_CONS * rep.consistency + penalty


# ---------------------------------------------------------------------------
# lifting to the surface


@dataclass
class TangentField3D:
    pixels: np.ndarray      # (n, 2) row, col
    d1: np.ndarray          # (n, 3)
    d2: np.ndarray
    degenerate: np.ndarray  # (n,) samples where the tangent plane is edge-on


def lift_vectors(vecs, normals, view=(0.0, 0.0, 1.0)):
    """Tangent vectors whose orthographic projection along ``view`` is ``vecs``.

    Returns (lifted, degenerate); degenerate samples (tangent plane contains
    the view direction) hold NaN.
    """
    vecs = np.atleast_2d(np.asarray(vecs, dtype=float))
    normals = np.atleast_2d(np.asarray(normals, dtype=float))
    view = np.asarray(view, dtype=float)
    if view[2] == 0:
        raise InputError("view direction parallel to the canvas")
    n = vecs.shape[0]
    M = np.zeros((n, 3, 3))
    M[:, 0, 0] = 1.0
    M[:, 0, 2] = -view[0] / view[2]
    M[:, 1, 1] = 1.0
    M[:, 1, 2] = -view[1] / view[2]
    M[:, 2, :] = normals
    rhs = np.zeros((n, 3))
    rhs[:, :2] = vecs
    det = np.linalg.det(M)
    degenerate = np.abs(det) < 1e-9
    out = np.full((n, 3), np.nan)
    if np.any(~degenerate):
        out[~degenerate] = np.linalg.solve(M[~degenerate], rhs[~degenerate, :, None])[
            ..., 0
        ]
    return out, degenerate


def lift_to_tangent(field, net, view=(0.0, 0.0, 1.0), frame=None):
    """Lift each layer's decoded pair onto the surface tangent planes."""
    frame = frame or camera.CanvasFrame()
    raster = camera.rasterize_surface(
        lambda u, v: splinekit.eval_surface_many(net, u, v, with_normals=False),
        frame,
    )
    out = {}
    for name, enc, mask in field.layers():
        uv = raster.param1 if name == "visible" else raster.param2
        fb = None if name == "visible" else raster.param1
        geom = _layer_geometry(net, mask, uv, fallback=fb)
        u, v = decode_many(enc[geom.rows, geom.cols])
        d1, bad1 = lift_vectors(u, geom.normal, view)
        d2, bad2 = lift_vectors(v, geom.normal, view)
        out[name] = TangentField3D(
            pixels=np.stack([geom.rows, geom.cols], axis=1),
            d1=d1,
            d2=d2,
            degenerate=bad1 | bad2 | ~geom.usable,
        )
    return out


# ---------------------------------------------------------------------------
# Dirichlet energy on a triangle mesh


def dirichlet_smoothness(enc, vertices, faces):
    """Cotangent-weighted Dirichlet energy of per-vertex encodings."""
    V = np.asarray(vertices, dtype=float)
    F = np.asarray(faces, dtype=np.int64)
    C = np.asarray(enc, dtype=float)
    total = 0.0
    for k in range(3):
        i = F[:, k]
        j = F[:, (k + 1) % 3]
        o = F[:, (k + 2) % 3]
        e1 = V[i] - V[o]
        e2 = V[j] - V[o]
        cr = np.linalg.norm(np.cross(e1, e2), axis=-1)
        cot = np.einsum("nd,nd->n", e1, e2) / np.maximum(cr, 1e-300)
        d = C[i] - C[j]
        total += 0.5 * float(np.sum(cot * np.sum(d * d, axis=-1)))
    return total


# ---------------------------------------------------------------------------
# inspection


def glyph_svg(field, every=8, arm=0.42):
    """SVG cross plot of the decoded field, one glyph every ``every`` pixels."""
    h, w = field.visible_mask.shape
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}" '
        f'width="{w}" height="{h}">'
    ]
    colors = {"visible": "#111111", "occluded": "#bb4422"}
    for name, enc, mask in field.layers():
        rows, cols = np.nonzero(mask)
        keep = (rows % every == 0) & (cols % every == 0)
        rows, cols = rows[keep], cols[keep]
        if rows.size == 0:
            continue
        u, v = decode_many(enc[rows, cols])
        reach = every * arm
        col = colors[name]
        for rr, cc, du, dv in zip(rows, cols, u, v):
            cx, cy = cc + 0.5, rr + 0.5
            for d in (du, dv):
                n = np.hypot(d[0], d[1])
                if n == 0:
                    continue
                dx, dy = reach * d[0] / n, -reach * d[1] / n
                parts.append(
                    f'<line x1="{cx - dx:.2f}" y1="{cy - dy:.2f}" '
                    f'x2="{cx + dx:.2f}" y2="{cy + dy:.2f}" '
                    f'stroke="{col}" stroke-width="0.6"/>'
                )
    parts.append("</svg>")
    return "\n".join(parts)
