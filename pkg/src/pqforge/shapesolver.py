"""Per-pixel depth and normal recovery, energy evaluation, and surface fitting.

The sketch fixes which pixels carry visible and occluded layers; this module
fills those layers with depths and unit normals by minimizing smoothness,
normal/tangent compatibility, depth-sample attachment, and visible/occluded
consistency near contour lines, then fits one bicubic patch through the
unprojected layer points.

Depth convention: d = DEPTH_OFFSET - z_cam, so d is positive and grows away
from the viewer.  Normals live in the camera frame (z toward the viewer);
front-facing layers keep n_z >= 0, back-facing n_z <= 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import csgraph
from scipy.sparse import linalg as spla

from . import camera
from . import sketchdoc as sd
from . import splinekit
from .errors import InputError
from .visibility import VisClass

_FRONT_CLASSES = (VisClass.VISIBLE_FRONT, VisClass.OCCLUDED_FRONT)
_VISIBLE_CLASSES = (VisClass.VISIBLE_FRONT, VisClass.VISIBLE_BACK)

# world z expressed in the camera frame; surfaces are world-up height fields,
# so projecting along this axis gives an injective parameter domain
W0_CAM = np.array([0.0, np.sqrt(0.5), np.sqrt(0.5)])
E1_CAM = np.array([1.0, 0.0, 0.0])
E2_CAM = np.array([0.0, np.sqrt(0.5), -np.sqrt(0.5)])


@dataclass
class SolverConfig:
    sigma_d: float = 1.0
    sigma_n: float = 0.1
    tau_d: float = 0.01
    tau_n: float = 0.001
    w_smo: float = 0.2
    w_comp: float = 0.1
    w_dep: float = 10.0
    w_cons: float = 0.001
    gamma_d: float = 1.0
    gamma_n: float = 0.1
    delta: float = camera.PIXEL_DELTA
    tangency_weight: float = 1.0
    tangency_radius: float = 2.0
    gauge_depth: float = 5.0
    max_iter: int = 200
    tol: float = 1e-6
    cg_iters: int = 300

    def __post_init__(self):
        for name in ("sigma_d", "sigma_n", "tau_d", "tau_n", "w_smo", "w_comp",
                     "w_dep", "w_cons", "gamma_d", "gamma_n"):
            if getattr(self, name) < 0:
                raise InputError(f"weight {name} must be non-negative")


@dataclass
class HeightFieldLayer:
    """One depth/normal map defined exactly on its class mask."""

    vis_class: VisClass
    mask: np.ndarray
    depth: np.ndarray  # full canvas, NaN outside the mask
    normal: np.ndarray  # (size, size, 3), NaN outside the mask

    def validate(self):
        d = self.depth[self.mask]
        n = self.normal[self.mask]
        if not np.all(np.isfinite(d)) or not np.all(np.isfinite(n)):
            raise InputError("layer has undefined values inside its mask")
        if np.any(d <= 0):
            raise InputError("layer depths must be positive")
        if np.any(np.abs(np.linalg.norm(n, axis=1) - 1.0) > 1e-6):
            raise InputError("layer normals must be unit length")

    def copy(self):
        return HeightFieldLayer(
            self.vis_class, self.mask.copy(), self.depth.copy(), self.normal.copy()
        )


@dataclass
class EnergyReport:
    data: float
    smoothness: float
    compatibility: float
    depth_sample: float
    consistency: float
    total: float

    @classmethod
    def build(cls, config, data, smoothness, compatibility, depth_sample, consistency):
        total = (
            data
            + config.w_smo * smoothness
            + config.w_comp * compatibility
            + config.w_dep * depth_sample
            + config.w_cons * consistency
        )
        return cls(data, smoothness, compatibility, depth_sample, consistency, total)

    def to_dict(self):
        return {
            "data": self.data,
            "smoothness": self.smoothness,
            "compatibility": self.compatibility,
            "depth_sample": self.depth_sample,
            "consistency": self.consistency,
            "total": self.total,
        }


def _shift_pairs(mask, dr, dc):
    """Pixel pairs (i, j) with j = i + (dr, dc), both inside the mask."""
    h, w = mask.shape
    rr, cc = np.nonzero(mask)
    r2 = rr + dr
    c2 = cc + dc
    ok = (r2 >= 0) & (r2 < h) & (c2 >= 0) & (c2 < w)
    rr, cc, r2, c2 = rr[ok], cc[ok], r2[ok], c2[ok]
    ok = mask[r2, c2]
    return rr[ok], cc[ok], r2[ok], c2[ok]


def eval_smoothness(layer, config=None):
    """Mean squared depth/normal gap over 4-connected in-mask pixel pairs."""
    cfg = config or SolverConfig()
    total = 0.0
    m = 0
    for dr, dc in ((0, 1), (1, 0)):
        ri, ci, rj, cj = _shift_pairs(layer.mask, dr, dc)
        if ri.size == 0:
            continue
        dd = layer.depth[ri, ci] - layer.depth[rj, cj]
        dn = layer.normal[ri, ci] - layer.normal[rj, cj]
        total += cfg.tau_d * float(np.sum(dd * dd)) + cfg.tau_n * float(np.sum(dn * dn))
        m += ri.size
    return total / m if m else 0.0


def _tangent_dots(layer, delta):
    """Per-pair n.t residuals for the x (right) and y (up) tangents."""
    out = []
    for (dr, dc), axis in (((0, 1), 0), ((-1, 0), 1)):
        ri, ci, rj, cj = _shift_pairs(layer.mask, dr, dc)
        if ri.size == 0:
            out.append(np.zeros(0))
            continue
        # z = DEPTH_OFFSET - d, so z_j - z_i = d_i - d_j
        slope = (layer.depth[ri, ci] - layer.depth[rj, cj]) / delta
        n = layer.normal[ri, ci]
        out.append(n[:, axis] + n[:, 2] * slope)
    return out


def eval_compatibility(layer, delta=camera.PIXEL_DELTA):
    """Mean squared normal-tangent dot for finite-difference tangents."""
    rx, ry = _tangent_dots(layer, delta)
    val = 0.0
    if rx.size:
        val += float(np.mean(rx * rx))
    if ry.size:
        val += float(np.mean(ry * ry))
    return val


def _omega_values(vis_layer, occ_layer, band):
    eligible = vis_layer.mask & occ_layer.mask
    ri, ci, rj, cj = band.omega_pairs(eligible)
    return ri, ci, rj, cj


def eval_consistency(vis_layer, occ_layer, band, config=None):
    """Mean cross-layer depth/normal gap over the contour-band pair set."""
    cfg = config or SolverConfig()
    ri, ci, rj, cj = _omega_values(vis_layer, occ_layer, band)
    if ri.size == 0:
        return 0.0
    dv_i = vis_layer.depth[ri, ci]
    do_j = occ_layer.depth[rj, cj]
    do_i = occ_layer.depth[ri, ci]
    dv_j = vis_layer.depth[rj, cj]
    nv_i = vis_layer.normal[ri, ci]
    no_j = occ_layer.normal[rj, cj]
    no_i = occ_layer.normal[ri, ci]
    nv_j = vis_layer.normal[rj, cj]
    val = cfg.gamma_d * ((dv_i - do_j) ** 2 + (do_i - dv_j) ** 2)
    val = val + cfg.gamma_n * (
        np.sum((nv_i - no_j) ** 2, axis=1) + np.sum((no_i - nv_j) ** 2, axis=1)
    )
    return float(np.mean(val))


def _combined_side(layers, classes):
    """Merge the (disjoint) class layers of one side into a single field."""
    chosen = [layers[c] for c in classes if c in layers]
    if not chosen:
        return None
    base = chosen[0]
    mask = np.zeros_like(base.mask)
    depth = np.full_like(base.depth, np.nan)
    normal = np.full_like(base.normal, np.nan)
    for lay in chosen:
        mask |= lay.mask
        depth[lay.mask] = lay.depth[lay.mask]
        normal[lay.mask] = lay.normal[lay.mask]
    return HeightFieldLayer(base.vis_class, mask, depth, normal)


def _sample_pixel(masks, s):
    """Nearest masked pixel of the sample's side for a depth sample."""
    row = int(np.clip(round(s.y), 0, masks[0].shape[0] - 1))
    col = int(np.clip(round(s.x), 0, masks[0].shape[1] - 1))
    union = np.zeros_like(masks[0])
    for m in masks:
        union |= m
    if union[row, col]:
        return row, col
    if not union.any():
        return None
    rr, cc = np.nonzero(union)
    k = np.argmin((rr - row) ** 2 + (cc - col) ** 2)
    return int(rr[k]), int(cc[k])


def eval_full(pred, gt, samples, config=None, band=None):
    """Energy report of predicted layers against ground truth.

    ``pred`` and ``gt`` are dicts keyed by VisClass with matching masks.
    """
    cfg = config or SolverConfig()
    if set(pred) != set(gt):
        raise InputError("predicted and ground-truth layer sets differ")
    data_num = 0.0
    data_cnt = 0
    for vc, lp in pred.items():
        lg = gt[vc]
        if not np.array_equal(lp.mask, lg.mask):
            raise InputError(f"mask mismatch for layer {vc.value}")
        dd = lp.depth[lp.mask] - lg.depth[lg.mask]
        dn = lp.normal[lp.mask] - lg.normal[lg.mask]
        data_num += cfg.sigma_d * float(np.sum(dd * dd)) + cfg.sigma_n * float(
            np.sum(dn * dn)
        )
        data_cnt += dd.size
    data = data_num / data_cnt if data_cnt else 0.0

    smo = sum(eval_smoothness(lay, cfg) for lay in pred.values())
    comp = sum(eval_compatibility(lay, cfg.delta) for lay in pred.values())

    dep = 0.0
    if samples:
        resid = []
        for s in samples:
            side = (
                _VISIBLE_CLASSES
                if s.layer == "visible"
                else (VisClass.OCCLUDED_FRONT, VisClass.OCCLUDED_BACK)
            )
            lays = [pred[c] for c in side if c in pred]
            if not lays:
                continue
            px = _sample_pixel([l.mask for l in lays], s)
            if px is None:
                continue
            for lay in lays:
                if lay.mask[px]:
                    resid.append(lay.depth[px] - s.depth)
                    break
        if resid:
            dep = float(np.mean(np.square(resid)))

    cons = 0.0
    if band is not None:
        vis = _combined_side(pred, _VISIBLE_CLASSES)
        occ = _combined_side(pred, (VisClass.OCCLUDED_FRONT, VisClass.OCCLUDED_BACK))
        if vis is not None and occ is not None:
            cons = eval_consistency(vis, occ, band, cfg)

    return EnergyReport.build(cfg, data, smo, comp, dep, cons)


# ---------------------------------------------------------------------------
# the variational solver


def _fd_normals(depth, mask, delta, sign):
    """Finite-difference unit normals of a depth layer, oriented by sign."""
    size = mask.shape[0]
    z = camera.z_from_depth(depth)
    z = np.where(mask, z, np.nan)
    gx = np.full_like(z, 0.0)
    gy = np.full_like(z, 0.0)
    zr = np.roll(z, -1, axis=1)
    zl = np.roll(z, 1, axis=1)
    zu = np.roll(z, 1, axis=0)
    zd = np.roll(z, -1, axis=0)
    # central where both neighbors exist, one-sided otherwise
    ok_r = np.isfinite(zr)
    ok_l = np.isfinite(zl)
    gx = np.where(ok_r & ok_l, (zr - zl) / (2 * delta), 0.0)
    gx = np.where(ok_r & ~ok_l, (zr - z) / delta, gx)
    gx = np.where(~ok_r & ok_l, (z - zl) / delta, gx)
    ok_u = np.isfinite(zu)
    ok_d = np.isfinite(zd)
    gy = np.where(ok_u & ok_d, (zu - zd) / (2 * delta), 0.0)
    gy = np.where(ok_u & ~ok_d, (zu - z) / delta, gy)
    gy = np.where(~ok_u & ok_d, (z - zd) / delta, gy)
    n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
    n = np.where(np.isfinite(n), n, 0.0)
    n[..., 2] = np.where(mask, n[..., 2], 0.0)
    nrm = np.linalg.norm(n, axis=-1)
    nrm = np.where(nrm < 1e-14, 1.0, nrm)
    n = n / nrm[..., None]
    if sign < 0:
        n = -n
    return n


class _Problem:
    """Assembled quadratic structure for one sketch."""

    def __init__(self, doc, masks, band, config, raster=None):
        self.cfg = config
        self.size = doc.canvas
        if raster is None:
            raster = sd.rasterize(doc)
        self.raster = raster
        by_class = masks.by_class()
        self.classes = [vc for vc in VisClass if by_class[vc].any()]
        if not any(vc in self.classes for vc in _VISIBLE_CLASSES):
            raise InputError("sketch has no visible region to solve for")
        self.masks = {vc: by_class[vc] for vc in self.classes}

        self.idx = {}
        self.offsets = {}
        n = 0
        for vc in self.classes:
            m = self.masks[vc]
            ids = np.full(m.shape, -1, dtype=np.int64)
            cnt = int(m.sum())
            ids[m] = np.arange(n, n + cnt)
            self.idx[vc] = ids
            self.offsets[vc] = (n, cnt)
            n += cnt
        self.n = n

        self.sign = {
            vc: (1.0 if vc in _FRONT_CLASSES else -1.0) for vc in self.classes
        }

        # smoothness pairs per class, with the per-layer pair count
        self.smo = []
        for vc in self.classes:
            pairs = []
            for dr, dc in ((0, 1), (1, 0)):
                ri, ci, rj, cj = _shift_pairs(self.masks[vc], dr, dc)
                pairs.append((self.idx[vc][ri, ci], self.idx[vc][rj, cj]))
            m = sum(p[0].size for p in pairs)
            if m:
                self.smo.append((vc, np.concatenate([p[0] for p in pairs]),
                                 np.concatenate([p[1] for p in pairs]), m))

        # compatibility pairs per class and axis
        self.comp = []
        for vc in self.classes:
            for (dr, dc), axis in (((0, 1), 0), ((-1, 0), 1)):
                ri, ci, rj, cj = _shift_pairs(self.masks[vc], dr, dc)
                if ri.size:
                    self.comp.append(
                        (vc, axis, self.idx[vc][ri, ci], self.idx[vc][rj, cj], ri.size)
                    )

        # depth samples resolved to unknown ids
        self.samples = []
        for s in doc.samples:
            side = _VISIBLE_CLASSES if s.layer == "visible" else (
                VisClass.OCCLUDED_FRONT, VisClass.OCCLUDED_BACK)
            lays = [vc for vc in side if vc in self.classes]
            if not lays:
                continue
            px = _sample_pixel([self.masks[vc] for vc in lays], s)
            if px is None:
                continue
            for vc in lays:
                if self.masks[vc][px]:
                    self.samples.append((int(self.idx[vc][px]), float(s.depth)))
                    break
        self.m_samples = len(self.samples)

        # consistency pairs over the contour band
        self.cons = None
        if band is not None:
            vis_mask = np.zeros((self.size, self.size), dtype=bool)
            occ_mask = np.zeros_like(vis_mask)
            vis_ids = np.full(vis_mask.shape, -1, dtype=np.int64)
            occ_ids = np.full(vis_mask.shape, -1, dtype=np.int64)
            vis_sign = 1.0
            for vc in self.classes:
                if vc in _VISIBLE_CLASSES:
                    vis_mask |= self.masks[vc]
                    vis_ids[self.masks[vc]] = self.idx[vc][self.masks[vc]]
                else:
                    occ_mask |= self.masks[vc]
                    occ_ids[self.masks[vc]] = self.idx[vc][self.masks[vc]]
            eligible = vis_mask & occ_mask
            ri, ci, rj, cj = band.omega_pairs(eligible)
            if ri.size:
                self.cons = (
                    vis_ids[ri, ci], occ_ids[rj, cj],
                    occ_ids[ri, ci], vis_ids[rj, cj],
                    ri.size,
                )

        # contour tangency pixels
        contour = np.zeros((self.size, self.size), dtype=bool)
        for i, s in enumerate(doc.strokes):
            if s.kind is sd.StrokeKind.CONTOUR:
                contour |= raster.stroke_center[i]
        self.tang = np.zeros(0, dtype=np.int64)
        if contour.any():
            near = ndimage.distance_transform_edt(~contour) <= config.tangency_radius
            ids = []
            for vc in self.classes:
                sel = near & self.masks[vc]
                ids.append(self.idx[vc][sel])
            self.tang = np.concatenate(ids) if ids else self.tang
        self.m_tang = int(self.tang.size)

        self._build_gauge()

    def _build_gauge(self):
        """Pin the mean depth of components no sample or coupling anchors."""
        cfg = self.cfg
        rows = []
        cols = []
        for _, ia, ib, _ in self.smo:
            rows.append(ia)
            cols.append(ib)
        for _, _, ia, ib, _ in self.comp:
            rows.append(ia)
            cols.append(ib)
        if self.cons is not None:
            vi, oj, oi, vj, _ = self.cons
            rows.extend([vi, oi])
            cols.extend([oj, vj])
        if rows:
            r = np.concatenate(rows)
            c = np.concatenate(cols)
            adj = sparse.coo_matrix(
                (np.ones(r.size), (r, c)), shape=(self.n, self.n)
            )
            ncomp, labels = csgraph.connected_components(adj, directed=False)
        else:
            ncomp, labels = self.n, np.arange(self.n)
        anchored = np.zeros(ncomp, dtype=bool)
        for uid, _ in self.samples:
            anchored[labels[uid]] = True
        self.gauge_groups = []
        for comp in range(ncomp):
            if not anchored[comp]:
                self.gauge_groups.append(np.nonzero(labels == comp)[0])
        self.gauge_fixed = bool(self.gauge_groups)

    # -- depth block --------------------------------------------------------

    def _depth_system(self, nvec):
        cfg = self.cfg
        rows, cols, vals, rhs = [], [], [], []
        nrow = 0

        def add_rows(ia, ib, wa, wb, b):
            nonlocal nrow
            r = np.arange(nrow, nrow + ia.size)
            rows.append(np.concatenate([r, r]))
            cols.append(np.concatenate([ia, ib]))
            vals.append(np.concatenate([wa, wb]))
            rhs.append(b)
            nrow += ia.size

        def add_single(ia, wa, b):
            nonlocal nrow
            r = np.arange(nrow, nrow + ia.size)
            rows.append(r)
            cols.append(ia)
            vals.append(wa)
            rhs.append(b)
            nrow += ia.size

        for vc, ia, ib, m in self.smo:
            w = np.sqrt(cfg.w_smo * cfg.tau_d / m)
            add_rows(ia, ib, np.full(ia.size, w), np.full(ia.size, -w),
                     np.zeros(ia.size))
        for vc, axis, ia, ib, m in self.comp:
            w = np.sqrt(cfg.w_comp / m)
            nz = nvec[ia, 2]
            na = nvec[ia, axis]
            coef = w * nz / cfg.delta
            add_rows(ia, ib, coef, -coef, -w * na)
        if self.m_samples:
            w = np.sqrt(cfg.w_dep / self.m_samples)
            ia = np.array([s[0] for s in self.samples], dtype=np.int64)
            target = np.array([s[1] for s in self.samples])
            add_single(ia, np.full(ia.size, w), w * target)
        if self.cons is not None:
            vi, oj, oi, vj, m = self.cons
            w = np.sqrt(cfg.w_cons * cfg.gamma_d / m)
            add_rows(vi, oj, np.full(vi.size, w), np.full(vi.size, -w),
                     np.zeros(vi.size))
            add_rows(oi, vj, np.full(oi.size, w), np.full(oi.size, -w),
                     np.zeros(oi.size))
        for grp in self.gauge_groups:
            r = np.full(grp.size, nrow)
            rows.append(r)
            cols.append(grp)
            vals.append(np.full(grp.size, 1.0 / grp.size))
            rhs.append(np.array([cfg.gauge_depth]))
            nrow += 1

        A = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nrow, self.n),
        )
        b = np.concatenate(rhs)
        return A, b

    def solve_depth(self, d, nvec):
        # the gauge rows are dense, so A^T A is never formed explicitly
        A, b = self._depth_system(nvec)
        At = A.T.tocsr()
        op = spla.LinearOperator(
            (self.n, self.n), matvec=lambda x: At @ (A @ x), dtype=float
        )
        rhs = At @ b
        diag = np.asarray(A.multiply(A).sum(axis=0)).ravel()
        diag = np.where(diag <= 0, 1.0, diag)
        pre = sparse.diags(1.0 / diag)
        x, _ = spla.cg(op, rhs, x0=d, rtol=1e-9, atol=0.0,
                       maxiter=self.cfg.cg_iters, M=pre)
        return x

    # -- normal block -------------------------------------------------------

    def _class_grids(self, d, nvec):
        """Full-canvas depth and normal grids per class for fast gathers."""
        depth = {}
        normal = {}
        for vc in self.classes:
            m = self.masks[vc]
            dg = np.full(m.shape, np.nan)
            dg[m] = d[self.idx[vc][m]]
            ng = np.full(m.shape + (3,), np.nan)
            ng[m] = nvec[self.idx[vc][m]]
            depth[vc] = dg
            normal[vc] = ng
        return depth, normal

    def update_normals(self, d, nvec):
        cfg = self.cfg
        n = nvec.copy()
        eye = np.eye(3)

        # FD proposals per class from the current depth
        fd = np.zeros_like(n)
        for vc in self.classes:
            m = self.masks[vc]
            dg = np.full(m.shape, np.nan)
            dg[m] = d[self.idx[vc][m]]
            nf = _fd_normals(dg, m, cfg.delta, self.sign[vc])
            fd[self.idx[vc][m]] = nf[m]

        # the local Hessian A does not depend on the normals; only the
        # neighbor attachment b = W n does, so A and W are built once and b
        # is refreshed by a sparse matvec before each color group
        deg = np.zeros(self.n)
        wr, wc, wv = [], [], []
        for vc, ia, ib, m in self.smo:
            w = cfg.w_smo * cfg.tau_n / m
            np.add.at(deg, ia, w)
            np.add.at(deg, ib, w)
            wr.extend([ia, ib])
            wc.extend([ib, ia])
            wv.extend([np.full(ia.size, w), np.full(ia.size, w)])
        if self.cons is not None:
            vi, oj, oi, vj, m = self.cons
            w = cfg.w_cons * cfg.gamma_n / m
            for ia, ib in ((vi, oj), (oi, vj)):
                np.add.at(deg, ia, w)
                np.add.at(deg, ib, w)
                wr.extend([ia, ib])
                wc.extend([ib, ia])
                wv.extend([np.full(ia.size, w), np.full(ia.size, w)])
        if wr:
            W = sparse.csr_matrix(
                (np.concatenate(wv), (np.concatenate(wr), np.concatenate(wc))),
                shape=(self.n, self.n),
            )
        else:
            W = sparse.csr_matrix((self.n, self.n))

        A = np.zeros((self.n, 3, 3))
        A[:, 0, 0] = deg
        A[:, 1, 1] = deg
        A[:, 2, 2] = deg
        for vc, axis, ia, ib, m in self.comp:
            w = cfg.w_comp / m
            t = np.zeros((ia.size, 3))
            t[:, axis] = 1.0
            t[:, 2] = (d[ia] - d[ib]) / cfg.delta
            np.add.at(A, ia, w * np.einsum("pi,pj->pij", t, t))
        if self.m_tang:
            ez = np.zeros((3, 3))
            ez[2, 2] = cfg.tangency_weight / self.m_tang
            np.add.at(A, self.tang, ez)

        # group id per unknown: checkerboard parity x side; no two unknowns
        # in a group interact, so per-pixel improvements add up globally
        group = np.zeros(self.n, dtype=np.int64)
        sign_arr = np.zeros(self.n)
        for vc in self.classes:
            m = self.masks[vc]
            rr, cc = np.nonzero(m)
            side = 0 if vc in _VISIBLE_CLASSES else 4
            group[self.idx[vc][m]] = side + 2 * (rr % 2) + (cc % 2)
            sign_arr[self.idx[vc][m]] = self.sign[vc]

        for g in range(8):
            sel = group == g
            if not np.any(sel):
                continue
            b = W @ n
            Ag = A[sel] + 1e-12 * eye
            bg = b[sel]
            cur = n[sel]
            try:
                sol = np.linalg.solve(Ag, bg[..., None])[..., 0]
            except np.linalg.LinAlgError:
                sol = cur.copy()
            nrm = np.linalg.norm(sol, axis=1)
            good = nrm > 1e-12
            sol = np.where(good[:, None], sol / np.where(good, nrm, 1.0)[:, None], cur)
            sg = sign_arr[sel]

            best = None
            best_f = None
            for c in (cur, sol, -sol, fd[sel]):
                c = c.copy()
                bad = c[:, 2] * sg < -1e-12
                c[bad] = cur[bad]
                f = np.einsum("pi,pij,pj->p", c, Ag, c) - 2 * np.einsum(
                    "pi,pi->p", bg, c
                )
                if best is None:
                    best, best_f = c, f
                else:
                    better = f < best_f - 1e-15
                    best = np.where(better[:, None], c, best)
                    best_f = np.where(better, f, best_f)
            n[sel] = best
        return n

    # -- objective ----------------------------------------------------------

    def objective(self, d, nvec):
        cfg = self.cfg
        total = 0.0
        for vc, ia, ib, m in self.smo:
            dd = d[ia] - d[ib]
            dn = nvec[ia] - nvec[ib]
            total += cfg.w_smo * (
                cfg.tau_d * float(np.sum(dd * dd)) + cfg.tau_n * float(np.sum(dn * dn))
            ) / m
        for vc, axis, ia, ib, m in self.comp:
            r = nvec[ia, axis] + nvec[ia, 2] * (d[ia] - d[ib]) / cfg.delta
            total += cfg.w_comp * float(np.sum(r * r)) / m
        if self.m_samples:
            r = np.array([d[uid] - t for uid, t in self.samples])
            total += cfg.w_dep * float(np.mean(r * r))
        if self.cons is not None:
            vi, oj, oi, vj, m = self.cons
            r1 = d[vi] - d[oj]
            r2 = d[oi] - d[vj]
            n1 = nvec[vi] - nvec[oj]
            n2 = nvec[oi] - nvec[vj]
            total += cfg.w_cons * (
                cfg.gamma_d * (float(np.sum(r1 * r1)) + float(np.sum(r2 * r2)))
                + cfg.gamma_n * (float(np.sum(n1 * n1)) + float(np.sum(n2 * n2)))
            ) / m
        if self.m_tang:
            nz = nvec[self.tang, 2]
            total += cfg.tangency_weight * float(np.mean(nz * nz))
        for grp in self.gauge_groups:
            r = float(np.mean(d[grp])) - cfg.gauge_depth
            total += r * r
        return total

    def initial_state(self):
        cfg = self.cfg
        if self.samples:
            base = float(np.mean([t for _, t in self.samples]))
        else:
            base = cfg.gauge_depth
        d = np.full(self.n, base)
        for vc in self.classes:
            own = [t for uid, t in self.samples
                   if self.offsets[vc][0] <= uid < self.offsets[vc][0] + self.offsets[vc][1]]
            if own:
                lo, cnt = self.offsets[vc]
                d[lo:lo + cnt] = float(np.mean(own))
        nvec = np.zeros((self.n, 3))
        for vc in self.classes:
            lo, cnt = self.offsets[vc]
            nvec[lo:lo + cnt, 2] = self.sign[vc]
        return d, nvec

    def unpack(self, d, nvec):
        layers = {}
        for vc in self.classes:
            m = self.masks[vc]
            depth = np.full(m.shape, np.nan)
            depth[m] = d[self.idx[vc][m]]
            normal = np.full(m.shape + (3,), np.nan)
            normal[m] = nvec[self.idx[vc][m]]
            layers[vc] = HeightFieldLayer(vc, m.copy(), depth, normal)
        return layers


@dataclass
class SolveResult:
    layers: dict
    report: EnergyReport
    gauge_fixed: bool
    iterations: int
    objective_trace: list = field(default_factory=list)


def solver_objective(doc, masks, band, layers, config=None, raster=None):
    """The solver's internal objective evaluated at the given layers."""
    cfg = config or SolverConfig()
    prob = _Problem(doc, masks, band, cfg, raster)
    d = np.zeros(prob.n)
    nvec = np.zeros((prob.n, 3))
    for vc in prob.classes:
        if vc not in layers:
            raise InputError(f"missing layer {vc.value}")
        m = prob.masks[vc]
        d[prob.idx[vc][m]] = layers[vc].depth[m]
        nvec[prob.idx[vc][m]] = layers[vc].normal[m]
    return prob.objective(d, nvec)


def solve_depth_fields(doc, masks, band=None, config=None, raster=None):
    """Fill every populated layer with depths and unit normals.

    Alternates an exact quadratic depth solve (warm-started CG) with
    accept-if-better per-pixel normal updates, so the objective never
    increases.  Without any depth sample the mean depth of each decoupled
    component is pinned and the result is flagged gauge-fixed.
    """
    cfg = config or SolverConfig()
    prob = _Problem(doc, masks, band, cfg, raster)
    d, nvec = prob.initial_state()
    trace = [prob.objective(d, nvec)]
    for it in range(cfg.max_iter):
        d_new = prob.solve_depth(d, nvec)
        if prob.objective(d_new, nvec) <= trace[-1] + 1e-15:
            d = d_new
        nvec = prob.update_normals(d, nvec)
        obj = prob.objective(d, nvec)
        trace.append(obj)
        prev = trace[-2]
        if prev - obj < cfg.tol * max(abs(prev), 1e-12):
            break
    layers = prob.unpack(d, nvec)
    vis = _combined_side(layers, _VISIBLE_CLASSES)
    occ = _combined_side(layers, (VisClass.OCCLUDED_FRONT, VisClass.OCCLUDED_BACK))
    cons = 0.0
    if band is not None and vis is not None and occ is not None:
        cons = eval_consistency(vis, occ, band, cfg)
    dep = 0.0
    if prob.m_samples:
        r = np.array([d[uid] - t for uid, t in prob.samples])
        dep = float(np.mean(r * r))
    report = EnergyReport.build(
        cfg,
        0.0,
        sum(eval_smoothness(l, cfg) for l in layers.values()),
        sum(eval_compatibility(l, cfg.delta) for l in layers.values()),
        dep,
        cons,
    )
    return SolveResult(
        layers=layers,
        report=report,
        gauge_fixed=prob.gauge_fixed,
        iterations=len(trace) - 1,
        objective_trace=trace,
    )


# ---------------------------------------------------------------------------
# surface fitting


def unproject_layer(layer, frame=None):
    """Camera-frame 3D points of every masked pixel."""
    frame = frame or camera.CanvasFrame()
    rr, cc = np.nonzero(layer.mask)
    x, y = frame.pixel_to_xy(rr, cc)
    z = camera.z_from_depth(layer.depth[rr, cc])
    return np.stack([x, y, z], axis=1)


def _obb_rotation(p2d):
    """2D rotation (rows = axes) minimizing the bounding-box area of p2d."""
    try:
        from scipy.spatial import ConvexHull

        hull = ConvexHull(p2d)
        hp = p2d[hull.vertices]
    except Exception:
        return np.eye(2)
    edges = np.diff(np.vstack([hp, hp[:1]]), axis=0)
    angles = np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2)
    angles = np.unique(np.round(angles, 12))
    best_area = np.inf
    best = np.eye(2)
    for a in angles:
        c, s = np.cos(a), np.sin(a)
        R = np.array([[c, s], [-s, c]])
        q = hp @ R.T
        area = np.ptp(q[:, 0]) * np.ptp(q[:, 1])
        if area < best_area - 1e-12:
            best_area = area
            best = R
    return best


def surface_from_layers(layers, frame=None, fairness_weight=2.0, trace=None):
    """One bicubic patch through the unprojected points of all layers.

    Parameters come from projecting the points onto the plane orthogonal to
    the world up axis; the surfaces being height fields over that plane makes
    the assignment injective, including across the fold at a contour.  The
    parameter axes are aligned to the footprint's minimum-area bounding box
    so the patch domain carries data all the way into its corners.
    """
    pts = [unproject_layer(lay, frame) for lay in layers.values()]
    targets = np.concatenate(pts, axis=0) if pts else np.zeros((0, 3))
    if targets.shape[0] < 100:
        raise InputError("too few layer pixels for a surface fit")
    p2d = np.stack([targets @ E1_CAM, targets @ E2_CAM], axis=1)
    R2 = _obb_rotation(p2d)
    axis_u = R2[0, 0] * E1_CAM + R2[0, 1] * E2_CAM
    axis_v = R2[1, 0] * E1_CAM + R2[1, 1] * E2_CAM
    uv = p2d @ R2.T
    params = np.zeros((targets.shape[0], 2))
    spans = []
    for k in range(2):
        # Quantile box instead of min/max: the footprint boundary is jagged at
        # pixel scale, and a box out to the single most extreme pixel leaves
        # the domain edge almost dataless.  Clipping the outliers onto the
        # boundary gives the clamped edge rows real support.
        lo, hi = np.quantile(uv[:, k], (0.002, 0.998))
        span = max(float(hi - lo), 1e-9)
        params[:, k] = np.clip((uv[:, k] - lo) / span, 0.0, 1.0)
        spans.append((float(lo), float(hi)))
    # plane init spanning the projected bounding box
    grid = np.linspace(0.0, 1.0, splinekit.NET_SIZE)
    uu, vv = np.meshgrid(grid, grid, indexing="ij")
    base = float(np.mean(targets @ W0_CAM))
    (lo_u, hi_u), (lo_v, hi_v) = spans
    pts0 = (
        (lo_u + uu[..., None] * (hi_u - lo_u)) * axis_u
        + (lo_v + vv[..., None] * (hi_v - lo_v)) * axis_v
        + base * W0_CAM
    )
    init = splinekit.ControlNet(pts0)
    net, _ = splinekit.fit_surface_to_points(
        targets, init, fairness_weight, params0=params, trace=trace
    )
    return net
