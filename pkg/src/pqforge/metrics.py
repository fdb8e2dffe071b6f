"""Quantitative evaluation: chamfer distances, depth errors, feature alignment.

Angles between directions are always measured orientation-free, so flipping
a normal or reversing an edge never changes a score.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import camera, splinekit
from .errors import InputError

_PROVENANCE = ("recovered", "ground-truth")


def angle_dn(v1, v2):
    """Orientation-free angle between two vectors, in [0, pi/2]."""
    a = np.asarray(v1, dtype=float)
    b = np.asarray(v2, dtype=float)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < 1e-300 or nb < 1e-300:
        raise InputError("angle of a zero vector is undefined")
    return float(np.arccos(np.clip(abs(a @ b) / (na * nb), 0.0, 1.0)))


def _angles(n1, n2):
    dots = np.abs(np.einsum("nd,nd->n", n1, n2))
    return np.arccos(np.clip(dots, 0.0, 1.0))


@dataclass
class PointSampleSet:
    """Surface samples with unit normals and a provenance tag."""

    points: np.ndarray
    normals: np.ndarray
    provenance: str = "recovered"
    _tree: cKDTree = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.normals = np.asarray(self.normals, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] == 0:
            raise InputError("sample set needs at least one 3D point")
        if self.normals.shape != self.points.shape:
            raise InputError("one normal per point required")
        lens = np.linalg.norm(self.normals, axis=1)
        if not np.all(np.abs(lens - 1.0) < 1e-6):
            raise InputError("normals must be unit length")
        if self.provenance not in _PROVENANCE:
            raise InputError(f"provenance must be one of {_PROVENANCE}")

    def tree(self):
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree


def sample_surface(net, provenance="recovered", n=100):
    """Regular n-by-n parameter samples of a surface patch."""
    g = np.linspace(0.0, 1.0, n)
    uu, vv = np.meshgrid(g, g, indexing="ij")
    pos, nrm = splinekit.eval_surface_many(net, uu.ravel(), vv.ravel())
    return PointSampleSet(pos, nrm, provenance)


def _nearest(src, dst):
    """Indices into dst.points of each src point's exact nearest neighbor."""
    _, idx = dst.tree().query(src.points, workers=-1)
    return idx


def chamfer_position(s, s_gt):
    """Symmetric mean of squared nearest-neighbor distances."""
    iab = _nearest(s, s_gt)
    iba = _nearest(s_gt, s)
    d_ab = np.sum((s.points - s_gt.points[iab]) ** 2, axis=1)
    d_ba = np.sum((s_gt.points - s.points[iba]) ** 2, axis=1)
    return float((d_ab.sum() + d_ba.sum()) / (len(d_ab) + len(d_ba)))


def chamfer_normal(s, s_gt):
    """Mean angle between normals of nearest-neighbor pairs."""
    iab = _nearest(s, s_gt)
    iba = _nearest(s_gt, s)
    a_ab = _angles(s.normals, s_gt.normals[iab])
    a_ba = _angles(s_gt.normals, s.normals[iba])
    return float((a_ab.sum() + a_ba.sum()) / (len(a_ab) + len(a_ba)))


def depth_mse(pred, gt, masks):
    """Per-visibility-class mean squared depth error (visible, occluded).

    ``pred`` and ``gt`` are (visible layer, occluded layer) depth pairs;
    ``masks`` is a mask set or a (visible, occluded) boolean pair.  A class
    with an empty mask has no defined error and comes back as None.
    """
    if hasattr(masks, "visible"):
        mask_v, mask_o = masks.visible, masks.occluded
    else:
        mask_v, mask_o = masks
    mask_v = np.asarray(mask_v, dtype=bool)
    mask_o = np.asarray(mask_o, dtype=bool)
    out = []
    for p, g, m in ((pred[0], gt[0], mask_v), (pred[1], gt[1], mask_o)):
        p = np.asarray(p, dtype=float)
        g = np.asarray(g, dtype=float)
        if p.shape != m.shape or g.shape != m.shape:
            raise InputError("depth layers and masks must share one shape")
        if not m.any():
            out.append(None)
            continue
        d = p[m] - g[m]
        out.append(float(np.mean(d * d)))
    return tuple(out)


def _visible_edge_segments(mesh, view, frame):
    """Projected canvas segments of edges on viewer-facing faces."""
    view = np.asarray(view, dtype=float)
    v = mesh.vertices
    f = mesh.faces
    n = np.cross(v[f[:, 2]] - v[f[:, 0]], v[f[:, 3]] - v[f[:, 1]])
    front = (n @ view) > 0
    if not front.any():
        raise InputError("no visible edges")
    ff = f[front]
    e = np.concatenate(
        [np.stack([ff[:, k], ff[:, (k + 1) % 4]], axis=1) for k in range(4)]
    )
    e = np.unique(np.sort(e, axis=1), axis=0)
    rows_a, cols_a = frame.xy_to_pixel(v[e[:, 0], 0], v[e[:, 0], 1])
    rows_b, cols_b = frame.xy_to_pixel(v[e[:, 1], 0], v[e[:, 1], 1])
    a = np.stack([cols_a, rows_a], axis=1)
    b = np.stack([cols_b, rows_b], axis=1)
    keep = np.linalg.norm(b - a, axis=1) > 1e-9
    if not keep.any():
        raise InputError("no visible edges")
    return a[keep], b[keep]


def _resample_px(points, step=1.0):
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise InputError("feature polyline needs at least two 2D points")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 0.0:
        raise InputError("degenerate feature polyline")
    n = max(int(np.ceil(s[-1] / step)) + 1, 2)
    si = np.linspace(0.0, s[-1], n)
    return np.stack(
        [np.interp(si, s, pts[:, 0]), np.interp(si, s, pts[:, 1])], axis=1
    )


def feature_alignment(mesh, features, view=(0.0, 0.0, 1.0), frame=None):
    """Mean angle between feature tangents and the nearest projected edge.

    Feature curves are sampled at one point per pixel of arc length; each
    sample is matched to the closest point over all projected edges of
    viewer-facing faces.
    """
    if not features:
        raise InputError("need at least one feature curve")
    frame = frame or camera.CanvasFrame()
    a, b = _visible_edge_segments(mesh, view, frame)
    ab = b - a
    ab2 = np.einsum("nd,nd->n", ab, ab)
    edir = ab / np.sqrt(ab2)[:, None]

    angles = []
    for feat in features:
        pts = feat.resample(1.0) if hasattr(feat, "resample") else _resample_px(feat)
        tans = np.gradient(pts, axis=0)
        tl = np.linalg.norm(tans, axis=1)
        ok = tl > 1e-12
        pts, tans = pts[ok], tans[ok] / tl[ok, None]
        # closest point on any segment, per sample
        w = pts[:, None, :] - a[None, :, :]
        t = np.clip(np.einsum("snd,nd->sn", w, ab) / ab2[None, :], 0.0, 1.0)
        closest = a[None, :, :] + t[..., None] * ab[None, :, :]
        d2 = np.sum((pts[:, None, :] - closest) ** 2, axis=-1)
        best = np.argmin(d2, axis=1)
        dots = np.abs(np.einsum("sd,sd->s", tans, edir[best]))
        angles.append(np.arccos(np.clip(dots, 0.0, 1.0)))
    if not angles:
        raise InputError("no usable feature sample")
    allang = np.concatenate(angles)
    return float(np.mean(allang))
