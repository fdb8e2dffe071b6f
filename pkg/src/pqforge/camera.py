"""Canvas geometry and orthographic surface rasterization.

Everything downstream of the sketch lives in one canonical camera frame:
x right, y up on the canvas, z toward the viewer.  Depth is measured away
from the viewer as ``depth = DEPTH_OFFSET - z`` so that stored depths stay
positive for all geometry the generator produces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CANVAS_SIZE = 256
WORLD_EXTENT = 10.0
# width of one pixel in world units
PIXEL_DELTA = WORLD_EXTENT / CANVAS_SIZE
DEPTH_OFFSET = 10.0

# Viewpoint direction for the axonometric camera: from (R/sqrt2, R/sqrt2, R)
# toward the origin, with the world z axis as the up reference.
_EYE = np.array([1.0 / np.sqrt(2.0), 1.0 / np.sqrt(2.0), 1.0])


def camera_rotation():
    """3x3 matrix whose rows are (right, up, toward-viewer) in world coords."""
    back = _EYE / np.linalg.norm(_EYE)          # unit vector surface->camera
    fwd = -back
    right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    return np.stack([right, up, back])


_CAM_R = camera_rotation()


def world_to_cam(points):
    """Rotate world points/vectors into the canonical camera frame."""
    return np.asarray(points, dtype=float) @ _CAM_R.T


def cam_to_world(points):
    return np.asarray(points, dtype=float) @ _CAM_R


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CanvasFrame:
    """Mapping between pixel indices and camera-frame world coordinates.

    Pixel (row, col) centers sit at
        x = center_x + (col - (size-1)/2) * delta
        y = center_y + ((size-1)/2 - row) * delta
    i.e. row 0 is the top of the canvas and y points up.
    """

    center_x: float = 0.0
    center_y: float = 0.0
    size: int = CANVAS_SIZE
    delta: float = PIXEL_DELTA

    @property
    def half(self):
        return (self.size - 1) / 2.0

    def pixel_to_xy(self, rows, cols):
        rows = np.asarray(rows, dtype=float)
        cols = np.asarray(cols, dtype=float)
        x = self.center_x + (cols - self.half) * self.delta
        y = self.center_y + (self.half - rows) * self.delta
        return x, y

    def xy_to_pixel(self, x, y):
        """Continuous pixel coordinates (row, col) for camera-frame x, y."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        col = (x - self.center_x) / self.delta + self.half
        row = self.half - (y - self.center_y) / self.delta
        return row, col

    def grid_xy(self):
        """x and y coordinate arrays for every pixel center, shape (size, size)."""
        r, c = np.mgrid[0 : self.size, 0 : self.size]
        return self.pixel_to_xy(r, c)

    def to_dict(self):
        return {
            "center_x": self.center_x,
            "center_y": self.center_y,
            "size": self.size,
            "delta": self.delta,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            center_x=float(d["center_x"]),
            center_y=float(d["center_y"]),
            size=int(d["size"]),
            delta=float(d["delta"]),
        )


def depth_from_z(z):
    return DEPTH_OFFSET - np.asarray(z, dtype=float)


def z_from_depth(depth):
    return DEPTH_OFFSET - np.asarray(depth, dtype=float)


class LayeredRaster:
    """Per-pixel first and second surface intersections along the view axis.

    Arrays are (size, size); pixels outside the surface footprint hold zeros
    in the masks and NaN in the float channels.  ``param1``/``param2`` store
    the (u, v) surface parameters of the hits, which is what the direction
    field and quad extraction stages need to query curvature at a pixel.
    """

    def __init__(self, frame, mask1, depth1, param1, mask2, depth2, param2, overflow):
        self.frame = frame
        self.mask1 = mask1
        self.depth1 = depth1
        self.param1 = param1
        self.mask2 = mask2
        self.depth2 = depth2
        self.param2 = param2
        # pixels where more than two distinct sheets were hit
        self.overflow = overflow


def _raster_accumulate(size, px, py, depth, uu, vv):
    """Scatter projected triangle-fragment samples into min-depth buffers."""
    lin = py * size + px
    order = np.lexsort((depth, lin))
    lin_s = lin[order]
    first = np.ones(lin_s.size, dtype=bool)
    first[1:] = lin_s[1:] != lin_s[:-1]
    idx = order[first]
    out_depth = np.full(size * size, np.nan)
    out_u = np.full(size * size, np.nan)
    out_v = np.full(size * size, np.nan)
    out_depth[lin[idx]] = depth[idx]
    out_u[lin[idx]] = uu[idx]
    out_v[lin[idx]] = vv[idx]
    mask = np.zeros(size * size, dtype=bool)
    mask[lin[idx]] = True
    return mask, out_depth, out_u, out_v


def rasterize_surface(eval_fn, frame, grid=512, param_gap=0.05):
    """Rasterize a parametric surface into a two-layer depth/parameter buffer.

    eval_fn(u, v) must accept flat arrays and return (n, 3) camera-frame
    points.  The surface is tessellated on a grid x grid parameter lattice;
    triangle fragments are accumulated per pixel and split into at most two
    sheets by parameter-space distance (robust near fold silhouettes where
    the sheets meet in depth).
    """
    size = frame.size
    us = np.linspace(0.0, 1.0, grid)
    uu, vv = np.meshgrid(us, us, indexing="ij")
    pts = eval_fn(uu.ravel(), vv.ravel()).reshape(grid, grid, 3)

    prow, pcol = frame.xy_to_pixel(pts[..., 0], pts[..., 1])
    pdep = depth_from_z(pts[..., 2])

    # two triangles per lattice cell
    i0 = np.arange(grid - 1)
    ii, jj = np.meshgrid(i0, i0, indexing="ij")
    c00 = (ii.ravel(), jj.ravel())
    corners = [
        (c00, (ii.ravel() + 1, jj.ravel()), (ii.ravel() + 1, jj.ravel() + 1)),
        (c00, (ii.ravel() + 1, jj.ravel() + 1), (ii.ravel(), jj.ravel() + 1)),
    ]

    frags_px, frags_py, frags_d, frags_u, frags_v = [], [], [], [], []
    for (a, b, c) in corners:
        ax, ay = pcol[a], prow[a]
        bx, by = pcol[b], prow[b]
        cx, cy = pcol[c], prow[c]
        da, db, dc = pdep[a], pdep[b], pdep[c]
        ua, ub, uc = uu[a], uu[b], uu[c]
        va, vb, vc = vv[a], vv[b], vv[c]

        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        keep = np.abs(area) > 1e-12
        if not np.any(keep):
            continue
        ax, ay, bx, by, cx, cy = (w[keep] for w in (ax, ay, bx, by, cx, cy))
        da, db, dc = da[keep], db[keep], dc[keep]
        ua, ub, uc = ua[keep], ub[keep], uc[keep]
        va, vb, vc = va[keep], vb[keep], vc[keep]
        area = area[keep]

        xmin = np.ceil(np.minimum(np.minimum(ax, bx), cx) - 1e-9).astype(np.int64)
        xmax = np.floor(np.maximum(np.maximum(ax, bx), cx) + 1e-9).astype(np.int64)
        ymin = np.ceil(np.minimum(np.minimum(ay, by), cy) - 1e-9).astype(np.int64)
        ymax = np.floor(np.maximum(np.maximum(ay, by), cy) + 1e-9).astype(np.int64)
        spanx = xmax - xmin + 1
        spany = ymax - ymin + 1
        # with a dense tessellation triangles cover at most a few pixels
        cap = 4
        spanx = np.clip(spanx, 0, cap)
        spany = np.clip(spany, 0, cap)
        for dx in range(cap):
            for dy in range(cap):
                sel = (dx < spanx) & (dy < spany)
                if not np.any(sel):
                    continue
                px = xmin[sel] + dx
                py = ymin[sel] + dy
                inb = (px >= 0) & (px < size) & (py >= 0) & (py < size)
                if not np.any(inb):
                    continue
                sel_idx = np.flatnonzero(sel)[inb]
                px, py = px[inb], py[inb]
                w0 = (bx[sel_idx] - px) * (cy[sel_idx] - py) - (by[sel_idx] - py) * (
                    cx[sel_idx] - px
                )
                w1 = (cx[sel_idx] - px) * (ay[sel_idx] - py) - (cy[sel_idx] - py) * (
                    ax[sel_idx] - px
                )
                w2 = (ax[sel_idx] - px) * (by[sel_idx] - py) - (ay[sel_idx] - py) * (
                    bx[sel_idx] - px
                )
                ar = area[sel_idx]
                tol = -1e-9 * np.abs(ar)
                inside = ((w0 >= tol) & (w1 >= tol) & (w2 >= tol)) | (
                    (w0 <= -tol) & (w1 <= -tol) & (w2 <= -tol)
                )
                if not np.any(inside):
                    continue
                sel_idx = sel_idx[inside]
                px, py = px[inside], py[inside]
                w0, w1, w2 = w0[inside] / ar[inside], w1[inside] / ar[inside], w2[
                    inside
                ] / ar[inside]
                frags_px.append(px)
                frags_py.append(py)
                frags_d.append(w0 * da[sel_idx] + w1 * db[sel_idx] + w2 * dc[sel_idx])
                frags_u.append(w0 * ua[sel_idx] + w1 * ub[sel_idx] + w2 * uc[sel_idx])
                frags_v.append(w0 * va[sel_idx] + w1 * vb[sel_idx] + w2 * vc[sel_idx])

    if not frags_px:
        empty = np.zeros((size, size), dtype=bool)
        nanmap = np.full((size, size), np.nan)
        nanpar = np.full((size, size, 2), np.nan)
        return LayeredRaster(frame, empty, nanmap, nanpar, empty.copy(), nanmap.copy(), nanpar.copy(), empty.copy())

    px = np.concatenate(frags_px)
    py = np.concatenate(frags_py)
    fd = np.concatenate(frags_d)
    fu = np.concatenate(frags_u)
    fv = np.concatenate(frags_v)

    m1, d1, u1, v1 = _raster_accumulate(size, px, py, fd, fu, fv)

    # second sheet: fragments far from the first hit in parameter space
    lin = py * size + px
    du = fu - u1[lin]
    dv = fv - v1[lin]
    far = np.abs(du) + np.abs(dv) > param_gap
    if np.any(far):
        m2, d2, u2, v2 = _raster_accumulate(size, px[far], py[far], fd[far], fu[far], fv[far])
        # third sheet detection: fragments far from both recorded sheets
        lin_f = lin[far]
        du3 = fu[far] - u2[lin_f]
        dv3 = fv[far] - v2[lin_f]
        far3 = (np.abs(du3) + np.abs(dv3) > param_gap) & np.isfinite(u2[lin_f])
        overflow = np.zeros(size * size, dtype=bool)
        overflow[lin_f[far3]] = True
    else:
        m2 = np.zeros(size * size, dtype=bool)
        d2 = np.full(size * size, np.nan)
        u2 = np.full(size * size, np.nan)
        v2 = np.full(size * size, np.nan)
        overflow = np.zeros(size * size, dtype=bool)

    sq = (size, size)
    return LayeredRaster(
        frame,
        m1.reshape(sq),
        d1.reshape(sq),
        np.stack([u1.reshape(sq), v1.reshape(sq)], axis=-1),
        m2.reshape(sq),
        d2.reshape(sq),
        np.stack([u2.reshape(sq), v2.reshape(sq)], axis=-1),
        overflow.reshape(sq),
    )
