"""Quad meshes traced from a surface direction field.

The surface arrives as a per-pixel triangle discretization.  Streamlines of
the two tangent direction families are traced over the canvas, seeded
farthest-first at a fixed target spacing; crossings between the families
become mesh vertices and every closed cell of the curve network becomes a
face.  A projection-based polish then drives faces toward exact planarity
while a closeness term keeps them near the reference patch.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import camera, splinekit
from .errors import ExtractionError, InputError, TopologyError

# streamline tuning, all relative to the target edge length h or the step dt
_SEP_FACTOR = 0.45          # stop tracing this close to a sibling curve
_SEP_FLOOR = 0.1            # ... but never closer than this
_SEED_ACCEPT = 0.95         # required clearance for a new seed, in units of h
_NODE_MERGE = 0.35          # crossing merge radius, in units of dt
_ANGLE_GATE = math.sin(math.radians(10.0))
_MIN_SUPPORT = 0.25         # bilinear weight needed to sample the field


# ---------------------------------------------------------------------------
# surface discretization


@dataclass
class TriMesh:
    """Per-pixel triangle discretization of one surface sheet."""

    vertices: np.ndarray        # (n, 3)
    faces: np.ndarray           # (m, 3), counter-clockwise toward the outside
    pixels: np.ndarray          # (n, 2) int row, col of each vertex
    params: np.ndarray          # (n, 2) surface parameters of each vertex
    frame: camera.CanvasFrame


def discretize_surface(net, masks, frame=None):
    """Triangle mesh with one vertex per masked pixel of the first sheet.

    Vertices are exact surface evaluations at each pixel's rasterized
    parameters; every fully masked 2x2 pixel block contributes two triangles,
    so the mesh boundary follows the mask.
    """
    frame = frame or camera.CanvasFrame()
    mask = masks.visible if hasattr(masks, "visible") else np.asarray(masks, dtype=bool)
    if mask.shape != (frame.size, frame.size):
        raise InputError("mask does not match the canvas size")
    if not mask.any():
        raise InputError("empty mask")
    raster = camera.rasterize_surface(
        lambda u, v: splinekit.eval_surface_many(net, u, v, with_normals=False), frame
    )
    mask = mask & raster.mask1
    if not mask.any():
        raise InputError("mask misses the surface footprint")
    rr, cc = np.nonzero(mask)
    params = raster.param1[rr, cc]
    pos, nrm = splinekit.eval_surface_many(net, params[:, 0], params[:, 1])
    vid = np.full(mask.shape, -1, dtype=np.int64)
    vid[rr, cc] = np.arange(rr.size)
    cell = mask[:-1, :-1] & mask[1:, :-1] & mask[:-1, 1:] & mask[1:, 1:]
    cr, ccol = np.nonzero(cell)
    if cr.size == 0:
        raise InputError("mask holds no complete pixel cell")
    a = vid[cr, ccol]
    b = vid[cr, ccol + 1]
    c = vid[cr + 1, ccol + 1]
    d = vid[cr + 1, ccol]
    faces = np.concatenate([np.stack([a, d, c], 1), np.stack([a, c, b], 1)])
    # the winding above is counter-clockwise toward the viewer; flip when the
    # sheet faces away so it stays counter-clockwise seen from outside
    if np.nanmedian(nrm[:, 2]) < 0:
        faces = faces[:, ::-1].copy()
    return TriMesh(
        vertices=pos,
        faces=faces,
        pixels=np.stack([rr, cc], axis=1),
        params=params,
        frame=frame,
    )


# ---------------------------------------------------------------------------
# quad mesh type


@dataclass
class QuadMesh:
    """Quad mesh; faces wound counter-clockwise seen from outside."""

    vertices: np.ndarray                # (n, 3)
    faces: np.ndarray                   # (m, 4) int
    params: np.ndarray | None = None    # (n, 2) reference-surface parameters
    n_split_cells: int = 0

    def copy(self):
        return QuadMesh(
            self.vertices.copy(),
            self.faces.copy(),
            None if self.params is None else self.params.copy(),
            self.n_split_cells,
        )

    def edges(self):
        """Unique undirected edges as sorted (lo, hi) index pairs."""
        f = self.faces
        e = np.concatenate(
            [np.stack([f[:, k], f[:, (k + 1) % 4]], axis=1) for k in range(4)]
        )
        return np.unique(np.sort(e, axis=1), axis=0)

    def mean_edge_length(self):
        e = self.edges()
        if e.shape[0] == 0:
            raise InputError("mesh has no edges")
        return float(
            np.mean(np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1))
        )

    def validate(self):
        f = np.asarray(self.faces)
        if f.ndim != 2 or f.shape[1] != 4 or f.shape[0] == 0:
            raise TopologyError("faces must be a nonempty (m, 4) index array")
        if f.min() < 0 or f.max() >= self.vertices.shape[0]:
            raise TopologyError("face index out of range")
        s = np.sort(f, axis=1)
        if np.any(s[:, :-1] == s[:, 1:]):
            raise TopologyError("a face repeats a vertex")
        v = self.vertices
        a1 = np.linalg.norm(
            np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1
        )
        a2 = np.linalg.norm(
            np.cross(v[f[:, 2]] - v[f[:, 0]], v[f[:, 3]] - v[f[:, 0]]), axis=1
        )
        scale = self.mean_edge_length() ** 2
        if np.any(a1 + a2 < 1e-10 * scale):
            raise TopologyError("degenerate zero-area face")
        # manifold with boundary: each undirected edge borders at most two
        # faces, and when it borders two their windings disagree
        seen = {}
        for face in f:
            for k in range(4):
                p, q = int(face[k]), int(face[(k + 1) % 4])
                seen.setdefault((min(p, q), max(p, q)), []).append(p < q)
        for key, uses in seen.items():
            if len(uses) > 2:
                raise TopologyError(f"edge {key} borders {len(uses)} faces")
            if len(uses) == 2 and uses[0] == uses[1]:
                raise TopologyError(f"edge {key} wound the same way twice")

    def save_obj(self, path):
        with open(path, "w") as fh:
            for p in self.vertices:
                fh.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
            for face in self.faces:
                fh.write("f {} {} {} {}\n".format(*(int(i) + 1 for i in face)))


def load_obj(path):
    """Quad mesh from an OBJ file of v and 4-vertex f lines."""
    verts = []
    faces = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise InputError("v line needs three coordinates")
                verts.append([float(c) for c in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 4:
                    raise InputError("only 4-vertex faces are supported")
                faces.append([i - 1 for i in idx])
    if not verts or not faces:
        raise InputError("OBJ file holds no quad mesh")
    return QuadMesh(
        vertices=np.asarray(verts, dtype=float),
        faces=np.asarray(faces, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# planarity measure


def face_planarity(quad, mean_edge_length):
    """Distance between the two diagonal lines over the mean edge length."""
    q = np.asarray(quad, dtype=float)
    if q.shape != (4, 3):
        raise InputError("need exactly four 3D corners")
    if not mean_edge_length > 0:
        raise InputError("mean edge length must be positive")
    iu = np.triu_indices(4, 1)
    gaps = np.linalg.norm(q[iu[0]] - q[iu[1]], axis=1)
    if np.min(gaps) < 1e-12:
        raise InputError("corners must be distinct")
    d1 = q[2] - q[0]
    d2 = q[3] - q[1]
    w = q[1] - q[0]
    cr = np.cross(d1, d2)
    nc = np.linalg.norm(cr)
    if nc < 1e-12 * np.linalg.norm(d1) * np.linalg.norm(d2):
        # parallel diagonals: distance from a point of one to the other line
        t = (w @ d1) / (d1 @ d1)
        dist = np.linalg.norm(w - t * d1)
    else:
        dist = abs(w @ cr) / nc
    return float(dist / mean_edge_length)


def _planarity_batch(vertices, faces, mean_edge):
    d1 = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    d2 = vertices[faces[:, 3]] - vertices[faces[:, 1]]
    w = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    cr = np.cross(d1, d2)
    nc = np.linalg.norm(cr, axis=1)
    par = nc < 1e-12 * np.linalg.norm(d1, axis=1) * np.linalg.norm(d2, axis=1)
    dist = np.abs(np.einsum("nd,nd->n", w, cr)) / np.where(par, 1.0, nc)
    if np.any(par):
        dp = d1[par]
        wp = w[par]
        t = np.einsum("nd,nd->n", wp, dp) / np.maximum(
            np.einsum("nd,nd->n", dp, dp), 1e-30
        )
        dist[par] = np.linalg.norm(wp - t[:, None] * dp, axis=1)
    return dist / mean_edge


def planarity_values(mesh):
    """Per-face planarity, normalized by the mesh mean edge length."""
    return _planarity_batch(mesh.vertices, mesh.faces, mesh.mean_edge_length())


# ---------------------------------------------------------------------------
# streamline tracing


@dataclass(frozen=True)
class TraceConfig:
    """Spacing and budget for quad extraction.

    ``edge_length`` is the target quad edge in world units; None picks the
    footprint diagonal over 24.  ``seed_policy`` is "farthest" (farthest-first
    candidate seeds offset sideways from traced curves) or "grid" (a fixed
    lattice).
    """

    edge_length: float | None = None
    seed_policy: str = "farthest"
    max_quads: int = 20000

    def __post_init__(self):
        if self.edge_length is not None and not self.edge_length > 0:
            raise InputError("edge length must be positive")
        if self.seed_policy not in ("farthest", "grid"):
            raise InputError(f"unknown seed policy {self.seed_policy!r}")
        if self.max_quads < 1:
            raise InputError("max_quads must be at least 1")


class _FieldGrids:
    """Canvas-aligned direction, normal and validity grids for one field."""

    def __init__(self, tri, field):
        frame = tri.frame
        size = frame.size
        self.frame = frame
        self.size = size
        D = np.full((size, size, 3, 2), np.nan)
        ok = ~np.asarray(field.degenerate, dtype=bool)
        px = np.asarray(field.pixels)
        D[px[ok, 0], px[ok, 1], :, 0] = field.d1[ok]
        D[px[ok, 0], px[ok, 1], :, 1] = field.d2[ok]
        vid = np.full((size, size), -1, dtype=np.int64)
        vid[tri.pixels[:, 0], tri.pixels[:, 1]] = np.arange(tri.pixels.shape[0])
        self.valid = np.all(np.isfinite(D), axis=(2, 3)) & (vid >= 0)
        self.D = D
        n = np.cross(D[..., 0], D[..., 1])
        nn = np.linalg.norm(n, axis=-1)
        self.N = n / np.where(nn < 1e-12, 1.0, nn)[..., None]

    def _corners(self, x, y):
        frame = self.frame
        col = (x - frame.center_x) / frame.delta + frame.half
        row = frame.half - (y - frame.center_y) / frame.delta
        r0 = int(np.floor(row))
        c0 = int(np.floor(col))
        fr = row - r0
        fc = col - c0
        return (
            (r0, c0, (1.0 - fr) * (1.0 - fc)),
            (r0, c0 + 1, (1.0 - fr) * fc),
            (r0 + 1, c0, fr * (1.0 - fc)),
            (r0 + 1, c0 + 1, fr * fc),
        )

    def sample(self, x, y, ref):
        """Unit direction near (x, y) matched to ref; None off the field."""
        acc = np.zeros(3)
        wtot = 0.0
        for r, c, w in self._corners(x, y):
            if w <= 0.0 or not (0 <= r < self.size and 0 <= c < self.size):
                continue
            if not self.valid[r, c]:
                continue
            d1 = self.D[r, c, :, 0]
            d2 = self.D[r, c, :, 1]
            s1 = d1 @ ref
            s2 = d2 @ ref
            if abs(s1) >= abs(s2):
                acc += w * (d1 if s1 >= 0 else -d1)
            else:
                acc += w * (d2 if s2 >= 0 else -d2)
            wtot += w
        if wtot < _MIN_SUPPORT:
            return None
        nrm = np.linalg.norm(acc)
        if nrm < 1e-9 * wtot:
            return None
        v = acc / nrm
        if v @ ref < 0.1:
            return None
        return v

    def offset(self, x, y, t):
        """(unit in-surface perpendicular of t, its 2D magnitude), or None."""
        acc = np.zeros(3)
        wtot = 0.0
        for r, c, w in self._corners(x, y):
            if w <= 0.0 or not (0 <= r < self.size and 0 <= c < self.size):
                continue
            if not self.valid[r, c]:
                continue
            n = self.N[r, c]
            if acc @ n < 0:
                n = -n
            acc += w * n
            wtot += w
        if wtot < _MIN_SUPPORT:
            return None
        o = np.cross(acc, t)
        nrm = np.linalg.norm(o)
        if nrm < 1e-9:
            return None
        o = o / nrm
        return o, math.hypot(o[0], o[1])


class _PointGrid:
    """Uniform spatial hash answering "any stored point within r of p"."""

    def __init__(self, cell):
        self.cell = cell
        self.bins = {}

    def add(self, pts):
        keys = np.floor(np.asarray(pts) / self.cell).astype(np.int64)
        for key, p in zip(map(tuple, keys), np.asarray(pts)):
            self.bins.setdefault(key, []).append(p)

    def near(self, p, r):
        i0 = int(math.floor((p[0] - r) / self.cell))
        i1 = int(math.floor((p[0] + r) / self.cell))
        j0 = int(math.floor((p[1] - r) / self.cell))
        j1 = int(math.floor((p[1] + r) / self.cell))
        rr = r * r
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                for q in self.bins.get((i, j), ()):
                    dx = q[0] - p[0]
                    dy = q[1] - p[1]
                    if dx * dx + dy * dy < rr:
                        return True
        return False


@dataclass
class _Curve:
    pts: np.ndarray         # (k, 2) canvas positions
    tans: np.ndarray        # (k, 3) unit tangents along increasing arc
    closed: bool
    family: int
    cum: np.ndarray = None  # (nseg + 1,) cumulative arc, filled in later
    length: float = 0.0

    def finish(self):
        if self.closed:
            seg = np.vstack([self.pts[1:], self.pts[:1]]) - self.pts
        else:
            seg = self.pts[1:] - self.pts[:-1]
        lens = np.linalg.norm(seg, axis=1)
        self.cum = np.concatenate([[0.0], np.cumsum(lens)])
        self.length = float(self.cum[-1])

    def _segment(self, s):
        if self.closed:
            s = s % self.length
        i = int(np.searchsorted(self.cum, s, side="right")) - 1
        i = min(max(i, 0), len(self.cum) - 2)
        a = self.pts[i]
        b = self.pts[i + 1] if i + 1 < len(self.pts) else self.pts[0]
        return i, a, b

    def point_at(self, s):
        i, a, b = self._segment(s)
        seg = self.cum[i + 1] - self.cum[i]
        t = 0.0 if seg < 1e-14 else ((s % self.length if self.closed else s) - self.cum[i]) / seg
        return a + np.clip(t, 0.0, 1.0) * (b - a)

    def heading_at(self, s):
        i, a, b = self._segment(s)
        d = b - a
        n = np.linalg.norm(d)
        if n < 1e-14:
            return np.array([1.0, 0.0])
        return d / n


class _Tracer:
    def __init__(self, grids, h, dt, max_steps):
        self.grids = grids
        self.h = h
        self.dt = dt
        self.max_steps = max_steps
        self.K = int(math.ceil(1.5 * h / dt))

    def _rho(self, p, t):
        off = self.grids.offset(p[0], p[1], t)
        return off[1] if off is not None else 1.0

    def _step(self, p, ref):
        g = self.grids
        dt = self.dt
        k1 = g.sample(p[0], p[1], ref)
        if k1 is None:
            return None
        k2 = g.sample(p[0] + 0.5 * dt * k1[0], p[1] + 0.5 * dt * k1[1], k1)
        if k2 is None:
            return None
        k3 = g.sample(p[0] + 0.5 * dt * k2[0], p[1] + 0.5 * dt * k2[1], k2)
        if k3 is None:
            return None
        k4 = g.sample(p[0] + dt * k3[0], p[1] + dt * k3[1], k3)
        if k4 is None:
            return None
        v = k1 + 2.0 * k2 + 2.0 * k3 + k4
        nrm = np.linalg.norm(v)
        if nrm < 1e-9:
            return None
        v = v / nrm
        newp = np.array([p[0] + dt * v[0], p[1] + dt * v[1]])
        nref = g.sample(newp[0], newp[1], v)
        if nref is None:
            return None
        return newp, nref

    def _run(self, seed, d0, placed, extra, allow_close):
        ref = self.grids.sample(seed[0], seed[1], d0)
        if ref is None:
            return [np.asarray(seed, dtype=float)], [np.asarray(d0, dtype=float)], False
        pts = [np.asarray(seed, dtype=float)]
        tans = [ref]
        p = pts[0]
        for _ in range(self.max_steps):
            res = self._step(p, ref)
            if res is None:
                break
            newp, nref = res
            if (
                allow_close
                and len(pts) * self.dt > 2.5 * self.h
                and math.hypot(newp[0] - pts[0][0], newp[1] - pts[0][1]) < 0.75 * self.dt
            ):
                return pts, tans, True
            thr = max(_SEP_FACTOR * self.h * self._rho(newp, nref), _SEP_FLOOR * self.h)
            if placed.near(newp, thr):
                break
            if len(pts) > self.K:
                old = np.asarray(pts[: len(pts) - self.K])
                d2 = np.min(
                    (old[:, 0] - newp[0]) ** 2 + (old[:, 1] - newp[1]) ** 2
                )
                if d2 < thr * thr:
                    break
            if extra is not None and extra.shape[0]:
                d2 = np.min(
                    (extra[:, 0] - newp[0]) ** 2 + (extra[:, 1] - newp[1]) ** 2
                )
                if d2 < thr * thr:
                    break
            pts.append(newp)
            tans.append(nref)
            p = newp
            ref = nref
        return pts, tans, False

    def trace(self, seed, d0, placed, family):
        fpts, ftans, closed = self._run(seed, d0, placed, None, True)
        if closed and len(fpts) >= 4:
            cv = _Curve(np.asarray(fpts), np.asarray(ftans), True, family)
            cv.finish()
            return cv
        extra = np.asarray(fpts[self.K:]) if len(fpts) > self.K else None
        bpts, btans, _ = self._run(seed, -np.asarray(d0), placed, extra, False)
        pts = [p for p in reversed(bpts[1:])] + fpts
        tans = [-t for t in reversed(btans[1:])] + ftans
        cv = _Curve(np.asarray(pts), np.asarray(tans), False, family)
        cv.finish()
        return cv


def _seed_family(grids, tracer, family, policy, max_curves, pix_pts, pix_dirs, start):
    """All streamlines of one direction family, traced in seeding order."""
    placed_grid = _PointGrid(0.5 * tracer.h)
    placed_pts = []
    tree = None
    curves = []
    pending = []

    def try_curve(seed, ref):
        nonlocal tree
        cv = tracer.trace(np.asarray(seed, dtype=float), np.asarray(ref, dtype=float),
                          placed_grid, family)
        if cv.pts.shape[0] < 4 or cv.length < 1.2 * tracer.h:
            return False
        curves.append(cv)
        placed_grid.add(cv.pts)
        placed_pts.append(cv.pts)
        tree = cKDTree(np.concatenate(placed_pts))
        stride = max(1, int(round(0.5 * tracer.h / tracer.dt)))
        for i in range(0, cv.pts.shape[0], stride):
            off = grids.offset(cv.pts[i][0], cv.pts[i][1], cv.tans[i])
            if off is None:
                continue
            o = off[0]
            for sgn in (1.0, -1.0):
                cand = np.array(
                    [cv.pts[i][0] + sgn * tracer.h * o[0],
                     cv.pts[i][1] + sgn * tracer.h * o[1]]
                )
                pending.append((cand, cv.tans[i]))
        return True

    if policy == "grid":
        x0, x1 = float(np.min(pix_pts[:, 0])), float(np.max(pix_pts[:, 0]))
        y0, y1 = float(np.min(pix_pts[:, 1])), float(np.max(pix_pts[:, 1]))
        pix_tree = cKDTree(pix_pts)
        for y in np.arange(y1, y0 - 1e-9, -tracer.h):
            for x in np.arange(x0, x1 + 1e-9, tracer.h):
                if len(curves) >= max_curves:
                    return curves
                if tree is not None:
                    d, _ = tree.query([x, y])
                    if d < _SEED_ACCEPT * tracer.h:
                        continue
                d, i = pix_tree.query([x, y])
                if d > 1.5 * grids.frame.delta:
                    continue
                try_curve((x, y), pix_dirs[i])
        return curves

    try_curve(pix_pts[start], pix_dirs[start])
    dead = np.zeros(pix_pts.shape[0], dtype=bool)
    fallback_left = 200
    while len(curves) < max_curves:
        seeded = False
        while pending and not seeded:
            arr = np.asarray([c[0] for c in pending])
            d, _ = tree.query(arr) if tree is not None else (
                np.full(arr.shape[0], np.inf), None)
            if np.all(d < _SEED_ACCEPT * tracer.h):
                pending.clear()
                break
            best = int(np.argmax(d))
            cand, ref = pending.pop(best)
            if d[best] >= _SEED_ACCEPT * tracer.h:
                seeded = try_curve(cand, ref)
        if seeded:
            continue
        if fallback_left == 0 or tree is None:
            break
        d, _ = tree.query(pix_pts)
        d[dead] = -1.0
        i = int(np.argmax(d))
        if d[i] < tracer.h:
            break
        fallback_left -= 1
        if not try_curve(pix_pts[i], pix_dirs[i]):
            dead[i] = True
    return curves


# ---------------------------------------------------------------------------
# curve network -> cells


@dataclass
class _Edge:
    a: int
    b: int
    curve: int
    sa: float
    sb: float
    ha: np.ndarray      # 2D heading leaving a along the edge
    hb: np.ndarray      # 2D heading leaving b along the edge (backwards)


def _find_crossings(curves, dt):
    """Crossing events per curve: sorted (arc, node id) lists plus positions."""
    cell = 2.0 * dt
    bins = {}
    for ci, cv in enumerate(curves):
        if cv.closed:
            a = cv.pts
            b = np.vstack([cv.pts[1:], cv.pts[:1]])
        else:
            a = cv.pts[:-1]
            b = cv.pts[1:]
        lo = np.floor(np.minimum(a, b) / cell).astype(np.int64)
        hi = np.floor(np.maximum(a, b) / cell).astype(np.int64)
        for si in range(a.shape[0]):
            for ix in range(lo[si, 0], hi[si, 0] + 1):
                for iy in range(lo[si, 1], hi[si, 1] + 1):
                    bins.setdefault((ix, iy), []).append((ci, si))

    def seg(ci, si):
        cv = curves[ci]
        p = cv.pts[si]
        q = cv.pts[si + 1] if si + 1 < cv.pts.shape[0] else cv.pts[0]
        return p, q - p

    checked = set()
    raw = {}
    for items in bins.values():
        for x in range(len(items)):
            for y in range(x + 1, len(items)):
                ci, si = items[x]
                cj, sj = items[y]
                if ci == cj:
                    continue
                if ci > cj:
                    ci, si, cj, sj = cj, sj, ci, si
                key = (ci, si, cj, sj)
                if key in checked:
                    continue
                checked.add(key)
                p, r = seg(ci, si)
                q, s = seg(cj, sj)
                den = r[0] * s[1] - r[1] * s[0]
                nr = math.hypot(r[0], r[1])
                ns = math.hypot(s[0], s[1])
                if abs(den) <= _ANGLE_GATE * nr * ns:
                    continue
                w0 = q[0] - p[0]
                w1 = q[1] - p[1]
                t = (w0 * s[1] - w1 * s[0]) / den
                u = (w0 * r[1] - w1 * r[0]) / den
                if not (-1e-9 <= t <= 1 + 1e-9 and -1e-9 <= u <= 1 + 1e-9):
                    continue
                t = min(max(t, 0.0), 1.0)
                u = min(max(u, 0.0), 1.0)
                pt = np.array([p[0] + t * r[0], p[1] + t * r[1]])
                ai = curves[ci].cum[si] + t * nr
                aj = curves[cj].cum[sj] + u * ns
                raw.setdefault((ci, cj), []).append((ai, aj, pt))

    # same geometric crossing can register on neighbouring segment pairs;
    # keep one event per crossing
    def arcgap(cv, a, b):
        d = abs(a - b)
        return min(d, cv.length - d) if cv.closed else d

    node_pos = []
    node_grid = {}
    merge_r = _NODE_MERGE * dt

    def node_id(pt):
        key = (int(math.floor(pt[0] / merge_r)), int(math.floor(pt[1] / merge_r)))
        for i in range(key[0] - 1, key[0] + 2):
            for j in range(key[1] - 1, key[1] + 2):
                for nid in node_grid.get((i, j), ()):
                    q = node_pos[nid]
                    if math.hypot(q[0] - pt[0], q[1] - pt[1]) < merge_r:
                        return nid
        nid = len(node_pos)
        node_pos.append(pt)
        node_grid.setdefault(key, []).append(nid)
        return nid

    events = [[] for _ in curves]
    for (ci, cj), evs in sorted(raw.items()):
        evs.sort(key=lambda e: (e[0], e[1]))
        kept = []
        for e in evs:
            dup = any(
                arcgap(curves[ci], e[0], k[0]) < 1.2 * dt
                and arcgap(curves[cj], e[1], k[1]) < 1.2 * dt
                for k in kept
            )
            if dup:
                continue
            kept.append(e)
            nid = node_id(e[2])
            events[ci].append((e[0], nid))
            events[cj].append((e[1], nid))
    return events, node_pos


def _build_edges(curves, events, dt):
    edges = []
    for ci, cv in enumerate(curves):
        evs = sorted(events[ci])
        kept = []
        for s, nid in evs:
            if kept and (s - kept[-1][0] < 0.5 * dt or nid == kept[-1][1]):
                continue
            kept.append((s, nid))
        if cv.closed and len(kept) >= 2:
            wrap = cv.length - (kept[-1][0] - kept[0][0])
            if wrap < 0.5 * dt or kept[-1][1] == kept[0][1]:
                kept.pop()
        n = len(kept)
        if n < 2:
            continue
        last = n if cv.closed else n - 1
        for k in range(last):
            sa, a = kept[k]
            sb, b = kept[(k + 1) % n]
            if k == n - 1:
                sb += cv.length
            if a == b:
                continue
            ha = cv.heading_at(sa)
            hb = -cv.heading_at(sb if sb < cv.length else sb - cv.length)
            edges.append(_Edge(a=a, b=b, curve=ci, sa=sa, sb=sb, ha=ha, hb=hb))
    return edges


def _prune_network(edges, curves):
    """Drop dangling chains; merge pass-through nodes of a pruned partner."""
    while True:
        deg = {}
        for e in edges:
            deg[e.a] = deg.get(e.a, 0) + 1
            deg[e.b] = deg.get(e.b, 0) + 1
        kept = [e for e in edges if deg[e.a] >= 2 and deg[e.b] >= 2]
        if len(kept) != len(edges):
            edges = kept
            continue
        by_node = {}
        for ei, e in enumerate(edges):
            by_node.setdefault(e.a, []).append(ei)
            by_node.setdefault(e.b, []).append(ei)
        merged = False
        for nid, eis in by_node.items():
            if len(eis) != 2 or eis[0] == eis[1]:
                continue
            e1, e2 = edges[eis[0]], edges[eis[1]]
            if e1.curve != e2.curve:
                continue
            cv = curves[e1.curve]
            if e1.a == nid and e2.b == nid:
                e1, e2 = e2, e1
            if not (e1.b == nid and e2.a == nid):
                continue
            gap = abs(e1.sb - e2.sa)
            if cv.closed:
                gap = min(gap, abs(gap - cv.length))
            if gap > 1e-6:
                continue
            new = _Edge(a=e1.a, b=e2.b, curve=e1.curve, sa=e1.sa,
                        sb=e1.sb + (e2.sb - e2.sa), ha=e1.ha, hb=e2.hb)
            edges = [e for ei, e in enumerate(edges) if ei not in eis]
            if new.a != new.b:
                edges.append(new)
            merged = True
            break
        if not merged:
            return edges


def _trace_cells(edges, node_pos, h):
    """Closed cells of the planar curve network, counter-clockwise."""
    inc = {}
    for ei, e in enumerate(edges):
        inc.setdefault(e.a, []).append((math.atan2(e.ha[1], e.ha[0]), ei, 1))
        inc.setdefault(e.b, []).append((math.atan2(e.hb[1], e.hb[0]), ei, -1))
    pos = {}
    for nid in inc:
        inc[nid].sort()
        for k, (_, ei, d) in enumerate(inc[nid]):
            pos[(ei, d)] = k

    def next_he(ei, d):
        e = edges[ei]
        node = e.b if d > 0 else e.a
        lst = inc[node]
        k = pos[(ei, -d)]
        _, nei, nd = lst[(k - 1) % len(lst)]
        return nei, nd

    visited = set()
    cells = []
    for ei in range(len(edges)):
        for d in (1, -1):
            if (ei, d) in visited:
                continue
            orbit = []
            cur = (ei, d)
            while cur not in visited:
                visited.add(cur)
                orbit.append(cur)
                cur = next_he(*cur)
            nodes = [edges[oe].a if od > 0 else edges[oe].b for oe, od in orbit]
            xy = np.asarray([node_pos[n] for n in nodes])
            area = 0.5 * float(
                np.sum(xy[:, 0] * np.roll(xy[:, 1], -1) - np.roll(xy[:, 0], -1) * xy[:, 1])
            )
            if area <= 1e-3 * h * h:
                continue
            if not (3 <= len(nodes) <= 12):
                continue
            if len(set(nodes)) != len(nodes):
                continue
            cells.append((nodes, orbit, area))
    return cells


# ---------------------------------------------------------------------------
# lifting back to the surface


def _lift_points(tri, pts2d):
    """Positions and parameters on the triangle mesh under each 2D point."""
    frame = tri.frame
    size = frame.size
    vid = np.full((size, size), -1, dtype=np.int64)
    vid[tri.pixels[:, 0], tri.pixels[:, 1]] = np.arange(tri.pixels.shape[0])
    out_pos = np.full((len(pts2d), 3), np.nan)
    out_par = np.full((len(pts2d), 2), np.nan)
    ok = np.zeros(len(pts2d), dtype=bool)
    for i, p in enumerate(pts2d):
        row, col = frame.xy_to_pixel(p[0], p[1])
        r0 = min(max(int(np.floor(row)), 0), size - 2)
        c0 = min(max(int(np.floor(col)), 0), size - 2)
        fr = float(row) - r0
        fc = float(col) - c0
        ids = (vid[r0, c0], vid[r0, c0 + 1], vid[r0 + 1, c0 + 1], vid[r0 + 1, c0])
        if min(ids) >= 0:
            if fr >= fc:     # triangle (corner, below, diagonal)
                w = ((ids[0], 1.0 - fr), (ids[3], fr - fc), (ids[2], fc))
            else:            # triangle (corner, diagonal, right)
                w = ((ids[0], 1.0 - fc), (ids[2], fr), (ids[1], fc - fr))
            pos = sum(wt * tri.vertices[j] for j, wt in w)
            par = sum(wt * tri.params[j] for j, wt in w)
        else:
            cand = [
                (abs(fr - dr) + abs(fc - dc), j)
                for j, (dr, dc) in zip(ids, ((0, 0), (0, 1), (1, 1), (1, 0)))
                if j >= 0
            ]
            if not cand:
                continue
            j = min(cand)[1]
            pos = tri.vertices[j]
            par = tri.params[j]
        out_pos[i] = pos
        out_par[i] = par
        ok[i] = True
    return out_pos, out_par, ok


# ---------------------------------------------------------------------------
# extraction driver


def extract_quads(tri, field, cfg=None):
    """Quad mesh whose edges follow the two direction families of ``field``.

    Streamlines of each family are traced from farthest-first seeds spaced by
    the target edge length; family crossings become vertices and closed cells
    of the curve network become faces.  Cells with other than four corners
    are split around a midpoint ring and counted in ``n_split_cells``.
    """
    cfg = cfg or TraceConfig()
    grids = _FieldGrids(tri, field)
    if not grids.valid.any():
        raise ExtractionError("direction field is singular everywhere")
    frame = tri.frame
    rr, cc = np.nonzero(grids.valid)
    px, py = frame.pixel_to_xy(rr, cc)
    pix_pts = np.stack([px, py], axis=1)
    diag = math.hypot(np.ptp(px) + frame.delta, np.ptp(py) + frame.delta)
    h = cfg.edge_length if cfg.edge_length is not None else max(
        diag / 24.0, 3.0 * frame.delta)
    dt = max(min(h / 4.0, 2.0 * frame.delta), 0.5 * frame.delta)
    max_steps = int(min(max(8.0 * diag / dt, 100), 5000))
    max_curves = int(math.ceil(math.sqrt(2.0 * cfg.max_quads))) + 2
    tracer = _Tracer(grids, h, dt, max_steps)

    padded = np.pad(grids.valid, 1)
    edt = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    flat = np.argmax(edt[rr, cc])
    curves = []
    for family in (0, 1):
        pix_dirs = grids.D[rr, cc, :, family]
        curves.extend(
            _seed_family(grids, tracer, family, cfg.seed_policy, max_curves,
                         pix_pts, pix_dirs, int(flat))
        )
    if not curves:
        raise ExtractionError("no streamline could be traced")

    events, node_pos = _find_crossings(curves, dt)
    edges = _build_edges(curves, events, dt)
    edges = _prune_network(edges, curves)
    if not edges:
        raise ExtractionError("streamline network has no interior crossings")
    cells = _trace_cells(edges, node_pos, h)
    if not cells:
        raise ExtractionError("streamline network closed no cells")

    # assemble quads; vertex keys are shared so neighbouring cells agree
    registry = {}
    pts2d = []

    def key_id(key, pt):
        if key not in registry:
            registry[key] = len(pts2d)
            pts2d.append(np.asarray(pt, dtype=float))
        return registry[key]

    def edge_mid(ei):
        e = edges[ei]
        cv = curves[e.curve]
        return cv.point_at(0.5 * (e.sa + e.sb))

    cell_quads = []
    n_split = 0
    for nodes, orbit, area in cells:
        m = len(nodes)
        quads = []
        if m == 4:
            quads.append([key_id(("n", n), node_pos[n]) for n in nodes])
        else:
            xy = np.asarray([node_pos[n] for n in nodes])
            nxt = np.roll(xy, -1, axis=0)
            cross = xy[:, 0] * nxt[:, 1] - nxt[:, 0] * xy[:, 1]
            a2 = float(np.sum(cross))
            if abs(a2) < 1e-12:
                continue
            center = np.sum((xy + nxt) * cross[:, None], axis=0) / (3.0 * a2)
            cid = key_id(("c", len(cell_quads)), center)
            mids = [key_id(("m", orbit[k][0]), edge_mid(orbit[k][0])) for k in range(m)]
            corners = [key_id(("n", n), node_pos[n]) for n in nodes]
            for k in range(m):
                quads.append([corners[k], mids[k], cid, mids[k - 1]])
        good = True
        for q in quads:
            if len(set(q)) != 4:
                good = False
                break
            ring = np.asarray([pts2d[i] for i in q])
            qa = 0.5 * float(
                np.sum(ring[:, 0] * np.roll(ring[:, 1], -1)
                       - np.roll(ring[:, 0], -1) * ring[:, 1])
            )
            if qa < 1e-6 * h * h:
                good = False
                break
        if not good:
            continue
        if m != 4:
            n_split += 1
        cell_quads.extend(quads)

    if not cell_quads:
        raise ExtractionError("no usable quad cell survived")

    pos3d, params, ok = _lift_points(tri, pts2d)
    faces = [q for q in cell_quads if all(ok[i] for i in q)]
    if not faces:
        raise ExtractionError("no quad cell could be lifted to the surface")
    used = sorted({i for q in faces for i in q})
    remap = {old: new for new, old in enumerate(used)}
    faces = np.asarray([[remap[i] for i in q] for q in faces], dtype=np.int64)

    # counter-clockwise in the canvas means counter-clockwise toward the
    # viewer; flip when the discretized sheet faces away
    v = tri.vertices
    tn = np.cross(v[tri.faces[:, 1]] - v[tri.faces[:, 0]],
                  v[tri.faces[:, 2]] - v[tri.faces[:, 0]])
    if np.median(tn[:, 2]) < 0:
        faces = faces[:, ::-1].copy()

    mesh = QuadMesh(
        vertices=pos3d[used],
        faces=faces,
        params=params[used],
        n_split_cells=n_split,
    )
    mesh.validate()
    return mesh


# ---------------------------------------------------------------------------
# planarization


def _face_projections(vertices, faces):
    """Corner positions projected onto each face's best-fit plane."""
    q = vertices[faces]
    c = q.mean(axis=1, keepdims=True)
    d = q - c
    cov = np.einsum("mki,mkj->mij", d, d)
    _, vec = np.linalg.eigh(cov)
    n = vec[..., 0]
    off = np.einsum("mki,mi->mk", d, n)
    return q - off[..., None] * n[:, None, :]


def planarize(mesh, reference=None, max_iter=100, tol=1e-3, trace=None):
    """Push faces toward planarity, optionally staying near a reference patch.

    Alternates per-face projection onto best-fit planes with a global vertex
    blend (planarity weight 2, reference closeness weight 1) until the worst
    face planarity drops below tol or ``max_iter`` rounds pass.  The worst
    planarity never increases; its value per round is appended to ``trace``
    when given.  Connectivity is untouched.
    """
    out = mesh.copy()
    f = out.faces
    v = out.vertices.copy()
    e = out.edges()
    deg = np.bincount(f.ravel(), minlength=v.shape[0]).astype(float)
    free = deg > 0
    params = None if out.params is None else out.params.copy()

    def pmax_of(verts):
        me = float(np.mean(np.linalg.norm(verts[e[:, 1]] - verts[e[:, 0]], axis=1)))
        return float(np.max(_planarity_batch(verts, f, me)))

    pmax = pmax_of(v)
    if trace is not None:
        trace.append(pmax)
    for _ in range(max_iter):
        if pmax < tol:
            break
        proj = _face_projections(v, f)
        acc = np.zeros_like(v)
        np.add.at(acc, f.ravel(), 2.0 * proj.reshape(-1, 3))
        wsum = 2.0 * deg
        if reference is not None:
            if params is None:
                params, _ = splinekit.foot_points(reference, v)
            else:
                params, _ = splinekit.foot_points(reference, v, prev_params=params)
            feet = splinekit.eval_surface_many(
                reference, params[:, 0], params[:, 1], with_normals=False
            )
            acc += feet
            wsum = wsum + 1.0
        target = np.where(
            free[:, None], acc / np.maximum(wsum, 1e-12)[:, None], v
        )
        # damped acceptance keeps the worst planarity non-increasing
        t = 1.0
        accepted = False
        for _ in range(25):
            cand = v + t * (target - v)
            cm = pmax_of(cand)
            if cm <= pmax + 1e-12:
                v = cand
                pmax = cm
                accepted = True
                break
            t *= 0.5
        if trace is not None:
            trace.append(pmax)
        if not accepted:
            break
    out.vertices = v
    out.params = params
    return out


# ---------------------------------------------------------------------------
# reporting


def mesh_stats(mesh, reference=None):
    """Summary statistics; Hausdorff is directed, mesh toward reference."""
    vals = planarity_values(mesh)
    stats = {
        "n_vertices": int(mesh.vertices.shape[0]),
        "n_faces": int(mesh.faces.shape[0]),
        "P_max": float(np.max(vals)),
        "P_mean": float(np.mean(vals)),
        "n_split_cells": int(mesh.n_split_cells),
        "hausdorff_to_reference": None,
    }
    if reference is not None:
        v = mesh.vertices
        e = mesh.edges()
        samples = np.concatenate(
            [v, 0.5 * (v[e[:, 0]] + v[e[:, 1]]), v[mesh.faces].mean(axis=1)]
        )
        _, d2 = splinekit.foot_points(reference, samples)
        stats["hausdorff_to_reference"] = float(np.sqrt(np.max(d2)))
    return stats
