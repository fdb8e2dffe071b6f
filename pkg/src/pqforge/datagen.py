"""Synthetic sketch corpus: random surfaces rendered with full ground truth.

Two shape families feed the corpus.  Roof patches grow from a random star
polygon: a 30x30 control grid is spread over the interior, heights come from
the smoothest eigenmodes of the fairness operator, and a mild free-form
deformation jitters the footprint.  Quadric patches cut random ellipsoids
and rounded cuboids with a tilted plane and fit the upper cap as a height
field.  Accepted surfaces are rotated about z, rasterized at canvas
resolution, and emitted as sketch documents with masks, depth/normal layers,
a ground-truth direction field, a planarized quad mesh, and depth samples.
"""

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree
from skimage import measure

from . import camera, fieldcdf, quadgen, splinekit
from . import sketchdoc as sd
from .errors import DegenerateFieldError, ExtractionError, InputError, TopologyError
from .shapesolver import HeightFieldLayer
from .visibility import MaskSet, VisClass, validate_assumptions

GRID = splinekit.NET_SIZE
N_BOUNDARY = 4 * (GRID - 1)

LAMBDA_COVER = 1.0
LAMBDA_ATTRACT = 1.0
LAMBDA_FAIR = 10.0
KAPPA_MAX = 5.0
MIN_POLY_AREA = 1.0
TARGET_SAMPLES = 10000


# ---------------------------------------------------------------------------
# recipes


@dataclass(frozen=True)
class ShapeRecipe:
    """Parameters that fully determine one random roof surface."""

    seed: object
    rho: np.ndarray
    theta: np.ndarray
    z_coeffs: np.ndarray
    ffd_xy: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        theta = np.asarray(self.theta, dtype=float)
        z = np.asarray(self.z_coeffs, dtype=float)
        ffd = np.asarray(self.ffd_xy, dtype=float)
        if rho.shape != (N_BOUNDARY,) or theta.shape != (N_BOUNDARY,):
            raise InputError("boundary arrays need one entry per boundary node")
        if np.any(rho < 2.0) or np.any(rho > 10.0):
            raise InputError("boundary radii must lie in [2, 10]")
        if np.any(theta < 0.0) or np.any(theta >= 2.0 * math.pi):
            raise InputError("boundary angles must lie in [0, 2*pi)")
        if np.any(np.diff(theta) < 0.0):
            raise InputError("boundary angles must be sorted ascending")
        if z.shape != (30,) or np.any(np.abs(z) > 1.0):
            raise InputError("need 30 height coefficients in [-1, 1]")
        if ffd.shape != (splinekit.FFD_SIZE,) * 3 + (2,) or np.any(np.abs(ffd) > 0.2):
            raise InputError("lattice displacements must be xy vectors in [-0.2, 0.2]")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "z_coeffs", z)
        object.__setattr__(self, "ffd_xy", ffd)


def make_recipe(seed):
    rng = np.random.default_rng(seed)
    rho = rng.uniform(2.0, 10.0, N_BOUNDARY)
    theta = np.sort(rng.uniform(0.0, 2.0 * math.pi, N_BOUNDARY))
    z = rng.uniform(-1.0, 1.0, 30)
    ffd = rng.uniform(-0.2, 0.2, (splinekit.FFD_SIZE,) * 3 + (2,))
    return ShapeRecipe(seed, rho, theta, z, ffd)


def gen_boundary_xy(recipe):
    """Polygon vertices (rho cos theta, rho sin theta), one per boundary node."""
    return np.stack(
        [recipe.rho * np.cos(recipe.theta), recipe.rho * np.sin(recipe.theta)], axis=1
    )


# ---------------------------------------------------------------------------
# interior spread


def _boundary_path():
    # closed walk over the grid boundary, starting at node (0, 0)
    path = []
    for j in range(GRID - 1):
        path.append((0, j))
    for i in range(GRID - 1):
        path.append((i, GRID - 1))
    for j in range(GRID - 1, 0, -1):
        path.append((GRID - 1, j))
    for i in range(GRID - 1, 0, -1):
        path.append((i, 0))
    return path


def _polygon_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)))


def _points_in_polygon(px, py, poly):
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for k in range(len(poly)):
        if y0[k] == y1[k]:
            continue
        cond = (y0[k] > py) != (y1[k] > py)
        xk = x0[k] + (py - y0[k]) * (x1[k] - x0[k]) / (y1[k] - y0[k])
        inside ^= cond & (px < xk)
    return inside


def _interior_samples(poly):
    # stratified cell centers over the bounding box, kept if inside; the grid
    # pitch is chosen so roughly TARGET_SAMPLES survive
    area = _polygon_area(poly)
    lo = poly.min(axis=0)
    hi = poly.max(axis=0)
    box = float((hi[0] - lo[0]) * (hi[1] - lo[1]))
    g = int(np.clip(math.ceil(math.sqrt(TARGET_SAMPLES * box / max(area, 1e-9))), 100, 280))
    cx = lo[0] + (np.arange(g) + 0.5) * (hi[0] - lo[0]) / g
    cy = lo[1] + (np.arange(g) + 0.5) * (hi[1] - lo[1]) / g
    xx, yy = np.meshgrid(cx, cy, indexing="ij")
    keep = _points_in_polygon(xx.ravel(), yy.ravel(), poly)
    return np.stack([xx.ravel()[keep], yy.ravel()[keep]], axis=1)


@lru_cache(maxsize=1)
def _laplacian_matrix():
    """Per-node Laplacian over the 30x30 grid, axis stencils summed.

    Unlike the surface-fitting fairness rows this one constrains smoothness
    along the grid edges too, which keeps boundary spacing even.
    """
    rows, cols, vals = [], [], []
    for i in range(GRID):
        for j in range(GRID):
            node = i * GRID + j
            if 0 < i < GRID - 1:
                rows += [node] * 3
                cols += [node, node - GRID, node + GRID]
                vals += [1.0, -0.5, -0.5]
            if 0 < j < GRID - 1:
                rows += [node] * 3
                cols += [node, node - 1, node + 1]
                vals += [1.0, -0.5, -0.5]
    n = GRID * GRID
    return sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def _spread_energy(P, poly, bids, iids, samples, assign, attract, L):
    e = float(np.sum((P[bids] - poly) ** 2))
    e += LAMBDA_COVER * float(np.sum((samples - P[iids][assign]) ** 2))
    e += LAMBDA_ATTRACT * float(np.sum((P[iids] - samples[attract]) ** 2))
    fp = L @ P
    e += LAMBDA_FAIR * float(np.sum(fp * fp))
    return e


def solve_interior_xy(candidates, recipe, trace=None):
    """Spread the control grid over the polygon interior.

    Alternates nearest-neighbor assignments between interior control points
    and a fixed stratified sample of the polygon with an exact quadratic
    solve (boundary fidelity + coverage + attraction + fairness), then
    recenters and rescales the grid so its bounding box spans [-4, 4]^2.
    """
    poly = np.asarray(candidates, dtype=float)
    if poly.shape != (N_BOUNDARY, 2):
        raise InputError("need one boundary candidate per boundary node")
    if _polygon_area(poly) < MIN_POLY_AREA:
        raise InputError("polygon area below 1; recipe rejected")
    samples = _interior_samples(poly)
    if len(samples) < 100:
        raise InputError("polygon interior too thin to sample")

    n = GRID * GRID
    bids = np.array([i * GRID + j for i, j in _boundary_path()])
    interior = np.ones(n, dtype=bool)
    interior[bids] = False
    iids = np.nonzero(interior)[0]

    L = _laplacian_matrix()
    LtL = (L.T @ L).tocsc()

    def solve(diag, rhs):
        A = (sparse.diags(diag) + LAMBDA_FAIR * LtL).tocsc()
        return splu(A).solve(rhs)

    # warm start: boundary pinned, fairness fills the interior
    diag0 = np.zeros(n)
    diag0[bids] = 1.0
    rhs0 = np.zeros((n, 2))
    rhs0[bids] = poly
    P = solve(diag0, rhs0)

    stree = cKDTree(samples)
    energies = trace if trace is not None else []
    assign = attract = None
    for _ in range(5):
        ctree = cKDTree(P[iids])
        assign = ctree.query(samples, workers=-1)[1]
        attract = stree.query(P[iids], workers=-1)[1]
        energies.append(_spread_energy(P, poly, bids, iids, samples, assign, attract, L))
        counts = np.bincount(assign, minlength=len(iids)).astype(float)
        sums = np.zeros((len(iids), 2))
        np.add.at(sums, assign, samples)
        diag = np.zeros(n)
        diag[bids] = 1.0
        diag[iids] = LAMBDA_COVER * counts + LAMBDA_ATTRACT
        rhs = np.zeros((n, 2))
        rhs[bids] = poly
        rhs[iids] = LAMBDA_COVER * sums + LAMBDA_ATTRACT * samples[attract]
        P = solve(diag, rhs)
    ctree = cKDTree(P[iids])
    assign = ctree.query(samples, workers=-1)[1]
    attract = stree.query(P[iids], workers=-1)[1]
    energies.append(_spread_energy(P, poly, bids, iids, samples, assign, attract, L))

    lo = P.min(axis=0)
    hi = P.max(axis=0)
    span = float(np.max(hi - lo))
    if span <= 0.0:
        raise InputError("degenerate control spread")
    P = (P - (lo + hi) / 2.0) * (8.0 / span)
    return P.reshape(GRID, GRID, 2)


# ---------------------------------------------------------------------------
# heights and jitter


@lru_cache(maxsize=1)
def _height_basis():
    L = _laplacian_matrix()
    _, vecs = np.linalg.eigh((L.T @ L).toarray())
    return vecs[:, :30].copy()


def gen_heights(recipe):
    """Heights from the 30 smoothest fairness eigenmodes, peak exactly 5."""
    z = _height_basis() @ recipe.z_coeffs
    peak = float(np.max(np.abs(z)))
    if peak < 1e-12:
        raise InputError("height coefficients vanish")
    z *= 5.0 / peak
    np.clip(z, -5.0, 5.0, out=z)
    return z.reshape(GRID, GRID)


def perturb_ffd(net, recipe):
    """Jitter control xy through the trivariate lattice; z passes through."""
    disp = np.zeros((splinekit.FFD_SIZE,) * 3 + (3,))
    disp[..., :2] = recipe.ffd_xy
    pts = net.points.reshape(-1, 3)
    lo, hi = splinekit.FFD_BOUNDS
    if np.any(pts < lo) or np.any(pts > hi):
        raise InputError("control points leave the deformation box; recipe rejected")
    moved = splinekit.ffd_apply(splinekit.FFDLattice(disp), pts)
    return splinekit.ControlNet(moved.reshape(net.points.shape))


def roof_net(recipe):
    """Random roof patch: polygon footprint, eigenmode heights, FFD jitter."""
    xy = solve_interior_xy(gen_boundary_xy(recipe), recipe)
    z = gen_heights(recipe)
    net = splinekit.ControlNet(np.concatenate([xy, z[..., None]], axis=-1))
    return perturb_ffd(net, recipe)


def curvature_accept(net, grid=64, threshold=KAPPA_MAX):
    """Gaussian curvature screen: accept iff max |K| on a parameter grid <= 5."""
    g = np.linspace(0.0, 1.0, grid)
    uu, vv = np.meshgrid(g, g, indexing="ij")
    E, F, G, L, M, N = splinekit.fundamental_forms(net, uu.ravel(), vv.ravel())
    den = E * G - F * F
    K = (L * N - M * M) / np.maximum(den, 1e-30)
    return bool(np.max(np.abs(K)) <= threshold)


# ---------------------------------------------------------------------------
# quadric caps


def _plane_frame(normal):
    n = np.asarray(normal, dtype=float)
    nn = float(np.linalg.norm(n))
    if nn < 1e-12:
        raise InputError("cut normal must be nonzero")
    n = n / nn
    if n[2] < 0.0:
        n = -n
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(n)))] = 1.0
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return t1, t2, n


def _inscribed_rect(inside, probe_radius):
    """Largest safe axis-aligned rectangle inside a convex footprint."""
    g = np.linspace(-probe_radius, probe_radius, 201)
    ss, tt = np.meshgrid(g, g, indexing="ij")
    hit = inside(ss.ravel(), tt.ravel()).reshape(ss.shape)
    if int(hit.sum()) < 40:
        raise InputError("cap footprint too small")
    cs = float(ss[hit].mean())
    ct = float(tt[hit].mean())
    hs = 0.97 * float(np.quantile(np.abs(ss[hit] - cs), 0.995))
    ht = 0.97 * float(np.quantile(np.abs(tt[hit] - ct), 0.995))
    if min(hs, ht) < 1e-6:
        raise InputError("cap footprint too small")
    # convexity: all four corners inside implies the whole rectangle is
    lo, hi = 0.0, 1.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        corner_s = np.array([cs - mid * hs, cs + mid * hs, cs - mid * hs, cs + mid * hs])
        corner_t = np.array([ct - mid * ht, ct - mid * ht, ct + mid * ht, ct + mid * ht])
        if bool(np.all(inside(corner_s, corner_t))):
            lo = mid
        else:
            hi = mid
    hs *= lo * 0.85
    ht *= lo * 0.85
    if min(hs, ht) < 0.25:
        raise InputError("cap footprint too small")
    return cs, ct, hs, ht


def _cap_net(inside, height, probe_radius, fairness=0.02):
    cs, ct, hs, ht = _inscribed_rect(inside, probe_radius)
    gs = np.linspace(cs - hs, cs + hs, 44)
    gt = np.linspace(ct - ht, ct + ht, 44)
    ss, tt = np.meshgrid(gs, gt, indexing="ij")
    hh = height(ss.ravel(), tt.ravel())
    targets = np.stack([ss.ravel(), tt.ravel(), hh], axis=1)

    cgs = np.linspace(cs - hs, cs + hs, GRID)
    cgt = np.linspace(ct - ht, ct + ht, GRID)
    css, ctt = np.meshgrid(cgs, cgt, indexing="ij")
    chh = height(css.ravel(), ctt.ravel()).reshape(GRID, GRID)
    init = splinekit.ControlNet(np.stack([css, ctt, chh], axis=-1))

    u0 = (ss.ravel() - (cs - hs)) / (2.0 * hs)
    v0 = (tt.ravel() - (ct - ht)) / (2.0 * ht)
    params0 = np.stack([u0, v0], axis=1)
    net, _ = splinekit.fit_surface_to_points(targets, init, fairness, params0=params0)
    return net, {"half_s": hs, "half_t": ht, "center": [cs, ct]}


def ellipsoid_cap_net(semi, normal=(0.0, 0.0, 1.0), offset=0.0):
    """Fit the cap an offset plane cuts from an ellipsoid.

    offset is the plane's signed distance from the center as a fraction of
    the support distance along the upward cut normal; 0 cuts through the
    center.  The patch lives in the cut plane's own frame (s, t, height).
    """
    a = np.asarray(semi, dtype=float)
    if a.shape != (3,) or np.any(a <= 0.0):
        raise InputError("need three positive semi-axes")
    t1, t2, n = _plane_frame(normal)
    hmax = float(np.sqrt(np.sum((a * n) ** 2)))
    d = float(offset) * hmax
    if (hmax - d) / (2.0 * hmax) < 0.05:
        raise InputError("cap below 5% of the shape; resample")

    na2 = n / a**2
    quad_a = float(np.sum(n * na2))

    def coeffs(s, t):
        base = d * n + np.outer(s, t1) + np.outer(t, t2)
        quad_b = 2.0 * (base @ na2)
        quad_c = np.sum((base / a) ** 2, axis=1) - 1.0
        return quad_b, quad_c

    def inside(s, t):
        _, c = coeffs(s, t)
        return c < -1e-9

    def height(s, t):
        b, c = coeffs(s, t)
        disc = np.maximum(b * b - 4.0 * quad_a * c, 0.0)
        return (-b + np.sqrt(disc)) / (2.0 * quad_a)

    return _cap_net(inside, height, probe_radius=float(a.max()) * 1.05)


def rounded_box_cap_net(sides, radius, normal=(0.0, 0.0, 1.0), offset=0.0):
    """Cap cut from a rounded cuboid (box of the given sides, edge radius)."""
    s3 = np.asarray(sides, dtype=float)
    if s3.shape != (3,) or np.any(s3 <= 0.0):
        raise InputError("need three positive side lengths")
    r = float(radius)
    if not 0.0 < r <= 0.5 * float(s3.min()):
        raise InputError("edge radius must lie in (0, half the shortest side]")
    inner = s3 / 2.0 - r
    t1, t2, n = _plane_frame(normal)
    hmax = float(np.sum(inner * np.abs(n)) + r)
    d = float(offset) * hmax
    if (hmax - d) / (2.0 * hmax) < 0.05:
        raise InputError("cap below 5% of the shape; resample")

    def sdf(p):
        q = np.abs(p) - inner
        out = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return out + np.minimum(np.max(q, axis=-1), 0.0) - r

    def inside(s, t):
        return sdf(d * n + np.outer(s, t1) + np.outer(t, t2)) < -1e-9

    def height(s, t):
        base = d * n + np.outer(s, t1) + np.outer(t, t2)
        lo = np.zeros(len(base))
        hi = np.full(len(base), hmax - d + 1e-3)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            outside = sdf(base + mid[:, None] * n) > 0.0
            hi[outside] = mid[outside]
            lo[~outside] = mid[~outside]
        return 0.5 * (lo + hi)

    return _cap_net(inside, height, probe_radius=float(np.linalg.norm(s3)) * 0.55)


def gen_quadric_patch(rng):
    """Draw one admissible quadric cap; returns (net, info)."""
    for _ in range(60):
        # all draws happen before any rejection so the stream stays aligned
        use_ellipsoid = bool(rng.random() < 0.5)
        v = rng.normal(size=3)
        v[2] = abs(v[2])
        v /= np.linalg.norm(v)
        off = float(rng.uniform(0.0, 0.9))
        if use_ellipsoid:
            semi = rng.uniform(2.0, 5.0, 3)
            extra = {"kind": "ellipsoid", "semi": [float(x) for x in semi]}
        else:
            s3 = rng.uniform(2.0, 5.0, 3)
            r = float(rng.uniform(0.2, 0.5) * s3.min())
            extra = {"kind": "cuboid", "sides": [float(x) for x in s3], "radius": r}
        if v[2] < 0.2:
            continue
        try:
            if use_ellipsoid:
                net, info = ellipsoid_cap_net(semi, v, off)
            else:
                net, info = rounded_box_cap_net(s3, r, v, off)
        except InputError:
            continue
        info = {**extra, "normal": [float(x) for x in v], "offset": off, **info}
        return net, info
    raise InputError("no admissible quadric cap in 60 draws")


# ---------------------------------------------------------------------------
# rendering


@dataclass
class DatasetSample:
    """One rendered corpus entry with its ground truth."""

    net: splinekit.ControlNet
    k: int
    frame: camera.CanvasFrame
    doc: sd.SketchDocument
    masks: MaskSet
    depth_visible: np.ndarray
    depth_occluded: np.ndarray
    normal_visible: np.ndarray
    normal_occluded: np.ndarray
    manifest: dict = dc_field(default_factory=dict)
    field: object = None
    mesh: object = None
    stats: object = None


def _relabel_upper_left(points, frame):
    # try the eight grid relabelings in a fixed order; all describe the same
    # surface, only the corner naming changes
    for pts in (
        points,
        points[::-1],
        points[:, ::-1],
        points[::-1, ::-1],
        points.transpose(1, 0, 2),
        points.transpose(1, 0, 2)[::-1],
        points.transpose(1, 0, 2)[:, ::-1],
        points.transpose(1, 0, 2)[::-1, ::-1],
    ):
        row, col = frame.xy_to_pixel(pts[0, 0, 0], pts[0, 0, 1])
        if row < frame.size / 2.0 and col < frame.size / 2.0:
            return np.ascontiguousarray(pts)
    return None


def _layer_fields(net_cam, raster, which):
    mask = (raster.mask1 if which == 1 else raster.mask2).copy()
    param = raster.param1 if which == 1 else raster.param2
    depth_r = raster.depth1 if which == 1 else raster.depth2
    size = mask.shape[0]
    depth = np.full((size, size), np.nan)
    normal = np.full((size, size, 3), np.nan)
    rr, cc = np.nonzero(mask)
    if rr.size:
        uv = param[rr, cc]
        _, nr = splinekit.eval_surface_many(net_cam, uv[:, 0], uv[:, 1])
        ok = np.isfinite(nr).all(axis=1)
        rr, cc, nr = rr[ok], cc[ok], nr[ok]
        mask[:] = False
        mask[rr, cc] = True
        depth[rr, cc] = depth_r[rr, cc]
        normal[rr, cc] = nr
    return mask, depth, normal


def _squash_circular(flags, min_run):
    """Absorb circular runs shorter than min_run into their neighbors."""
    flags = flags.copy()
    n = len(flags)
    for _ in range(n):
        change = np.nonzero(flags != np.roll(flags, 1))[0]
        if len(change) <= 1:
            break
        lengths = (np.roll(change, -1) - change) % n
        k = int(np.argmin(lengths))
        if lengths[k] >= min_run:
            break
        idx = (change[k] + np.arange(lengths[k])) % n
        flags[idx] = ~flags[idx]
    return flags


def _boundary_strokes(net_cam, raster, frame):
    per_edge = 320
    t = np.arange(per_edge) / per_edge
    u = np.concatenate([t, np.ones(per_edge), 1.0 - t, np.zeros(per_edge)])
    v = np.concatenate([np.zeros(per_edge), t, np.ones(per_edge), 1.0 - t])
    pos = splinekit.eval_surface_many(net_cam, u, v, with_normals=False)
    prow, pcol = frame.xy_to_pixel(pos[:, 0], pos[:, 1])
    dep = camera.depth_from_z(pos[:, 2])
    ir = np.clip(np.round(prow).astype(int), 0, frame.size - 1)
    ic = np.clip(np.round(pcol).astype(int), 0, frame.size - 1)
    d1 = raster.depth1[ir, ic]
    both = np.isfinite(raster.depth1) & np.isfinite(raster.depth2)
    gap = float(np.median((raster.depth2 - raster.depth1)[both])) if both.any() else 0.0
    tol = max(0.08, 0.2 * gap)
    occluded = _squash_circular(np.isfinite(d1) & (dep > d1 + tol), 10)

    pts = np.stack([pcol, prow], axis=1)
    n = len(pts)
    if occluded.all() or not occluded.any():
        kind = sd.StrokeKind.OCCLUDED if occluded.all() else sd.StrokeKind.VISIBLE
        ring = np.vstack([pts[::2], pts[:1]])
        return [sd.Stroke(kind, ring)]
    strokes = []
    change = np.nonzero(occluded != np.roll(occluded, 1))[0]
    for s0, s1 in zip(change, np.roll(change, -1)):
        length = int((s1 - s0) % n)
        # share exactly one endpoint sample with the next run so the stamps
        # stay watertight without overlapping along an arc
        idx = (s0 + np.arange(length + 1)) % n
        sel = idx[::2]
        if sel[-1] != idx[-1]:
            sel = np.append(sel, idx[-1])
        kind = sd.StrokeKind.OCCLUDED if occluded[s0] else sd.StrokeKind.VISIBLE
        strokes.append(sd.Stroke(kind, pts[sel]))
    return strokes


def _contour_strokes(net_cam, frame, grid=224):
    g = np.linspace(0.0, 1.0, grid)
    uu, vv = np.meshgrid(g, g, indexing="ij")
    _, nr = splinekit.eval_surface_many(net_cam, uu.ravel(), vv.ravel())
    nz = np.nan_to_num(nr[:, 2].reshape(grid, grid), nan=0.0)
    strokes = []
    for arc in measure.find_contours(nz, 0.0):
        au = arc[:, 0] / (grid - 1.0)
        av = arc[:, 1] / (grid - 1.0)
        pos = splinekit.eval_surface_many(net_cam, au, av, with_normals=False)
        prow, pcol = frame.xy_to_pixel(pos[:, 0], pos[:, 1])
        pts = np.stack([pcol, prow], axis=1)
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        total = float(cum[-1])
        closed = bool(np.all(arc[0] == arc[-1]))
        # open contours end tangentially on the boundary stroke; trim a few
        # pixels so the center stamps only meet at isolated points
        trim = 0.0 if closed else 2.5
        if total - 2.0 * trim < 12.0:
            continue
        keep = (cum >= trim) & (cum <= total - trim)
        kp = pts[keep]
        ck = cum[keep]
        sel = [0]
        for i in range(1, len(kp)):
            if ck[i] - ck[sel[-1]] >= 2.0 or i == len(kp) - 1:
                sel.append(i)
        strokes.append(sd.Stroke(sd.StrokeKind.CONTOUR, kp[np.asarray(sel)]))
    return strokes


def _feature_strokes(mesh, frame, safe, rng, want):
    """Random straight-ish edge walks on the mesh, projected to the canvas."""
    edges = mesh.edges()
    verts = mesh.vertices
    adj = [[] for _ in range(len(verts))]
    for a, b in edges:
        adj[int(a)].append(int(b))
        adj[int(b)].append(int(a))
    prow, pcol = frame.xy_to_pixel(verts[:, 0], verts[:, 1])
    size = safe.shape[0]

    def path_ok(path):
        for a, b in zip(path[:-1], path[1:]):
            pa = np.array([pcol[a], prow[a]])
            pb = np.array([pcol[b], prow[b]])
            steps = max(int(math.ceil(np.linalg.norm(pb - pa))), 1)
            ts = np.arange(steps + 1) / steps
            xs = np.round(pa[0] + (pb[0] - pa[0]) * ts).astype(int)
            ys = np.round(pa[1] + (pb[1] - pa[1]) * ts).astype(int)
            if np.any((xs < 0) | (xs >= size) | (ys < 0) | (ys >= size)):
                return False
            if not np.all(safe[ys, xs]):
                return False
        return True

    out = []
    for _ in range(80):
        if len(out) >= want:
            break
        e = edges[int(rng.integers(len(edges)))]
        n_seg = int(rng.integers(3, 9))
        path = [int(e[0]), int(e[1])]
        while len(path) - 1 < n_seg:
            tail, prev = path[-1], path[-2]
            d = verts[tail] - verts[prev]
            d = d / (np.linalg.norm(d) + 1e-30)
            best, best_dot = -1, 0.5
            for c in adj[tail]:
                if c == prev or c in path:
                    continue
                e2 = verts[c] - verts[tail]
                dot = float(d @ e2) / (float(np.linalg.norm(e2)) + 1e-30)
                if dot > best_dot:
                    best, best_dot = c, dot
            if best < 0:
                break
            path.append(best)
        if len(path) < 3 or not path_ok(path):
            continue
        p = np.stack([pcol[path], prow[path]], axis=1)
        if float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum()) < 10.0:
            continue
        out.append(sd.Stroke(sd.StrokeKind.FEATURE, p))
    return out


def render_sample(net, k, rng, level="full"):
    """Render one surface into a corpus sample; None when rejected.

    level "full" adds the ground-truth field, quad mesh, and feature
    strokes; "sketch" stops after the document, masks, and depth layers.
    """
    if level not in ("full", "sketch"):
        raise InputError("level must be 'full' or 'sketch'")
    k = int(k)
    if not 1 <= k <= 60:
        raise InputError("rotation index must lie in 1..60")

    rot = camera.rot_z(k * math.pi / 30.0)
    cam = camera.world_to_cam(net.points.reshape(-1, 3) @ rot.T).reshape(GRID, GRID, 3)

    xy = cam[..., :2].reshape(-1, 2)
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    frame = camera.CanvasFrame(
        center_x=float((lo[0] + hi[0]) / 2.0), center_y=float((lo[1] + hi[1]) / 2.0)
    )
    row, col = frame.xy_to_pixel(xy[:, 0], xy[:, 1])
    margin = 6.0
    if (
        min(float(row.min()), float(col.min())) < margin
        or max(float(row.max()), float(col.max())) > frame.size - 1 - margin
    ):
        return None
    pts = _relabel_upper_left(cam, frame)
    if pts is None:
        return None
    net_cam = splinekit.ControlNet(pts)

    raster = camera.rasterize_surface(
        lambda u, v: splinekit.eval_surface_many(net_cam, u, v, with_normals=False), frame
    )
    if int(raster.mask1.sum()) < 500:
        return None
    if int(raster.overflow.sum()) > 12:
        return None

    m1, depth_vis, normal_vis = _layer_fields(net_cam, raster, 1)
    m2, depth_occ, normal_occ = _layer_fields(net_cam, raster, 2)
    nz1 = normal_vis[..., 2]
    nz2 = normal_occ[..., 2]
    masks = MaskSet(
        vf=m1 & (nz1 >= 0.0),
        vb=m1 & (nz1 < 0.0),
        of=m2 & (nz2 >= 0.0),
        ob=m2 & (nz2 < 0.0),
    )

    strokes = _boundary_strokes(net_cam, raster, frame)
    strokes += _contour_strokes(net_cam, frame)
    doc0 = sd.SketchDocument(strokes=list(strokes), samples=[])
    raster0 = sd.rasterize(doc0)
    if validate_assumptions(doc0, raster=raster0):
        return None

    field_map = mesh = stats = None
    features = []
    if level == "full":
        stamp = np.zeros((frame.size, frame.size), dtype=bool)
        for cover in raster0.stroke_pixels:
            stamp |= cover
        seed_ok = ndimage.binary_erosion(masks.visible, iterations=3) & ~stamp
        ys, xs = np.nonzero(seed_ok)
        if ys.size < 32:
            return None
        n_dirs = int(rng.integers(2, 6))
        pick = rng.choice(ys.size, size=n_dirs, replace=False)
        dirs = []
        for j in pick:
            ang = float(rng.uniform(0.0, math.pi))
            dirs.append(((int(xs[j]), int(ys[j])), (math.cos(ang), math.sin(ang))))
        try:
            field_map = fieldcdf.optimize_field(net_cam, masks, features=dirs, frame=frame)
            tri = quadgen.discretize_surface(net_cam, masks, frame=frame)
            lifted = fieldcdf.lift_to_tangent(field_map, net_cam, frame=frame)["visible"]
            mesh0 = quadgen.extract_quads(tri, lifted, quadgen.TraceConfig())
            mesh = quadgen.planarize(mesh0, reference=net_cam, max_iter=40, tol=1.5e-3)
        except (ExtractionError, DegenerateFieldError, TopologyError, InputError):
            return None
        stats = quadgen.mesh_stats(mesh)
        safe = ndimage.binary_erosion(masks.visible, iterations=4) & ~ndimage.binary_dilation(
            stamp, iterations=1
        )
        want = int(rng.integers(2, 7))
        features = _feature_strokes(mesh, frame, safe, rng, want)
        if len(features) < 2:
            return None

    depth_ok = ndimage.binary_erosion(m1, iterations=3) & np.isfinite(depth_vis)
    ys, xs = np.nonzero(depth_ok)
    if ys.size < 8:
        return None
    n_samples = int(rng.integers(2, 7))
    pick = rng.choice(ys.size, size=min(n_samples, ys.size), replace=False)
    samples = [
        sd.DepthSample(
            x=int(xs[j]), y=int(ys[j]), layer="visible", depth=float(depth_vis[ys[j], xs[j]])
        )
        for j in pick
    ]

    doc = sd.SketchDocument(strokes=list(strokes) + list(features), samples=samples)
    if features and validate_assumptions(doc):
        return None

    return DatasetSample(
        net=net_cam,
        k=k,
        frame=frame,
        doc=doc,
        masks=masks,
        depth_visible=depth_vis,
        depth_occluded=depth_occ,
        normal_visible=normal_vis,
        normal_occluded=normal_occ,
        manifest={"k": k, "level": level, "frame": frame.to_dict()},
        field=field_map,
        mesh=mesh,
        stats=stats,
    )


def sample_layers(sample):
    """Ground-truth layers keyed by visibility class, ready for the solver."""
    out = {}
    groups = [
        (VisClass.VISIBLE_FRONT, sample.masks.vf, sample.depth_visible, sample.normal_visible),
        (VisClass.VISIBLE_BACK, sample.masks.vb, sample.depth_visible, sample.normal_visible),
        (VisClass.OCCLUDED_FRONT, sample.masks.of, sample.depth_occluded, sample.normal_occluded),
        (VisClass.OCCLUDED_BACK, sample.masks.ob, sample.depth_occluded, sample.normal_occluded),
    ]
    for vis_class, mask, depth, normal in groups:
        if mask.any():
            out[vis_class] = HeightFieldLayer(vis_class, mask, depth, normal)
    return out


# ---------------------------------------------------------------------------
# corpus writer


def _build_sample(seed, index):
    for attempt in range(60):
        rng = np.random.default_rng([seed, index, attempt])
        roll = float(rng.random())
        try:
            if roll < 0.6:
                net = roof_net(make_recipe([seed, index, attempt, 1]))
                info = {"kind": "roof"}
            else:
                net, info = gen_quadric_patch(rng)
            if not curvature_accept(net):
                continue
        except InputError:
            continue
        for _ in range(6):
            k = int(rng.integers(1, 61))
            s = render_sample(net, k, rng, level="full")
            if s is not None:
                s.manifest = {
                    **{key: val for key, val in info.items()},
                    "seed": [seed, index],
                    "attempt": attempt,
                    "k": k,
                    "level": "full",
                    "frame": s.frame.to_dict(),
                }
                return s
    raise InputError(f"no admissible sample for index {index} after 60 attempts")


def _write_sample(dirpath, s):
    dirpath.mkdir(parents=True, exist_ok=True)
    (dirpath / "manifest.json").write_text(json.dumps(s.manifest, sort_keys=True, indent=1) + "\n")
    sd.save_doc(s.doc, dirpath / "sketch.json")
    (dirpath / "net.json").write_text(
        json.dumps(splinekit.net_to_dict(s.net), sort_keys=True) + "\n"
    )
    s.masks.save(dirpath)
    sd.save_depth_png(s.depth_visible, dirpath / "depth_visible.png")
    sd.save_depth_png(s.depth_occluded, dirpath / "depth_occluded.png")
    sd.save_normals_png(s.normal_visible, dirpath / "normals_visible.png")
    sd.save_normals_png(s.normal_occluded, dirpath / "normals_occluded.png")
    s.field.save(dirpath / "field.pqf4")
    s.mesh.save_obj(dirpath / "mesh.obj")


def generate_corpus(out_dir, count, seed, workers=None):
    """Write `count` samples under out_dir; returns the sample directories.

    Every sample is derived from (seed, index) alone, so reruns and worker
    counts cannot change the output bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if workers is None:
        workers = min(8, os.cpu_count() or 1)
    indices = list(range(int(count)))
    if workers > 1 and len(indices) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            built = list(pool.map(lambda i: _build_sample(seed, i), indices))
    else:
        built = [_build_sample(seed, i) for i in indices]
    dirs = []
    for i, s in zip(indices, built):
        d = out / f"sample_{i:05d}"
        _write_sample(d, s)
        dirs.append(d)
    return dirs


def load_sample(dirpath):
    """Read one corpus directory back into memory."""
    d = Path(dirpath)
    manifest = json.loads((d / "manifest.json").read_text())
    frame = (
        camera.CanvasFrame.from_dict(manifest["frame"])
        if "frame" in manifest
        else camera.CanvasFrame()
    )
    return {
        "manifest": manifest,
        "frame": frame,
        "doc": sd.load_doc(d / "sketch.json"),
        "net": splinekit.net_from_dict(json.loads((d / "net.json").read_text())),
        "masks": MaskSet.load(d),
        "depth_visible": sd.load_depth_png(d / "depth_visible.png"),
        "depth_occluded": sd.load_depth_png(d / "depth_occluded.png"),
        "normals_visible": sd.load_normals_png(d / "normals_visible.png"),
        "normals_occluded": sd.load_normals_png(d / "normals_occluded.png"),
        "field": fieldcdf.FieldMap.load(d / "field.pqf4"),
        "mesh": quadgen.load_obj(d / "mesh.obj"),
    }
