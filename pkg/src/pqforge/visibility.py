"""Minimal regions, orientation propagation, and visibility mask composition.

Structural strokes partition the enclosed sketch area into minimal regions
(4-connected free pixels, 8-connected stroke barriers).  Orientation spreads
from an arbitrary region through the region graph: crossing a visible
boundary flips front/back, crossing an occluded boundary keeps it.  Regions
that touch a contour line additionally carry an occluded layer with the
opposite orientation.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from . import sketchdoc as sd
from .errors import InconsistentSketchError, SketchViolation, TopologyError

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
# minimum shared stroke pixels for regions to count as sharing an arc
_EDGE_MIN_PIXELS = 3


class Orientation(Enum):
    FRONT = "front"
    BACK = "back"

    def flipped(self):
        return Orientation.BACK if self is Orientation.FRONT else Orientation.FRONT


class VisClass(Enum):
    VISIBLE_FRONT = "vf"
    VISIBLE_BACK = "vb"
    OCCLUDED_FRONT = "of"
    OCCLUDED_BACK = "ob"


@dataclass
class MinimalRegion:
    id: int
    mask: np.ndarray
    area: int
    # stroke index -> (kind, shared pixel count)
    strokes: dict


@dataclass
class RegionGraph:
    regions: list
    # (region a, region b, StrokeKind, stroke index)
    edges: list

    def to_dict(self):
        return {
            "regions": [
                {"id": r.id, "area": r.area, "strokes": sorted(r.strokes)} for r in self.regions
            ],
            "edges": [
                {"a": a, "b": b, "kind": k.value, "stroke": s} for a, b, k, s in self.edges
            ],
        }


@dataclass
class MaskSet:
    vf: np.ndarray
    vb: np.ndarray
    of: np.ndarray
    ob: np.ndarray

    @property
    def visible(self):
        return self.vf | self.vb

    @property
    def occluded(self):
        return self.of | self.ob

    def by_class(self):
        return {
            VisClass.VISIBLE_FRONT: self.vf,
            VisClass.VISIBLE_BACK: self.vb,
            VisClass.OCCLUDED_FRONT: self.of,
            VisClass.OCCLUDED_BACK: self.ob,
        }

    def save(self, dirpath):
        for name, mask in (("vf", self.vf), ("vb", self.vb), ("of", self.of), ("ob", self.ob)):
            sd.save_mask_png(mask, f"{dirpath}/{name}.png")

    @classmethod
    def load(cls, dirpath):
        return cls(*(sd.load_mask_png(f"{dirpath}/{n}.png") for n in ("vf", "vb", "of", "ob")))


def _exterior_flood(barrier):
    """Pixels 4-connected to the canvas border through non-barrier cells."""
    free = ~barrier
    labels, _ = ndimage.label(free, structure=_CROSS)
    border = np.unique(
        np.concatenate([labels[0, :], labels[-1, :], labels[:, 0], labels[:, -1]])
    )
    border = border[border != 0]
    return np.isin(labels, border) & free


def extract_minimal_regions(doc, raster=None):
    """Flood-fill the enclosed sketch area into minimal regions.

    Returns (regions, label_map, raster); label_map holds region id + 1 at
    region pixels and 0 elsewhere.
    """
    if raster is None:
        raster = sd.rasterize(doc)
    structural_ids = [
        i for i, s in enumerate(doc.strokes) if s.kind in sd.STRUCTURAL_KINDS
    ]
    if not structural_ids:
        raise TopologyError("sketch has no structural strokes")
    barrier = np.zeros((doc.canvas, doc.canvas), dtype=bool)
    for i in structural_ids:
        barrier |= raster.stroke_pixels[i]
    exterior = _exterior_flood(barrier)
    interior = ~barrier & ~exterior
    labels, count = ndimage.label(interior, structure=_CROSS)
    if count == 0:
        raise TopologyError("outer boundary is open: no enclosed region")

    regions = []
    for rid in range(1, count + 1):
        mask = labels == rid
        regions.append(
            MinimalRegion(id=rid - 1, mask=mask, area=int(mask.sum()), strokes={})
        )

    # stroke adjacency: count labeled pixels in the 8-neighborhood of stroke cover
    for i in structural_ids:
        cover = raster.stroke_pixels[i]
        near = ndimage.binary_dilation(cover, structure=np.ones((3, 3), dtype=bool))
        touched = labels[near & (labels > 0)]
        if touched.size == 0:
            continue
        ids, cnt = np.unique(touched, return_counts=True)
        for rid, c in zip(ids, cnt):
            if c >= _EDGE_MIN_PIXELS:
                regions[rid - 1].strokes[i] = (doc.strokes[i].kind, int(c))
    return regions, labels, raster


def build_region_graph(doc, regions, labels, raster):
    """Regions sharing a stroke along positive arc length become graph edges.

    Support is counted on centerline pixels whose radius-2 window sees both
    regions.  The stamped band is one pixel to either side of the centerline,
    so radius 2 reaches the free pixels flanking the stroke, while a
    transversal crossing contributes only a couple of pixels and stays below
    the threshold.
    """
    edges = []
    size = labels.shape[0]
    for i, stroke in enumerate(doc.strokes):
        if stroke.kind not in sd.STRUCTURAL_KINDS:
            continue
        rr, cc = np.nonzero(raster.stroke_center[i])
        if rr.size == 0:
            continue
        win = []
        for dr in range(-2, 3):
            for dc in range(-2, 3):
                if dr == 0 and dc == 0:
                    continue
                r2 = np.clip(rr + dr, 0, size - 1)
                c2 = np.clip(cc + dc, 0, size - 1)
                win.append(labels[r2, c2])
        win = np.stack(win, axis=1)
        present = np.unique(win)
        present = present[present > 0]
        for ai in range(present.size):
            has_a = (win == present[ai]).any(axis=1)
            for bi in range(ai + 1, present.size):
                has_b = (win == present[bi]).any(axis=1)
                if np.count_nonzero(has_a & has_b) >= _EDGE_MIN_PIXELS:
                    edges.append(
                        (int(present[ai]) - 1, int(present[bi]) - 1, stroke.kind, i)
                    )
    return RegionGraph(regions=regions, edges=edges)


def propagate_orientation(graph, seed=0):
    """Label every region front/back; result is independent of the seed.

    Orientation flips across visible boundaries and is preserved across
    occluded boundaries.  Per connected component the labeling is normalized
    so the front area is at least the back area.
    """
    n = len(graph.regions)
    adj = {i: [] for i in range(n)}
    for a, b, kind, si in graph.edges:
        if kind is sd.StrokeKind.VISIBLE:
            flip = True
        elif kind is sd.StrokeKind.OCCLUDED:
            flip = False
        else:
            continue  # contour lines border the background, not another region
        adj[a].append((b, flip, si))
        adj[b].append((a, flip, si))

    labels = {}
    parent = {}
    order = [seed] + [i for i in range(n) if i != seed]
    for start in order:
        if start in labels:
            continue
        comp = [start]
        labels[start] = Orientation.FRONT
        parent[start] = None
        queue = [start]
        while queue:
            cur = queue.pop(0)
            for (nb, flip, si) in adj[cur]:
                want = labels[cur].flipped() if flip else labels[cur]
                if nb not in labels:
                    labels[nb] = want
                    parent[nb] = cur
                    comp.append(nb)
                    queue.append(nb)
                elif labels[nb] is not want:
                    cycle = [nb, cur]
                    walk = cur
                    while parent[walk] is not None and walk != nb:
                        walk = parent[walk]
                        cycle.append(walk)
                    ids = [graph.regions[c].id for c in cycle]
                    raise InconsistentSketchError(
                        [
                            SketchViolation(
                                "orientation",
                                f"conflicting orientation around regions {ids}",
                            )
                        ]
                    )
        front = sum(graph.regions[i].area for i in comp if labels[i] is Orientation.FRONT)
        back = sum(graph.regions[i].area for i in comp if labels[i] is Orientation.BACK)
        if back > front:
            for i in comp:
                labels[i] = labels[i].flipped()
    return labels


def contour_incident(region):
    return any(kind is sd.StrokeKind.CONTOUR for kind, _ in region.strokes.values())


def derive_occluded(regions, orientations):
    """Occluded layers exist exactly over contour-incident regions, flipped."""
    out = {}
    for r in regions:
        if contour_incident(r):
            out[r.id] = orientations[r.id].flipped()
    return out


def compose_masks(regions, orientations, occluded):
    shape = regions[0].mask.shape
    ms = MaskSet(
        vf=np.zeros(shape, dtype=bool),
        vb=np.zeros(shape, dtype=bool),
        of=np.zeros(shape, dtype=bool),
        ob=np.zeros(shape, dtype=bool),
    )
    for r in regions:
        if orientations[r.id] is Orientation.FRONT:
            ms.vf |= r.mask
        else:
            ms.vb |= r.mask
        occ = occluded.get(r.id)
        if occ is Orientation.FRONT:
            ms.of |= r.mask
        elif occ is Orientation.BACK:
            ms.ob |= r.mask
    return ms


def solve_masks(doc, raster=None, seed=0):
    """Full labeling pipeline: regions -> orientations -> mask set."""
    regions, labels, raster = extract_minimal_regions(doc, raster)
    graph = build_region_graph(doc, regions, labels, raster)
    orientations = propagate_orientation(graph, seed=seed)
    occluded = derive_occluded(regions, orientations)
    masks = compose_masks(regions, orientations, occluded)
    return masks, graph, labels, raster


# ---------------------------------------------------------------------------
# contour band


@dataclass
class ContourBand:
    mask: np.ndarray  # pixels within the band distance of a contour stroke

    def omega_pairs(self, eligible):
        """Ordered pixel pairs (i, j) with j in {i, up, right, up-right}.

        ``eligible`` is the mask of pixels carrying both a visible and an
        occluded layer; both endpoints must be in the band and eligible.
        Returns index arrays (ri, ci, rj, cj).
        """
        ok = self.mask & eligible
        rr, cc = np.nonzero(ok)
        out_i_r, out_i_c, out_j_r, out_j_c = [], [], [], []
        for (dr, dc) in ((0, 0), (-1, 0), (0, 1), (-1, 1)):
            r2 = rr + dr
            c2 = cc + dc
            inb = (r2 >= 0) & (r2 < ok.shape[0]) & (c2 >= 0) & (c2 < ok.shape[1])
            sel = np.zeros(rr.size, dtype=bool)
            sel[inb] = ok[r2[inb], c2[inb]]
            out_i_r.append(rr[sel])
            out_i_c.append(cc[sel])
            out_j_r.append(r2[sel])
            out_j_c.append(c2[sel])
        return (
            np.concatenate(out_i_r),
            np.concatenate(out_i_c),
            np.concatenate(out_j_r),
            np.concatenate(out_j_c),
        )


CONTOUR_BAND_RADIUS = 4.0


def build_contour_band(doc, raster, radius=CONTOUR_BAND_RADIUS):
    """Pixels within ``radius`` (Euclidean) of any contour centerline."""
    size = doc.canvas
    contour = np.zeros((size, size), dtype=bool)
    for i, s in enumerate(doc.strokes):
        if s.kind is sd.StrokeKind.CONTOUR:
            contour |= raster.stroke_center[i]
    if not contour.any():
        return ContourBand(mask=np.zeros((size, size), dtype=bool))
    dist = ndimage.distance_transform_edt(~contour)
    return ContourBand(mask=dist <= radius)


# ---------------------------------------------------------------------------
# assumption validation


def validate_assumptions(doc, raster=None):
    """Check the 2D-verifiable sketch constraints; returns violations.

    Clause ids: "b" single enclosed disk, "d" occluded parts reachable only
    through a contour, "e" strokes meet at isolated points only, "feature"
    feature lines inside the enclosed area.  3D-only clauses are not checkable
    from a sketch and are not guessed at.
    """
    if raster is None:
        raster = sd.rasterize(doc)
    violations = []
    size = doc.canvas

    structural_ids = [i for i, s in enumerate(doc.strokes) if s.kind in sd.STRUCTURAL_KINDS]
    if not structural_ids:
        return [SketchViolation("b", "no structural strokes enclose a region")]
    barrier = np.zeros((size, size), dtype=bool)
    for i in structural_ids:
        barrier |= raster.stroke_pixels[i]
    exterior = _exterior_flood(barrier)
    interior = ~barrier & ~exterior
    labels, count = ndimage.label(interior, structure=_CROSS)
    if count == 0:
        violations.append(SketchViolation("b", "outer boundary is open or encloses nothing"))
    else:
        enclosed = ~exterior
        encl_labels, encl_count = ndimage.label(enclosed, structure=_CROSS)
        with_pixels = np.unique(encl_labels[(labels > 0)])
        with_pixels = with_pixels[with_pixels != 0]
        if with_pixels.size > 1:
            violations.append(
                SketchViolation("b", f"{with_pixels.size} disjoint enclosed areas; expected one")
            )

    # (d) occluded boundaries must attach to a contour-incident region
    if count > 0:
        regions, labels2, _ = extract_minimal_regions(doc, raster)
        incident = {r.id for r in regions if contour_incident(r)}
        for i in structural_ids:
            if doc.strokes[i].kind is not sd.StrokeKind.OCCLUDED:
                continue
            touching = {
                r.id
                for r in regions
                if i in r.strokes
            }
            if touching and not (touching & incident):
                violations.append(
                    SketchViolation(
                        "d",
                        f"occluded boundary stroke {i} borders no contour-incident region",
                    )
                )

    # (e) structural strokes cross only at isolated points
    centers = [raster.stroke_center[i] for i in structural_ids]
    for ai in range(len(structural_ids)):
        for bi in range(ai + 1, len(structural_ids)):
            shared = centers[ai] & centers[bi]
            if not shared.any():
                continue
            rr, cc = np.nonzero(shared)
            dens = ndimage.uniform_filter(shared.astype(float), size=5) * 25.0
            if np.any(dens[rr, cc] > 2.5):
                violations.append(
                    SketchViolation(
                        "e",
                        f"strokes {structural_ids[ai]} and {structural_ids[bi]} overlap along an arc",
                    )
                )

    # feature strokes must stay inside the enclosed area
    ext_safe = ndimage.binary_erosion(exterior, iterations=2)
    for i, s in enumerate(doc.strokes):
        if s.kind is not sd.StrokeKind.FEATURE:
            continue
        if np.any(raster.stroke_center[i] & ext_safe):
            violations.append(
                SketchViolation("feature", f"feature stroke {i} leaves the sketch region")
            )
    return violations


def mask_iou(a, b, exclude=None):
    """Intersection over union of two masks, ignoring excluded pixels."""
    a = a.copy()
    b = b.copy()
    if exclude is not None:
        a &= ~exclude
        b &= ~exclude
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union
