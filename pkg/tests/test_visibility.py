import json

import numpy as np
import pytest

from pqforge import sketchdoc as sd
from pqforge import visibility as vis
from pqforge.errors import InconsistentSketchError, TopologyError


def _stroke(kind, *pts):
    return sd.Stroke(kind=kind, points=np.array(pts, dtype=float))


def _closed_rect(kind, x0, y0, x1, y1):
    return _stroke(kind, (x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0))


def _split_doc(inner_kind):
    """Rectangle outline: green U on three sides, red contour on the right,
    plus an interior vertical stroke splitting it into two regions."""
    green = _stroke(sd.StrokeKind.VISIBLE, (200, 40), (40, 40), (40, 216), (200, 216))
    red = _stroke(sd.StrokeKind.CONTOUR, (200, 216), (200, 40))
    inner = _stroke(inner_kind, (140, 40), (140, 216))
    return sd.SketchDocument(strokes=[green, red, inner], samples=[])


def test_single_region_front():
    doc = sd.SketchDocument(
        strokes=[_closed_rect(sd.StrokeKind.VISIBLE, 60, 60, 196, 196)], samples=[]
    )
    masks, graph, labels, _ = vis.solve_masks(doc)
    assert len(graph.regions) == 1
    assert masks.vf.sum() > 100 * 100
    assert not masks.vb.any() and not masks.of.any() and not masks.ob.any()


def test_open_boundary_raises():
    doc = sd.SketchDocument(
        strokes=[_stroke(sd.StrokeKind.VISIBLE, (40, 128), (216, 128))], samples=[]
    )
    with pytest.raises(TopologyError):
        vis.extract_minimal_regions(doc)


def test_occluded_split_copies_orientation():
    doc = _split_doc(sd.StrokeKind.OCCLUDED)
    masks, graph, labels, _ = vis.solve_masks(doc)
    assert len(graph.regions) == 2
    kinds = sorted(k.value for _, _, k, _ in graph.edges)
    assert "occluded" in kinds
    # both regions front; only the contour-incident one carries an occluded layer
    assert not masks.vb.any()
    assert masks.ob.any() and not masks.of.any()
    # occluded layer sits on the right (contour side) region only
    rr, cc = np.nonzero(masks.ob)
    assert cc.min() > 140
    assert np.array_equal(masks.ob, masks.ob & masks.vf)


def test_visible_split_flips_orientation():
    doc = _split_doc(sd.StrokeKind.VISIBLE)
    masks, graph, labels, _ = vis.solve_masks(doc)
    assert masks.vf.any() and masks.vb.any()
    # larger (left) side wins the front label
    assert masks.vf.sum() > masks.vb.sum()
    rr, cc = np.nonzero(masks.vf)
    assert cc.max() < 142
    # back region is contour-incident, so its hidden layer faces front
    assert masks.of.any() and not masks.ob.any()


def test_seed_independent_labels():
    doc = _split_doc(sd.StrokeKind.VISIBLE)
    regions, labels, raster = vis.extract_minimal_regions(doc)
    graph = vis.build_region_graph(doc, regions, labels, raster)
    ref = vis.propagate_orientation(graph, seed=0)
    for seed in range(1, len(regions)):
        assert vis.propagate_orientation(graph, seed=seed) == ref


def test_inconsistent_cycle_raises():
    regions = [
        vis.MinimalRegion(id=i, mask=np.ones((2, 2), dtype=bool), area=4, strokes={})
        for i in range(3)
    ]
    edges = [
        (0, 1, sd.StrokeKind.VISIBLE, 0),
        (1, 2, sd.StrokeKind.VISIBLE, 1),
        (0, 2, sd.StrokeKind.VISIBLE, 2),
    ]
    graph = vis.RegionGraph(regions=regions, edges=edges)
    with pytest.raises(InconsistentSketchError):
        vis.propagate_orientation(graph)


def test_graph_dump_serializable():
    doc = _split_doc(sd.StrokeKind.OCCLUDED)
    _, graph, _, _ = vis.solve_masks(doc)
    text = json.dumps(graph.to_dict(), sort_keys=True)
    assert '"kind": "occluded"' in text


def test_validate_clean_sketch():
    assert vis.validate_assumptions(_split_doc(sd.StrokeKind.OCCLUDED)) == []


def test_validate_disjoint_areas():
    doc = sd.SketchDocument(
        strokes=[
            _closed_rect(sd.StrokeKind.VISIBLE, 20, 20, 100, 100),
            _closed_rect(sd.StrokeKind.VISIBLE, 140, 140, 230, 230),
        ],
        samples=[],
    )
    clauses = {v.clause for v in vis.validate_assumptions(doc)}
    assert "b" in clauses


def test_validate_occluded_without_contour():
    green = _closed_rect(sd.StrokeKind.VISIBLE, 40, 40, 216, 216)
    blue = _stroke(sd.StrokeKind.OCCLUDED, (128, 40), (128, 216))
    doc = sd.SketchDocument(strokes=[green, blue], samples=[])
    clauses = {v.clause for v in vis.validate_assumptions(doc)}
    assert "d" in clauses


def test_validate_overlapping_strokes():
    a = _stroke(sd.StrokeKind.VISIBLE, (50, 128), (200, 128))
    b = _stroke(sd.StrokeKind.VISIBLE, (100, 128), (150, 128))
    doc = sd.SketchDocument(strokes=[a, b], samples=[])
    clauses = {v.clause for v in vis.validate_assumptions(doc)}
    assert "e" in clauses


def test_validate_point_crossing_ok():
    a = _stroke(sd.StrokeKind.VISIBLE, (60, 60), (200, 200))
    b = _stroke(sd.StrokeKind.VISIBLE, (60, 200), (200, 60))
    doc = sd.SketchDocument(strokes=[a, b], samples=[])
    clauses = {v.clause for v in vis.validate_assumptions(doc)}
    assert "e" not in clauses


def test_validate_feature_outside():
    rect = _closed_rect(sd.StrokeKind.VISIBLE, 80, 80, 180, 180)
    inside = _stroke(sd.StrokeKind.FEATURE, (100, 130), (160, 130))
    outside = _stroke(sd.StrokeKind.FEATURE, (10, 10), (60, 10))
    ok = sd.SketchDocument(strokes=[rect, inside], samples=[])
    assert all(v.clause != "feature" for v in vis.validate_assumptions(ok))
    bad = sd.SketchDocument(strokes=[rect, outside], samples=[])
    clauses = {v.clause for v in vis.validate_assumptions(bad)}
    assert "feature" in clauses


def test_contour_band_radius():
    doc = _split_doc(sd.StrokeKind.OCCLUDED)
    raster = sd.rasterize(doc)
    band = vis.build_contour_band(doc, raster)
    # contour centerline runs at column 200
    assert band.mask[128, 200]
    assert band.mask[128, 196]
    assert not band.mask[128, 194]


def test_omega_pairs_inside_band():
    doc = _split_doc(sd.StrokeKind.OCCLUDED)
    masks, _, _, raster = vis.solve_masks(doc)
    band = vis.build_contour_band(doc, raster)
    eligible = masks.visible & masks.occluded
    ri, ci, rj, cj = band.omega_pairs(eligible)
    assert ri.size > 0
    ok = band.mask & eligible
    assert ok[ri, ci].all() and ok[rj, cj].all()
    # the identity pair (i, i) is part of the set
    self_pairs = (ri == rj) & (ci == cj)
    assert self_pairs.sum() == np.count_nonzero(ok)


def test_mask_iou():
    a = np.zeros((10, 10), dtype=bool)
    b = np.zeros((10, 10), dtype=bool)
    a[2:6, 2:6] = True
    b[2:6, 2:6] = True
    assert vis.mask_iou(a, b) == 1.0
    b[8, 8] = True
    assert vis.mask_iou(a, b) == 16 / 17
    excl = np.zeros((10, 10), dtype=bool)
    excl[8, 8] = True
    assert vis.mask_iou(a, b, exclude=excl) == 1.0
