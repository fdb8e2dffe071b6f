"""Sketch documents: strokes, depth samples, rasterization, JSON round trip.

Pixel coordinates follow image convention: x is the column, y the row with
the origin at the top-left.  Raster arrays are indexed [row, col].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from PIL import Image
from scipy import ndimage

from . import splinekit as sk
from .errors import InputError, ParseError

CANVAS = 256
STROKE_STEP = 0.25  # arc-length sampling step for rasterization, in pixels


class StrokeKind(Enum):
    VISIBLE = "visible"
    OCCLUDED = "occluded"
    CONTOUR = "contour"
    FEATURE = "feature"


STROKE_COLORS = {
    StrokeKind.VISIBLE: (0, 255, 0),
    StrokeKind.OCCLUDED: (0, 0, 255),
    StrokeKind.CONTOUR: (255, 0, 0),
    StrokeKind.FEATURE: (0, 0, 0),
}

STRUCTURAL_KINDS = (StrokeKind.VISIBLE, StrokeKind.OCCLUDED, StrokeKind.CONTOUR)


def vectorize(points):
    """Fit a stroke polyline with a cubic curve; one control point per 12 px."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise InputError("stroke polyline needs at least two 2D points")
    arc = float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
    if arc <= 0.0:
        raise InputError("degenerate stroke: all points identical")
    n_ctrl = int(np.clip(round(arc / 12.0), 4, 24))
    if pts.shape[0] < n_ctrl:
        # densify short polylines so the fit stays determined
        t = sk.chord_length_params(pts)
        tt = np.linspace(0.0, 1.0, n_ctrl * 3)
        pts = np.stack([np.interp(tt, t, pts[:, 0]), np.interp(tt, t, pts[:, 1])], axis=1)
    return sk.fit_curve(pts, n_ctrl)


class Stroke:
    """One drawn stroke: raw polyline plus its vectorized curve."""

    def __init__(self, kind, points):
        if not isinstance(kind, StrokeKind):
            kind = StrokeKind(kind)
        self.kind = kind
        self.points = np.asarray(points, dtype=float)
        self.curve = vectorize(self.points)

    def resample(self, step=STROKE_STEP, tn=512):
        """Points along the curve at fixed arc-length steps (pixels)."""
        t = np.linspace(0.0, 1.0, tn)
        pts = self.curve.evaluate(t)
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        total = s[-1]
        n = max(int(np.ceil(total / step)) + 1, 2)
        si = np.linspace(0.0, total, n)
        ti = np.interp(si, s, t)
        return self.curve.evaluate(ti)


@dataclass(frozen=True)
class DepthSample:
    x: int
    y: int
    layer: str  # "visible" | "occluded"
    depth: float

    def __post_init__(self):
        if not (0 <= self.x < CANVAS and 0 <= self.y < CANVAS):
            raise InputError(f"depth sample pixel ({self.x}, {self.y}) outside canvas")
        if self.layer not in ("visible", "occluded"):
            raise InputError(f"unknown depth sample layer {self.layer!r}")
        if not self.depth > 0.0:
            raise InputError("depth sample must be strictly positive")


@dataclass
class SketchDocument:
    strokes: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    canvas: int = CANVAS

    def strokes_of(self, *kinds):
        return [s for s in self.strokes if s.kind in kinds]


@dataclass
class RasterSketch:
    """Rasterized sketch plus the layers downstream stages work from."""

    rgb: np.ndarray                 # (256,256,3) uint8 after blur
    depth_visible: np.ndarray       # sparse sample map, 0 where absent
    depth_occluded: np.ndarray
    kind_masks: dict                # StrokeKind -> bool mask, pre-blur coverage
    stroke_pixels: list             # per stroke: bool mask of 3px-wide coverage
    stroke_center: list             # per stroke: bool mask of the 1px centerline

    @property
    def structural_mask(self):
        m = np.zeros(self.rgb.shape[:2], dtype=bool)
        for k in STRUCTURAL_KINDS:
            m |= self.kind_masks[k]
        return m


def _stamp(points, size, width=1):
    """Boolean mask of pixels within a (2*width+1)^2 stamp of each point."""
    mask = np.zeros((size, size), dtype=bool)
    cols = np.round(points[:, 0]).astype(int)
    rows = np.round(points[:, 1]).astype(int)
    for dr in range(-width, width + 1):
        for dc in range(-width, width + 1):
            r = rows + dr
            c = cols + dc
            ok = (r >= 0) & (r < size) & (c >= 0) & (c < size)
            mask[r[ok], c[ok]] = True
    return mask


_BLUR_1D = np.array([1.0, 2.0, 1.0]) / 4.0


def rasterize(doc):
    """Render a document to RGB + depth sample maps.

    Strokes are stamped three pixels wide along 0.25 px arc-length samples,
    then the whole image gets a single 3x3 binomial blur.  Feature lines are
    drawn first so structural lines stay on top where they cross.
    """
    size = doc.canvas
    rgb = np.full((size, size, 3), 255.0)
    order = sorted(
        range(len(doc.strokes)),
        key=lambda i: (0 if doc.strokes[i].kind is StrokeKind.FEATURE else 1, i),
    )
    stroke_pixels = [None] * len(doc.strokes)
    stroke_center = [None] * len(doc.strokes)
    kind_masks = {k: np.zeros((size, size), dtype=bool) for k in StrokeKind}
    for i in order:
        stroke = doc.strokes[i]
        pts = stroke.resample()
        cover = _stamp(pts, size, width=1)
        center = _stamp(pts, size, width=0)
        stroke_pixels[i] = cover
        stroke_center[i] = center
        kind_masks[stroke.kind] |= cover
        rgb[cover] = STROKE_COLORS[stroke.kind]
    for ch in range(3):
        rgb[:, :, ch] = ndimage.convolve1d(rgb[:, :, ch], _BLUR_1D, axis=0, mode="nearest")
        rgb[:, :, ch] = ndimage.convolve1d(rgb[:, :, ch], _BLUR_1D, axis=1, mode="nearest")
    depth_v = np.zeros((size, size))
    depth_o = np.zeros((size, size))
    for s in doc.samples:
        target = depth_v if s.layer == "visible" else depth_o
        target[s.y, s.x] = s.depth
    return RasterSketch(
        rgb=np.clip(np.round(rgb), 0, 255).astype(np.uint8),
        depth_visible=depth_v,
        depth_occluded=depth_o,
        kind_masks=kind_masks,
        stroke_pixels=stroke_pixels,
        stroke_center=stroke_center,
    )


# ---------------------------------------------------------------------------
# document serialization


def doc_to_dict(doc):
    return {
        "canvas": doc.canvas,
        "strokes": [
            {"kind": s.kind.value, "points": [[float(x), float(y)] for x, y in s.points]}
            for s in doc.strokes
        ],
        "samples": [
            {"x": s.x, "y": s.y, "layer": s.layer, "depth": s.depth} for s in doc.samples
        ],
    }


def doc_from_dict(d):
    if not isinstance(d, dict):
        raise ParseError("sketch document must be a JSON object")
    canvas = d.get("canvas", CANVAS)
    if canvas != CANVAS:
        raise ParseError(f"unsupported canvas size {canvas}", "canvas")
    strokes = []
    for i, sd in enumerate(d.get("strokes", [])):
        loc = f"strokes[{i}]"
        try:
            kind = StrokeKind(sd["kind"])
        except (KeyError, ValueError) as e:
            raise ParseError(f"unknown stroke kind: {e}", f"{loc}.kind") from e
        pts = sd.get("points")
        if not isinstance(pts, list) or len(pts) < 2:
            raise ParseError("stroke needs at least two points", f"{loc}.points")
        try:
            strokes.append(Stroke(kind, pts))
        except InputError as e:
            raise ParseError(str(e), loc) from e
    samples = []
    for i, sd in enumerate(d.get("samples", [])):
        loc = f"samples[{i}]"
        try:
            x, y = sd["x"], sd["y"]
            if not (isinstance(x, int) and isinstance(y, int)):
                raise ParseError("sample pixel coordinates must be integers", loc)
            samples.append(DepthSample(x, y, sd["layer"], float(sd["depth"])))
        except (KeyError, TypeError) as e:
            raise ParseError(f"bad depth sample: {e}", loc) from e
        except InputError as e:
            raise ParseError(str(e), loc) from e
    return SketchDocument(strokes=strokes, samples=samples, canvas=canvas)


def save_doc(doc, path):
    with open(path, "w") as f:
        json.dump(doc_to_dict(doc), f, separators=(",", ":"))
        f.write("\n")


def load_doc(path):
    try:
        with open(path) as f:
            d = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", f"{path}:{e.lineno}:{e.colno}") from e
    return doc_from_dict(d)


# ---------------------------------------------------------------------------
# image file helpers

DEPTH_PNG_SCALE = 1000.0


def save_rgb_png(arr, path):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="RGB").save(path)


def load_rgb_png(path):
    return np.asarray(Image.open(path).convert("RGB"))


def save_depth_png(depth, path):
    """16-bit grayscale; stored value = depth * 1000, NaN/absent = 0."""
    d = np.nan_to_num(np.asarray(depth, dtype=float), nan=0.0)
    raw = np.clip(np.round(d * DEPTH_PNG_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def load_depth_png(path):
    raw = np.asarray(Image.open(path), dtype=np.uint16)
    return raw.astype(float) / DEPTH_PNG_SCALE


def save_mask_png(mask, path):
    gray = (np.asarray(mask, dtype=bool) * np.uint8(255))
    Image.fromarray(gray).convert("1", dither=Image.Dither.NONE).save(path)


def load_mask_png(path):
    return np.asarray(Image.open(path).convert("L"), dtype=np.uint8) > 127


def save_normals_png(normals, path):
    """Unit normals mapped (n+1)/2 into 8-bit RGB; NaN rows become 0."""
    n = np.nan_to_num(np.asarray(normals, dtype=float), nan=-1.0)
    raw = np.clip(np.round((n + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(raw, mode="RGB").save(path)


def load_normals_png(path):
    raw = np.asarray(Image.open(path).convert("RGB"), dtype=float)
    return raw / 255.0 * 2.0 - 1.0
