"""Text-line geometry: baselines, line polygons, rectification, reading order.

Coordinates use the image convention (x right, y down).  A text line is a
baseline polyline plus an ascender extent above it and a descender extent
below it.  All operations here are pure functions over immutable inputs
and are safe to call concurrently on distinct pages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import raster

__all__ = [
    "Point",
    "Baseline",
    "TextLineGeom",
    "Region",
    "PageLayout",
    "LineImage",
    "rectify_and_crop",
    "polygon_from_baseline",
    "sort_reading_order",
]


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")


@dataclass(frozen=True)
class Baseline:
    """Ordered polyline a text line sits on; x strictly increasing."""

    points: tuple[Point, ...]

    def __post_init__(self):
        if len(self.points) < 2:
            raise ValueError("baseline needs at least 2 points")
        xs = [p.x for p in self.points]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("baseline x coordinates must be strictly increasing")

    @classmethod
    def from_xy(cls, coords) -> "Baseline":
        return cls(tuple(Point(float(x), float(y)) for x, y in coords))

    def as_array(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.points], dtype=np.float64)

    @property
    def arc_length(self) -> float:
        pts = self.as_array()
        return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


@dataclass
class TextLineGeom:
    """One text line: baseline plus vertical extents and bounding polygon."""

    id: str
    baseline: Baseline
    ascender_height: float
    descender_height: float
    polygon: tuple[Point, ...] = ()

    def __post_init__(self):
        if self.ascender_height <= 0:
            raise ValueError(f"line {self.id!r}: ascender height must be > 0")
        if self.descender_height < 0:
            raise ValueError(f"line {self.id!r}: descender height must be >= 0")
        if not self.polygon:
            self.polygon = polygon_from_baseline(
                self.baseline, self.ascender_height, self.descender_height
            )


@dataclass
class Region:
    id: str
    polygon: tuple[Point, ...]
    lines: list[TextLineGeom] = field(default_factory=list)


@dataclass
class PageLayout:
    page_id: str
    width: int
    height: int
    regions: list[Region] = field(default_factory=list)

    def __post_init__(self):
        rids = [r.id for r in self.regions]
        if len(set(rids)) != len(rids):
            raise ValueError("duplicate region ids")
        lids = [ln.id for r in self.regions for ln in r.lines]
        if len(set(lids)) != len(lids):
            raise ValueError("duplicate line ids")

    def iter_lines(self):
        """Yield (region_index, line_index, region, line) in document order."""
        for ri, region in enumerate(self.regions):
            for li, line in enumerate(region.lines):
                yield ri, li, region, line

    @property
    def line_count(self) -> int:
        return sum(len(r.lines) for r in self.regions)

    def clamped(self) -> "PageLayout":
        """Copy with every coordinate clamped into [0,width] x [0,height]."""

        def cp(p: Point) -> Point:
            return Point(min(max(p.x, 0.0), float(self.width)),
                         min(max(p.y, 0.0), float(self.height)))

        regions = []
        for r in self.regions:
            lines = []
            for ln in r.lines:
                pts = [cp(p) for p in ln.baseline.points]
                # clamping may collapse x ordering at the page edge; nudge apart
                for i in range(1, len(pts)):
                    if pts[i].x <= pts[i - 1].x:
                        pts[i] = Point(pts[i - 1].x + 1e-6, pts[i].y)
                lines.append(TextLineGeom(
                    ln.id, Baseline(tuple(pts)), ln.ascender_height,
                    ln.descender_height, tuple(cp(p) for p in ln.polygon)))
            regions.append(Region(r.id, tuple(cp(p) for p in r.polygon), lines))
        return PageLayout(self.page_id, self.width, self.height, regions)


@dataclass
class LineImage:
    """Rectified fixed-height crop of one text line.

    ``pixels`` is (H, W) float32 in [0, 1] with 1.0 = background.  The
    index fields link the crop back to its layout element and drive the
    crop file naming convention.
    """

    pixels: np.ndarray
    line_id: str = ""
    page_id: str = ""
    region_index: int = 0
    line_index: int = 0


def _segment_normals(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-segment unit directions, upward unit normals and lengths."""
    d = np.diff(pts, axis=0)
    lens = np.linalg.norm(d, axis=1)
    if np.any(lens == 0):
        raise ValueError("degenerate baseline segment")
    u = d / lens[:, None]
    # y grows downward, so "up" is (dy, -dx) for direction (dx, dy)
    n = np.stack([u[:, 1], -u[:, 0]], axis=1)
    return u, n, lens


def _vertex_normals(pts: np.ndarray) -> np.ndarray:
    """Upward normal per vertex: segment normal at the ends, angle bisector inside."""
    _, seg_n, _ = _segment_normals(pts)
    out = np.empty_like(pts)
    out[0] = seg_n[0]
    out[-1] = seg_n[-1]
    for i in range(1, len(pts) - 1):
        v = seg_n[i - 1] + seg_n[i]
        nrm = np.linalg.norm(v)
        out[i] = seg_n[i - 1] if nrm < 1e-9 else v / nrm
    return out


def polygon_from_baseline(baseline: Baseline, ascender_height: float,
                          descender_height: float) -> tuple[Point, ...]:
    """Closed line polygon: baseline offset up by the ascender and down by
    the descender, top edge left-to-right then bottom edge back.
    """
    if ascender_height + descender_height <= 0:
        raise ValueError("zero extent")
    pts = baseline.as_array()
    normals = _vertex_normals(pts)
    top = pts + normals * ascender_height
    bottom = pts - normals * descender_height
    ring = np.concatenate([top, bottom[::-1]], axis=0)
    return tuple(Point(float(x), float(y)) for x, y in ring)


def rectify_and_crop(image: np.ndarray, line: TextLineGeom, target_height: int = 50,
                     line_scale: float = 1.0, interp_order: int = 2,
                     background: float | None = None) -> LineImage:
    """Resample a text line into a straight, fixed-height raster.

    Output column j samples the source along the upward baseline normal at
    arc-length position j * (arc_length / width); output row 0 sits
    line_scale * ascender above the baseline and the last rows reach
    line_scale * descender below it.  Width preserves aspect:
    round(arc_length * target_height / (line_scale * (asc + desc))).
    Samples outside the image are filled with ``background`` (median
    border intensity when not given).
    """
    if target_height < 8:
        raise ValueError("target_height must be >= 8")
    img = raster.to_gray01(image)
    pts = line.baseline.as_array()
    _, seg_n, seg_len = _segment_normals(pts)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    arclen = float(cum[-1])
    if arclen < 1.0:
        raise ValueError("degenerate line")
    extent = line_scale * (line.ascender_height + line.descender_height)
    if extent <= 0:
        raise ValueError("zero extent")

    width = max(1, int(round(arclen * target_height / extent)))
    s = np.arange(width) * (arclen / width)
    seg = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg_len) - 1)
    t = s - cum[seg]
    u = (pts[seg + 1] - pts[seg]) / seg_len[seg, None]
    base = pts[seg] + u * t[:, None]            # (W, 2) points on the baseline
    nrm = seg_n[seg]                            # (W, 2) upward normals

    # signed offset from the baseline, positive above, one row step per pixel
    d = line_scale * line.ascender_height - np.arange(target_height) * (extent / target_height)
    xs = base[None, :, 0] + nrm[None, :, 0] * d[:, None]
    ys = base[None, :, 1] + nrm[None, :, 1] * d[:, None]

    if background is None:
        background = raster.median_border(img)
    out = ndimage.map_coordinates(img.astype(np.float64), [ys, xs],
                                  order=interp_order, mode="constant",
                                  cval=background)
    return LineImage(out.astype(np.float32), line_id=line.id)


def _bounds(points) -> tuple[float, float, float, float]:
    xs = [p.x for p in points]
    ys = [p.y for p in points]
    return min(xs), min(ys), max(xs), max(ys)


def _region_bounds(region: Region) -> tuple[float, float, float, float]:
    pts = list(region.polygon)
    for ln in region.lines:
        pts.extend(ln.polygon)
        pts.extend(ln.baseline.points)
    if not pts:
        return 0.0, 0.0, 0.0, 0.0
    return _bounds(pts)


def _share_column(a, b) -> bool:
    """x-intervals overlap by at least half the narrower interval."""
    ov = min(a[2], b[2]) - max(a[0], b[0])
    wa, wb = a[2] - a[0], b[2] - b[0]
    minw = min(wa, wb)
    if minw <= 0:
        return ov >= 0
    return ov >= 0.5 * minw


def sort_reading_order(layout: PageLayout) -> PageLayout:
    """Column-major reading order.

    Regions sharing >=50% horizontal overlap (of the narrower one) are
    clustered into a column, transitively.  Columns run left to right;
    regions inside a column top to bottom; lines inside a region by mean
    baseline y.  Ties break on leftmost x, then id.
    """
    regions = layout.regions
    if not regions:
        return PageLayout(layout.page_id, layout.width, layout.height, [])
    bb = [_region_bounds(r) for r in regions]

    parent = list(range(len(regions)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(regions)):
        for j in range(i + 1, len(regions)):
            if _share_column(bb[i], bb[j]):
                parent[find(i)] = find(j)

    columns: dict[int, list[int]] = {}
    for i in range(len(regions)):
        columns.setdefault(find(i), []).append(i)

    def col_key(members):
        return (min(bb[i][0] for i in members),
                min(bb[i][1] for i in members),
                min(regions[i].id for i in members))

    ordered: list[Region] = []
    for members in sorted(columns.values(), key=col_key):
        members.sort(key=lambda i: (bb[i][1], bb[i][0], regions[i].id))
        for i in members:
            region = regions[i]
            lines = sorted(
                region.lines,
                key=lambda ln: (float(np.mean([p.y for p in ln.baseline.points])),
                                min(p.x for p in ln.baseline.points),
                                ln.id))
            ordered.append(Region(region.id, region.polygon, lines))
    return PageLayout(layout.page_id, layout.width, layout.height, ordered)
