"""Layout analysis: baseline/height/region probability maps and decoding.

A small 4-down/4-up convolutional encoder-decoder predicts, at 1/downsample
resolution, a baseline probability map, ascender/descender height maps
(values in map-scale pixels) and a region probability map.  A
deterministic decoder thresholds and groups the baseline map into text
lines, reads heights along each baseline, assigns lines to regions and
returns a reading-ordered :class:`~scriptorium.geometry.PageLayout` in
original image coordinates.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _binio, nn, raster
from .geometry import (Baseline, PageLayout, Point, Region, TextLineGeom,
                       polygon_from_baseline, sort_reading_order)

LAYOUT_MAGIC = b"FPTHD-L"
CHECKPOINT_VERSION = 1
N_HEADS = 4  # baseline, ascender, descender, region

__all__ = [
    "LayoutNet", "ProbabilityMaps", "LayoutDecoderConfig", "LayoutTrainConfig",
    "init_layout_net", "predict_maps", "decode_baselines", "rasterize_maps",
    "train_layout_net", "save_checkpoint", "load_checkpoint",
]


@dataclass
class LayoutNet:
    params: nn.Params
    widths: tuple[int, ...] = (16, 32, 64, 64)
    downsample: int = 5
    dtype: type = np.float32


@dataclass
class ProbabilityMaps:
    """Aligned prediction maps at 1/downsample of the (possibly prescaled) image."""

    baseline: np.ndarray
    ascender: np.ndarray
    descender: np.ndarray
    region: np.ndarray
    downsample: int
    prescale: float = 1.0          # megapixel-cap shrink applied before the net
    image_width: int = 0           # original page size, for decoding back
    image_height: int = 0
    page_id: str = "page"

    def __post_init__(self):
        shapes = {m.shape for m in (self.baseline, self.ascender,
                                    self.descender, self.region)}
        if len(shapes) != 1:
            raise ValueError(f"probability maps disagree in shape: {shapes}")
        if self.downsample < 1:
            raise ValueError("downsample must be >= 1")


@dataclass
class LayoutDecoderConfig:
    detection_threshold: float = 0.2
    vertical_connection_range: int = 3
    line_end_weight: float = 1.0
    merge_lines: bool = False
    smooth_predictions: bool = False
    max_megapixels: float = 5.0
    detect_regions: bool = True
    adjust_heights: bool = False

    def __post_init__(self):
        if not 0.0 < self.detection_threshold < 1.0:
            raise ValueError("detection_threshold must be in (0, 1)")
        if self.vertical_connection_range < 0:
            raise ValueError("vertical_connection_range must be >= 0")


@dataclass
class LayoutTrainConfig:
    lr: float = 2e-3
    iterations: int = 500
    batch_size: int = 4
    seed: int = 0
    optimizer: str = "adam"  # or "sgd"


# ---------------------------------------------------------------------------
# network


def init_layout_net(downsample: int = 5, widths: tuple[int, ...] = (16, 32, 64, 64),
                    seed: int = 0, dtype=np.float32) -> LayoutNet:
    if len(widths) != 4:
        raise ValueError("expected 4 encoder widths")
    rng = np.random.default_rng(seed)
    p: nn.Params = {}
    cin = 1
    for i, w in enumerate(widths):
        p[f"down{i}.w"] = nn.he_conv(rng, w, cin, 3, dtype)
        p[f"down{i}.b"] = np.zeros(w, dtype=dtype)
        cin = w
    up_out = (widths[2], widths[1], widths[0], widths[0])
    for i, w in enumerate(up_out):
        p[f"up{i}.w"] = nn.he_conv(rng, w, cin, 3, dtype)
        p[f"up{i}.b"] = np.zeros(w, dtype=dtype)
        cin = w
    p["head.w"] = nn.he_conv(rng, N_HEADS, cin, 1, dtype)
    p["head.b"] = np.zeros(N_HEADS, dtype=dtype)
    return LayoutNet(p, tuple(widths), downsample, dtype)


def _unet_forward(x: np.ndarray, p: nn.Params, want_cache: bool = False):
    """4x stride-2 conv encoder, nearest-upsampling decoder with skip adds."""
    skips = []
    caches = []
    h = x
    for i in range(4):
        z, c = nn.conv2d(h, p[f"down{i}.w"], p[f"down{i}.b"], (2, 2))
        h, rc = nn.relu(z)
        skips.append(h)
        caches.append((c, rc) if want_cache else None)
    up_caches = []
    for i in range(4):
        u = nn.upsample2x(h)
        z, c = nn.conv2d(u, p[f"up{i}.w"], p[f"up{i}.b"], (1, 1))
        skip_idx = 2 - i  # up0 <- skip of down2, up1 <- down1, up2 <- down0
        if 0 <= skip_idx < 3:
            z = z + skips[skip_idx]
        h, rc = nn.relu(z)
        up_caches.append((c, rc) if want_cache else None)
    heads, hc = nn.conv2d(h, p["head.w"], p["head.b"], (1, 1))
    cache = (caches, up_caches, hc) if want_cache else None
    return heads, cache


def _unet_backward(dheads: np.ndarray, cache, p: nn.Params) -> nn.Params:
    down_caches, up_caches, hc = cache
    grads: nn.Params = {}
    dh, dw, db = nn.conv2d_backward(dheads, hc, p["head.w"])
    grads["head.w"] = dw
    grads["head.b"] = db
    dskips = [None, None, None]
    for i in range(3, -1, -1):
        c, rc = up_caches[i]
        dz = nn.relu_backward(dh, rc)
        skip_idx = 2 - i
        if 0 <= skip_idx < 3:
            dskips[skip_idx] = dz
        du, dw, db = nn.conv2d_backward(dz, c, p[f"up{i}.w"])
        grads[f"up{i}.w"] = dw
        grads[f"up{i}.b"] = db
        dh = nn.upsample2x_backward(du)
    for i in range(3, -1, -1):
        c, rc = down_caches[i]
        if i < 3 and dskips[i] is not None:
            dh = dh + dskips[i]
        dz = nn.relu_backward(dh, rc)
        dh, dw, db = nn.conv2d_backward(dz, c, p[f"down{i}.w"])
        grads[f"down{i}.w"] = dw
        grads[f"down{i}.b"] = db
    return grads


def _prepare_map_input(image: np.ndarray, net: LayoutNet,
                       max_megapixels: float) -> tuple[np.ndarray, int, int, float]:
    img = raster.to_gray01(image)
    if img.size == 0:
        raise ValueError("empty image")
    h0, w0 = img.shape
    prescale = 1.0
    if max_megapixels > 0 and h0 * w0 > max_megapixels * 1e6:
        prescale = math.sqrt(max_megapixels * 1e6 / (h0 * w0))
        img = raster.resize(img, max(1, round(h0 * prescale)),
                            max(1, round(w0 * prescale)), order=1)
    ds = net.downsample
    mh = max(1, round(img.shape[0] / ds))
    mw = max(1, round(img.shape[1] / ds))
    small = raster.resize(img, mh, mw, order=1).astype(np.float64)
    small = (small - small.mean()) / (small.std() + 1e-6)
    return small.astype(net.dtype), mh, mw, prescale


def _pad16(x: np.ndarray) -> np.ndarray:
    h, w = x.shape
    ph = (-h) % 16
    pw = (-w) % 16
    if ph or pw:
        x = np.pad(x, ((0, ph), (0, pw)), mode="edge")
    return x


def predict_maps(image: np.ndarray, net: LayoutNet,
                 max_megapixels: float = 5.0, page_id: str = "page") -> ProbabilityMaps:
    """Run the layout net on a page image.

    Images above the megapixel cap are first shrunk (aspect preserved);
    the maps come out at 1/downsample of the shrunk image.  Baseline and
    region maps are logistic probabilities; height maps are softplus
    outputs in map-scale pixels.
    """
    img = raster.to_gray01(image)
    small, mh, mw, prescale = _prepare_map_input(image, net, max_megapixels)
    x = _pad16(small)[None, None]
    heads, _ = _unet_forward(x, net.params)
    heads = heads[0, :, :mh, :mw].astype(np.float64)
    return ProbabilityMaps(
        baseline=nn.sigmoid(heads[0]),
        ascender=nn.softplus(heads[1]),
        descender=nn.softplus(heads[2]),
        region=nn.sigmoid(heads[3]),
        downsample=net.downsample,
        prescale=prescale,
        image_width=img.shape[1],
        image_height=img.shape[0],
        page_id=page_id,
    )


# ---------------------------------------------------------------------------
# decoding


def _components(mask: np.ndarray) -> list[dict]:
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    comps = []
    for idx in range(1, n + 1):
        rows, cols = np.nonzero(labels == idx)
        comps.append({"rows": rows, "cols": cols,
                      "rmin": rows.min(), "rmax": rows.max(),
                      "cmin": cols.min(), "cmax": cols.max()})
    return comps


def _merge_components(comps: list[dict], v_range: int) -> list[dict]:
    """Union components with overlapping x-intervals whose empty-row gap
    is at most ``v_range``."""
    n = len(comps)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            a, b = comps[i], comps[j]
            if min(a["cmax"], b["cmax"]) - max(a["cmin"], b["cmin"]) < 0:
                continue
            gap = max(a["rmin"], b["rmin"]) - min(a["rmax"], b["rmax"]) - 1
            if max(gap, 0) <= v_range:
                parent[find(i)] = find(j)
    merged: dict[int, dict] = {}
    for i, comp in enumerate(comps):
        root = find(i)
        if root not in merged:
            merged[root] = {"rows": [], "cols": []}
        merged[root]["rows"].append(comp["rows"])
        merged[root]["cols"].append(comp["cols"])
    out = []
    for entry in merged.values():
        rows = np.concatenate(entry["rows"])
        cols = np.concatenate(entry["cols"])
        order = np.argsort(cols, kind="stable")
        out.append({"rows": rows[order], "cols": cols[order]})
    # deterministic order: by topmost row then leftmost column
    out.sort(key=lambda c: (int(c["rows"].min()), int(c["cols"].min())))
    return out


def _column_profile(comp: dict, prob: np.ndarray):
    """Per occupied column: probability-weighted mean row and mean probability."""
    cols = comp["cols"]
    rows = comp["rows"]
    w = prob[rows, cols]
    uniq, start = np.unique(cols, return_index=True)
    sums_w = np.add.reduceat(w, start)
    sums_wy = np.add.reduceat(w * rows, start)
    counts = np.diff(np.append(start, len(cols)))
    mean_y = sums_wy / np.maximum(sums_w, 1e-12)
    mean_p = sums_w / counts
    return uniq.astype(np.float64), mean_y, mean_p


def _simplify(xs: np.ndarray, ys: np.ndarray, tol: float, max_pts: int) -> np.ndarray:
    """Max-deviation (Douglas-Peucker) polyline reduction."""
    pts = np.stack([xs, ys], axis=1)

    def dp(lo: int, hi: int, tol: float, keep: list[int]):
        if hi <= lo + 1:
            return
        a, b = pts[lo], pts[hi]
        ab = b - a
        denom = np.hypot(*ab)
        seg = pts[lo + 1:hi] - a
        if denom < 1e-12:
            dist = np.linalg.norm(seg, axis=1)
        else:
            dist = np.abs(ab[0] * seg[:, 1] - ab[1] * seg[:, 0]) / denom
        imax = int(np.argmax(dist))
        if dist[imax] > tol:
            mid = lo + 1 + imax
            dp(lo, mid, tol, keep)
            keep.append(mid)
            dp(mid, hi, tol, keep)

    while True:
        keep = [0, len(pts) - 1]
        dp(0, len(pts) - 1, tol, keep)
        keep = sorted(set(keep))
        if len(keep) <= max_pts:
            return pts[keep]
        tol *= 2.0


def _smooth3(y: np.ndarray) -> np.ndarray:
    if len(y) < 3:
        return y
    padded = np.concatenate([[y[0]], y, [y[-1]]])
    return (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0


def decode_baselines(maps: ProbabilityMaps, cfg: LayoutDecoderConfig | None = None,
                     page_id: str | None = None) -> PageLayout:
    """Deterministically decode probability maps into a page layout.

    Steps: threshold the baseline map, group pixels into connected
    components, bridge components across small vertical gaps, fit one
    baseline polyline per component from probability-weighted column
    means, read heights as medians of the height maps along the baseline,
    scale back to image space, assign regions, and sort into reading
    order.  A page with nothing above threshold yields an empty layout.
    """
    cfg = cfg or LayoutDecoderConfig()
    page_id = page_id or maps.page_id
    thr = cfg.detection_threshold
    scale = maps.downsample / maps.prescale
    width = maps.image_width or int(round(maps.baseline.shape[1] * scale))
    height = maps.image_height or int(round(maps.baseline.shape[0] * scale))

    comps = _components(maps.baseline > thr)
    comps = _merge_components(comps, cfg.vertical_connection_range)

    raw_lines = []
    for comp in comps:
        xs, ys, ps = _column_profile(comp, maps.baseline)
        # trim weak endpoint columns
        lo, hi = 0, len(xs)
        while lo < hi and ps[lo] < cfg.line_end_weight * thr:
            lo += 1
        while hi > lo and ps[hi - 1] < cfg.line_end_weight * thr:
            hi -= 1
        xs, ys, ps = xs[lo:hi], ys[lo:hi], ps[lo:hi]
        if len(xs) < 2:
            continue
        if cfg.smooth_predictions:
            ys = _smooth3(ys)
        ry = np.clip(np.round(ys).astype(int), 0, maps.ascender.shape[0] - 1)
        cx = xs.astype(int)
        asc = float(np.median(maps.ascender[ry, cx]))
        desc = float(np.median(maps.descender[ry, cx]))
        raw_lines.append({"xs": xs, "ys": ys, "asc": asc, "desc": desc})

    if cfg.merge_lines:
        raw_lines = _merge_overlapping_lines(raw_lines)

    if cfg.adjust_heights and raw_lines:
        asc_all = float(np.median([l["asc"] for l in raw_lines]))
        desc_all = float(np.median([l["desc"] for l in raw_lines]))
        for l in raw_lines:
            l["asc"], l["desc"] = asc_all, desc_all

    lines: list[TextLineGeom] = []
    for k, l in enumerate(raw_lines):
        pts = _simplify(l["xs"], l["ys"], tol=0.5, max_pts=32)
        img_pts = [((x + 0.5) * scale, (y + 0.5) * scale) for x, y in pts]
        asc = max(l["asc"] * scale, 1.0)
        desc = max(l["desc"] * scale, 0.0)
        try:
            baseline = Baseline.from_xy(img_pts)
        except ValueError:
            continue
        lines.append(TextLineGeom(f"tmp{k:04d}", baseline, asc, desc))

    regions = _assign_regions(lines, maps, cfg, scale, width, height)
    layout = PageLayout(page_id, width, height, regions).clamped()
    layout = sort_reading_order(layout)
    return _renumber(layout)


def _merge_overlapping_lines(raw_lines: list[dict]) -> list[dict]:
    """MERGE_LINES=yes: fuse lines with >=50% x-overlap lying within one
    line height of each other (duplicate detections of the same line)."""
    n = len(raw_lines)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            a, b = raw_lines[i], raw_lines[j]
            ov = min(a["xs"][-1], b["xs"][-1]) - max(a["xs"][0], b["xs"][0])
            minw = min(a["xs"][-1] - a["xs"][0], b["xs"][-1] - b["xs"][0])
            if minw <= 0 or ov < 0.5 * minw:
                continue
            dy = abs(float(np.mean(a["ys"])) - float(np.mean(b["ys"])))
            mean_height = 0.5 * (a["asc"] + a["desc"] + b["asc"] + b["desc"])
            if dy < mean_height:
                parent[find(i)] = find(j)
    groups: dict[int, list[dict]] = {}
    for i, line in enumerate(raw_lines):
        groups.setdefault(find(i), []).append(line)
    merged = []
    for members in groups.values():
        if len(members) == 1:
            merged.append(members[0])
            continue
        xs = np.concatenate([m["xs"] for m in members])
        ys = np.concatenate([m["ys"] for m in members])
        order = np.argsort(xs, kind="stable")
        xs, ys = xs[order], ys[order]
        ux, start = np.unique(xs, return_index=True)
        counts = np.diff(np.append(start, len(xs)))
        uy = np.add.reduceat(ys, start) / counts
        weights = np.array([len(m["xs"]) for m in members], dtype=float)
        asc = float(np.average([m["asc"] for m in members], weights=weights))
        desc = float(np.average([m["desc"] for m in members], weights=weights))
        merged.append({"xs": ux, "ys": uy, "asc": asc, "desc": desc})
    merged.sort(key=lambda l: (float(np.mean(l["ys"])), float(l["xs"][0])))
    return merged


def _assign_regions(lines: list[TextLineGeom], maps: ProbabilityMaps,
                    cfg: LayoutDecoderConfig, scale: float,
                    width: int, height: int) -> list[Region]:
    def bbox_polygon(x0, y0, x1, y1):
        return (Point(x0, y0), Point(x1, y0), Point(x1, y1), Point(x0, y1))

    def line_bbox(line: TextLineGeom):
        xs = [p.x for p in line.polygon]
        ys = [p.y for p in line.polygon]
        return min(xs), min(ys), max(xs), max(ys)

    if not lines:
        return []
    if not cfg.detect_regions:
        return [Region("tmpr0000", bbox_polygon(0, 0, width, height), lines)]

    labels, n = ndimage.label(maps.region > cfg.detection_threshold,
                              structure=np.ones((3, 3), dtype=bool))
    buckets: dict[int, list[TextLineGeom]] = {}
    singles: list[TextLineGeom] = []
    for line in lines:
        pts = line.baseline.as_array()
        mid = pts.mean(axis=0)
        mx = int(np.clip(round(mid[0] / scale - 0.5), 0, labels.shape[1] - 1))
        my = int(np.clip(round(mid[1] / scale - 0.5), 0, labels.shape[0] - 1))
        lab = int(labels[my, mx])
        if lab > 0:
            buckets.setdefault(lab, []).append(line)
        else:
            singles.append(line)
    regions = []
    for lab, members in sorted(buckets.items()):
        rows, cols = np.nonzero(labels == lab)
        x0 = (cols.min()) * scale
        x1 = (cols.max() + 1) * scale
        y0 = (rows.min()) * scale
        y1 = (rows.max() + 1) * scale
        regions.append(Region(f"tmpr{lab:04d}", bbox_polygon(x0, y0, x1, y1), members))
    for i, line in enumerate(singles):
        regions.append(Region(f"tmprs{i:04d}", bbox_polygon(*line_bbox(line)), [line]))
    return regions


def _renumber(layout: PageLayout) -> PageLayout:
    regions = []
    for ri, region in enumerate(layout.regions):
        rid = f"r{ri:03d}"
        lines = [TextLineGeom(f"{rid}-l{li:03d}", ln.baseline, ln.ascender_height,
                              ln.descender_height, ln.polygon)
                 for li, ln in enumerate(region.lines)]
        regions.append(Region(rid, region.polygon, lines))
    return PageLayout(layout.page_id, layout.width, layout.height, regions)


# ---------------------------------------------------------------------------
# training on rasterized targets


def rasterize_maps(layout: PageLayout, downsample: int,
                   map_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Ground-truth maps (4, H, W) for training: baseline pixels set to 1,
    map-scale heights painted in a 3-row band along each baseline, and
    region boxes filled with 1."""
    if map_shape is None:
        map_shape = (max(1, round(layout.height / downsample)),
                     max(1, round(layout.width / downsample)))
    mh, mw = map_shape
    maps = np.zeros((N_HEADS, mh, mw), dtype=np.float64)
    for _, _, region, line in layout.iter_lines():
        pts = line.baseline.as_array() / downsample
        pts[:, 0] -= 0.5
        pts[:, 1] -= 0.5
        c0 = int(np.clip(np.ceil(pts[:, 0].min()), 0, mw - 1))
        c1 = int(np.clip(np.floor(pts[:, 0].max()), 0, mw - 1))
        if c1 < c0:
            continue
        cols = np.arange(c0, c1 + 1)
        ys = np.interp(cols, pts[:, 0], pts[:, 1])
        rows = np.clip(np.round(ys).astype(int), 0, mh - 1)
        maps[0][rows, cols] = 1.0
        for dr in (-1, 0, 1):
            rr = np.clip(rows + dr, 0, mh - 1)
            maps[1][rr, cols] = line.ascender_height / downsample
            maps[2][rr, cols] = line.descender_height / downsample
    for region in layout.regions:
        if not region.polygon:
            continue
        xs = [p.x / downsample for p in region.polygon]
        ys = [p.y / downsample for p in region.polygon]
        # paint the horizontal core of the box: baseline midpoints (which
        # drive region assignment) sit near the centre, and the widened
        # inter-region gap keeps thresholded components from bridging
        # adjacent columns
        w = max(xs) - min(xs)
        x0 = int(np.clip(np.floor(min(xs) + 0.25 * w), 0, mw - 1))
        x1 = int(np.clip(np.ceil(max(xs) - 0.25 * w), 0, mw))
        y0 = int(np.clip(np.floor(min(ys)), 0, mh - 1))
        y1 = int(np.clip(np.ceil(max(ys)), 0, mh))
        maps[3][y0:y1, x0:x1] = 1.0
    return maps


def _bce_with_logits(z: np.ndarray, y: np.ndarray,
                     pos_weight: float = 1.0) -> tuple[float, np.ndarray]:
    w = 1.0 + (pos_weight - 1.0) * y
    loss = w * (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    dz = w * (nn.sigmoid(z) - y)
    return float(loss.mean()), dz / z.size


def _height_l1(z: np.ndarray, target: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """L1 on softplus(z) restricted to baseline pixels."""
    if not mask.any():
        return 0.0, np.zeros_like(z)
    h = nn.softplus(z)
    diff = h - target
    loss = float(np.abs(diff[mask]).mean())
    dz = np.zeros_like(z)
    dz[mask] = np.sign(diff[mask]) * nn.sigmoid(z[mask]) / mask.sum()
    return loss, dz


def _layout_loss_and_grads(net: LayoutNet, image: np.ndarray, target: np.ndarray):
    small, mh, mw, _ = _prepare_map_input(image, net, max_megapixels=0.0)
    if target.shape != (N_HEADS, mh, mw):
        raise ValueError(f"target maps {target.shape} misaligned with "
                         f"expected {(N_HEADS, mh, mw)}")
    x = _pad16(small)[None, None]
    heads, cache = _unet_forward(x, net.params, want_cache=True)
    z = heads[0, :, :mh, :mw].astype(np.float64)
    base_mask = target[0] >= 0.5
    # baseline pixels are rare; upweight them so detections clear the
    # decode threshold confidently
    l_base, d_base = _bce_with_logits(z[0], target[0], pos_weight=4.0)
    l_asc, d_asc = _height_l1(z[1], target[1], base_mask)
    l_desc, d_desc = _height_l1(z[2], target[2], base_mask)
    # for regions a false bridge between columns costs reading order, a
    # fragmented region does not; bias against false positives
    l_reg, d_reg = _bce_with_logits(z[3], target[3], pos_weight=0.3)
    dheads = np.zeros_like(heads)
    dheads[0, 0, :mh, :mw] = d_base
    dheads[0, 1, :mh, :mw] = d_asc
    dheads[0, 2, :mh, :mw] = d_desc
    dheads[0, 3, :mh, :mw] = d_reg
    grads = _unet_backward(dheads.astype(net.dtype), cache, net.params)
    return l_base + l_asc + l_desc + l_reg, grads


def train_layout_net(corpus, hyper: LayoutTrainConfig | None = None,
                     net: LayoutNet | None = None) -> tuple[LayoutNet, list[float]]:
    """Fit the layout net on (image, target-maps) pairs.

    Targets must be rasterized at map resolution (see
    :func:`rasterize_maps`).  Returns the trained net and the per-iteration
    loss log.  Zero iterations returns the initial parameters unchanged.
    """
    hyper = hyper or LayoutTrainConfig()
    if not corpus:
        raise ValueError("empty training corpus")
    if net is None:
        net = init_layout_net(seed=hyper.seed)
    rng = np.random.default_rng(hyper.seed)
    params = nn.tree_copy(net.params)
    net = LayoutNet(params, net.widths, net.downsample, net.dtype)
    m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
    v = {k: np.zeros_like(val, dtype=np.float64) for k, val in params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    losses: list[float] = []
    for it in range(hyper.iterations):
        idx = rng.integers(0, len(corpus), size=hyper.batch_size)
        total = 0.0
        acc: nn.Params = {}
        for i in idx:
            image, target = corpus[int(i)]
            loss, grads = _layout_loss_and_grads(net, image, np.asarray(target))
            total += loss
            for k, g in grads.items():
                acc[k] = acc.get(k, 0) + g / len(idx)
        losses.append(total / len(idx))
        if hyper.optimizer == "adam":
            t = it + 1
            for k in params:
                g = acc[k].astype(np.float64)
                m[k] = beta1 * m[k] + (1 - beta1) * g
                v[k] = beta2 * v[k] + (1 - beta2) * g * g
                mhat = m[k] / (1 - beta1 ** t)
                vhat = v[k] / (1 - beta2 ** t)
                params[k] = (params[k] - hyper.lr * mhat / (np.sqrt(vhat) + eps)
                             ).astype(net.dtype)
        else:
            for k in params:
                params[k] = (params[k] - hyper.lr * acc[k]).astype(net.dtype)
    return net, losses


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: LayoutNet, path, state: dict | None = None) -> None:
    buf = io.BytesIO()
    buf.write(LAYOUT_MAGIC)
    _binio.write_u16(buf, CHECKPOINT_VERSION)
    _binio.write_json_chunk(buf, {"downsample": net.downsample,
                                  "widths": list(net.widths)})
    _binio.write_params(buf, net.params)
    if state is not None:
        _binio.write_json_chunk(buf, state)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path, dtype=np.float32) -> tuple[LayoutNet, dict | None]:
    with open(path, "rb") as f:
        _binio.expect_magic(f, LAYOUT_MAGIC)
        version = _binio.read_u16(f)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported layout checkpoint version {version}")
        meta = _binio.read_json_chunk(f)
        params = _binio.read_params(f, dtype=dtype)
        state = _binio.read_optional_json(f)
    return LayoutNet(params, tuple(meta["widths"]), meta["downsample"], dtype), state
