"""Synthetic text-line and page rendering for fixtures and demos.

A tiny built-in bitmap font (5x12 glyph cells: tilde zone, ascender zone,
x-height, descender zone) renders ink-on-white line images and full
two-column pages together with their ground-truth layout, so every stage
of the pipeline can be exercised without external data or font files.
"""

from __future__ import annotations

import numpy as np

from .geometry import (Baseline, LineImage, PageLayout, Point, Region,
                       TextLineGeom, rectify_and_crop)

GLYPH_H = 12          # rows 0-1 tilde, 2-3 ascender, 4-9 x-height, 10-11 descender
GLYPH_W = 5
ADVANCE = 6           # glyph cell plus one blank column
BASELINE_ROW = 10     # baseline under the x-height block
ASC_ROWS = 10
DESC_ROWS = 2

ALPHABET = "abdegnorsñ"

_GLYPHS: dict[str, tuple[str, ...]] = {
    "a": (
        ".....", ".....", ".....", ".....",
        ".###.", "....#", ".####", "#...#", "#..##", ".##.#",
        ".....", ".....",
    ),
    "b": (
        ".....", ".....", "#....", "#....",
        "#.##.", "##..#", "#...#", "#...#", "##..#", "#.##.",
        ".....", ".....",
    ),
    "d": (
        ".....", ".....", "....#", "....#",
        ".##.#", "#..##", "#...#", "#...#", "#..##", ".##.#",
        ".....", ".....",
    ),
    "e": (
        ".....", ".....", ".....", ".....",
        ".###.", "#...#", "#####", "#....", "#...#", ".###.",
        ".....", ".....",
    ),
    "g": (
        ".....", ".....", ".....", ".....",
        ".####", "#...#", "#...#", "#...#", ".####", "....#",
        "....#", ".###.",
    ),
    "n": (
        ".....", ".....", ".....", ".....",
        "#.##.", "##..#", "#...#", "#...#", "#...#", "#...#",
        ".....", ".....",
    ),
    "o": (
        ".....", ".....", ".....", ".....",
        ".###.", "#...#", "#...#", "#...#", "#...#", ".###.",
        ".....", ".....",
    ),
    "r": (
        ".....", ".....", ".....", ".....",
        "#.##.", "##..#", "#....", "#....", "#....", "#....",
        ".....", ".....",
    ),
    "s": (
        ".....", ".....", ".....", ".....",
        ".####", "#....", ".###.", "....#", "....#", "####.",
        ".....", ".....",
    ),
    "ñ": (
        ".#..#", "#.##.", ".....", ".....",
        "#.##.", "##..#", "#...#", "#...#", "#...#", "#...#",
        ".....", ".....",
    ),
    " ": tuple("....." for _ in range(GLYPH_H)),
}

FONT = {ch: np.array([[c == "#" for c in row] for row in rows], dtype=bool)
        for ch, rows in _GLYPHS.items()}


def render_text(text: str, scale: int = 4) -> np.ndarray:
    """Ink band for ``text``: (12*scale, len*ADVANCE*scale) float in [0, 1],
    1 = ink.  Unknown characters raise KeyError."""
    if not text:
        return np.zeros((GLYPH_H * scale, 0), dtype=np.float32)
    band = np.zeros((GLYPH_H, len(text) * ADVANCE), dtype=bool)
    for i, ch in enumerate(text):
        if ch not in FONT:
            raise KeyError(f"no glyph for {ch!r}")
        band[:, i * ADVANCE:i * ADVANCE + GLYPH_W] = FONT[ch]
    return band.repeat(scale, axis=0).repeat(scale, axis=1).astype(np.float32)


def _paste_ink(canvas_ink: np.ndarray, band_ink: np.ndarray, x0: int,
               tops: np.ndarray) -> None:
    """Add an ink band column-by-column at per-column (possibly fractional)
    top offsets; linear split between the two straddled rows."""
    h = band_ink.shape[0]
    for j in range(band_ink.shape[1]):
        t = float(tops[j])
        i0 = int(np.floor(t))
        f = t - i0
        col = band_ink[:, j]
        canvas_ink[i0:i0 + h, x0 + j] += col * (1.0 - f)
        if f > 0:
            canvas_ink[i0 + 1:i0 + 1 + h, x0 + j] += col * f


def line_geometry(line_id: str, x0: float, x1: float, y_baseline: float,
                  scale: int) -> TextLineGeom:
    baseline = Baseline((Point(x0, y_baseline), Point(x1, y_baseline)))
    return TextLineGeom(line_id, baseline, ASC_ROWS * scale, DESC_ROWS * scale)


def render_line_block(text: str, scale: int = 4, margin: int = 8,
                      curve: np.ndarray | None = None
                      ) -> tuple[np.ndarray, TextLineGeom]:
    """White canvas with one rendered line and its ground-truth geometry.

    ``curve``, when given, holds a per-band-column vertical baseline
    offset in pixels; glyphs are then rotated to the local tangent so the
    text genuinely follows the curve, and the returned geometry carries
    the matching curved baseline polyline.
    """
    band = render_text(text, scale)
    bh, bw = band.shape
    pad_v = margin + (0 if curve is None else int(np.ceil(np.abs(curve).max())) + 4)
    canvas_ink = np.zeros((bh + 2 * pad_v + 16, bw + 2 * margin), dtype=np.float64)
    x0, ytop = margin, pad_v + 8
    yb = ytop + BASELINE_ROW * scale

    if curve is None:
        _paste_ink(canvas_ink, band, x0, np.full(bw, float(ytop)))
        canvas = (1.0 - np.clip(canvas_ink, 0, 1)).astype(np.float32)
        geom = line_geometry("l000", x0 - 3, x0 + bw + 3, yb, scale)
        return canvas, geom

    offs = np.asarray(curve, dtype=np.float64)
    grad = np.gradient(offs)
    for i, ch in enumerate(text):
        glyph = FONT[ch].repeat(scale, axis=0).repeat(scale, axis=1).astype(np.float64)
        gx = i * ADVANCE * scale
        cx = gx + (GLYPH_W * scale) / 2.0
        theta = float(np.arctan(grad[min(int(round(cx)), bw - 1)]))
        _splat_rotated(canvas_ink, glyph, x0 + cx,
                       yb + offs[min(int(round(cx)), bw - 1)],
                       (GLYPH_W * scale) / 2.0, BASELINE_ROW * scale, theta)
    canvas = (1.0 - np.clip(canvas_ink, 0, 1)).astype(np.float32)

    step = max(4, bw // 64)
    xs = np.arange(0, bw + 1, step, dtype=float)
    if xs[-1] != bw:
        xs = np.append(xs, bw)
    ys = yb + np.interp(xs, np.arange(bw), offs)
    pts = tuple(Point(float(x0 + x), float(y)) for x, y in zip(xs, ys))
    geom = TextLineGeom("l000", Baseline(pts), ASC_ROWS * scale, DESC_ROWS * scale)
    return canvas, geom


def _splat_rotated(canvas_ink: np.ndarray, glyph: np.ndarray, ax: float, ay: float,
                   cx: float, by: float, theta: float) -> None:
    """Scatter a glyph rotated by ``theta`` around its baseline anchor.

    Glyph pixel (row iy, col ix) has tangent offset u = ix - cx and
    normal-down offset w = iy - by; it lands at anchor + u*t + w*n with
    t = (cos, sin) and n = (-sin, cos), splatted bilinearly.
    """
    iy, ix = np.nonzero(glyph > 0)
    vals = glyph[iy, ix]
    u = ix + 0.5 - cx
    w = iy + 0.5 - by
    ct, st = np.cos(theta), np.sin(theta)
    xs = ax + u * ct - w * st
    ys = ay + u * st + w * ct
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = xs - x0
    fy = ys - y0
    h, w_c = canvas_ink.shape
    for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                       (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        yy = y0 + dy
        xx = x0 + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w_c)
        np.add.at(canvas_ink, (yy[ok], xx[ok]), vals[ok] * wt[ok])


def make_line_sample(text: str, scale: int = 4, target_height: int = 50,
                     interp_order: int = 2,
                     rng: np.random.Generator | None = None) -> LineImage:
    """Rendered line pushed through the standard rectifying cropper, so
    training samples match what the full pipeline feeds the recognizer.

    With ``rng`` given, the cropping geometry is jittered (baseline shift,
    ascender/descender scale) the way a trained layout detector's output
    varies, which keeps recognizers trained on these crops robust to
    registration noise instead of memorizing exact glyph placement.
    """
    canvas, geom = render_line_block(text, scale)
    if rng is not None:
        dy = float(rng.uniform(-1.0, 1.0)) * scale
        asc = geom.ascender_height * float(rng.uniform(0.85, 1.15))
        desc = geom.descender_height * float(rng.uniform(0.7, 1.4))
        pts = tuple(Point(p.x, p.y + dy) for p in geom.baseline.points)
        geom = TextLineGeom(geom.id, Baseline(pts), asc, desc)
    crop = rectify_and_crop(canvas, geom, target_height=target_height,
                            interp_order=interp_order)
    return crop


def make_corpus(n: int, rng: np.random.Generator, scale: int = 4,
                min_len: int = 4, max_len: int = 7,
                alphabet: str = ALPHABET,
                target_height: int = 50,
                jitter: bool = True) -> list[tuple[LineImage, str]]:
    """Deterministic corpus of rectified line crops with their texts.

    The first lines enumerate the whole alphabet so a charset derived from
    any prefix that includes them covers every character.
    """
    texts = []
    half = (len(alphabet) + 1) // 2
    texts.append(alphabet[:half])
    texts.append(alphabet[half:])
    while len(texts) < n:
        k = int(rng.integers(min_len, max_len + 1))
        texts.append("".join(rng.choice(list(alphabet), size=k)))
    return [(make_line_sample(t, scale, target_height,
                              rng=rng if jitter else None), t)
            for t in texts[:n]]


def render_page(page_id: str, columns: list[list[str]], scale: int = 3,
                margin: int = 36, col_gap: int = 72, pitch: int | None = None
                ) -> tuple[np.ndarray, PageLayout]:
    """Render a multi-column page and its ground-truth layout.

    ``columns`` holds the line texts per column, left to right.  Regions
    are one per column; reading order of the returned layout is
    column-major, matching the renderer's placement.
    """
    if pitch is None:
        pitch = int(GLYPH_H * scale * 1.8)
    col_width = max((max((len(t) for t in col), default=1) for col in columns),
                    default=1) * ADVANCE * scale
    width = 2 * margin + len(columns) * col_width + (len(columns) - 1) * col_gap
    height = 2 * margin + max(len(col) for col in columns) * pitch
    canvas_ink = np.zeros((height, width), dtype=np.float64)

    regions = []
    for ci, col in enumerate(columns):
        x0 = margin + ci * (col_width + col_gap)
        lines = []
        y_top = margin
        max_w = 0
        for li, text in enumerate(col):
            band = render_text(text, scale)
            ytop = y_top + li * pitch
            _paste_ink(canvas_ink, band, x0, np.full(band.shape[1], float(ytop)))
            yb = ytop + BASELINE_ROW * scale
            lines.append(line_geometry(f"r{ci:03d}-l{li:03d}", x0 - 3,
                                       x0 + band.shape[1] + 3, yb, scale))
            max_w = max(max_w, band.shape[1])
        y_last = y_top + (len(col) - 1) * pitch
        poly = (Point(x0 - 6, margin - 6),
                Point(x0 + max_w + 6, margin - 6),
                Point(x0 + max_w + 6, y_last + GLYPH_H * scale + 6),
                Point(x0 - 6, y_last + GLYPH_H * scale + 6))
        regions.append(Region(f"r{ci:03d}", poly, lines))
    canvas = (1.0 - np.clip(canvas_ink, 0, 1)).astype(np.float32)
    return canvas, PageLayout(page_id, width, height, regions)


def page_text(columns: list[list[str]]) -> str:
    """Ground-truth TXT content for a page in column-major reading order."""
    return "\n".join(t for col in columns for t in col)


def random_page_columns(rng: np.random.Generator, n_columns: int = 2,
                        lines_per_col: tuple[int, int] = (4, 6),
                        min_len: int = 4, max_len: int = 7,
                        alphabet: str = ALPHABET) -> list[list[str]]:
    cols = []
    for _ in range(n_columns):
        n = int(rng.integers(lines_per_col[0], lines_per_col[1] + 1))
        col = ["".join(rng.choice(list(alphabet),
                                  size=int(rng.integers(min_len, max_len + 1))))
               for _ in range(n)]
        cols.append(col)
    return cols
