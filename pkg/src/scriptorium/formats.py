"""Serialization: PAGE XML, Markdown, plain text, crop naming, INI config.

All emitters are deterministic byte-for-byte and write UTF-8 without BOM
with LF line endings.  The PAGE emitter covers the element subset
Page / TextRegion / TextLine / Coords / Baseline / TextEquiv / Unicode of
the 2019-07-15 schema; the parser inverts it exactly on that subset and
reports anything it skipped as warnings.
"""

from __future__ import annotations

import configparser
import io
import os
import re
import unicodedata
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape, quoteattr

from .geometry import Baseline, PageLayout, Point, Region, TextLineGeom

PAGE_NS = "http://schema.primaresearch.org/PAGE/gts/pagecontent/2019-07-15"

__all__ = [
    "TranscribedPage", "LineImageRef",
    "emit_page_xml", "parse_page_xml",
    "emit_markdown", "emit_txt",
    "PipelineConfig", "parse_config", "load_config",
    "atomic_write",
]

_XML_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")
_IMAGE_EXT = (".png", ".jpg", ".jpeg", ".tif", ".tiff")


@dataclass
class TranscribedPage:
    """Page layout plus recognized text (possibly partial) per line id."""

    layout: PageLayout
    texts: dict[str, str] = field(default_factory=dict)
    confidences: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        line_ids = {ln.id for _, _, _, ln in self.layout.iter_lines()}
        unknown = set(self.texts) - line_ids
        if unknown:
            raise ValueError(f"texts refer to unknown line ids: {sorted(unknown)}")

    def text_in_reading_order(self) -> list[str]:
        return [self.texts[ln.id] for _, _, _, ln in self.layout.iter_lines()
                if ln.id in self.texts]


@dataclass(frozen=True)
class LineImageRef:
    """Crop file naming convention: <page_id>-rNNN-lNNN.png."""

    page_id: str
    region_index: int
    line_index: int

    @property
    def file_name(self) -> str:
        return f"{self.page_id}-r{self.region_index:03d}-l{self.line_index:03d}.png"

    _PATTERN = re.compile(r"^(?P<page>.+)-r(?P<r>\d{3})-l(?P<l>\d{3})\.png$")

    @classmethod
    def parse(cls, file_name: str) -> "LineImageRef":
        m = cls._PATTERN.match(file_name)
        if not m:
            raise ValueError(f"not a line-image file name: {file_name!r}")
        return cls(m.group("page"), int(m.group("r")), int(m.group("l")))


# ---------------------------------------------------------------------------
# PAGE XML


def _points_attr(points) -> str:
    return " ".join(f"{int(round(p.x))},{int(round(p.y))}" for p in points)


def _parse_points(attr: str, where: str) -> list[Point]:
    pts = []
    for tok in attr.split():
        try:
            xs, ys = tok.split(",")
            pts.append(Point(float(xs), float(ys)))
        except (ValueError, TypeError) as exc:
            raise ValueError(f"unparsable Coords {tok!r} in {where}") from exc
    return pts


def _check_id(kind: str, value: str) -> None:
    if not _XML_NAME.match(value):
        raise ValueError(f"{kind} id {value!r} is not a valid XML name")


def emit_page_xml(page: TranscribedPage) -> str:
    """Serialize to the PAGE 2019-07-15 subset; deterministic output."""
    layout = page.layout
    out = io.StringIO()
    out.write('<?xml version="1.0" encoding="UTF-8"?>\n')
    out.write(f'<PcGts xmlns="{PAGE_NS}">\n')
    out.write(f'  <Page imageFilename={quoteattr(layout.page_id + ".png")}'
              f' imageWidth="{int(layout.width)}" imageHeight="{int(layout.height)}">\n')
    for region in layout.regions:
        _check_id("region", region.id)
        out.write(f'    <TextRegion id={quoteattr(region.id)}>\n')
        out.write(f'      <Coords points={quoteattr(_points_attr(region.polygon))}/>\n')
        for line in region.lines:
            _check_id("line", line.id)
            out.write(f'      <TextLine id={quoteattr(line.id)}>\n')
            out.write(f'        <Coords points={quoteattr(_points_attr(line.polygon))}/>\n')
            out.write(f'        <Baseline points='
                      f'{quoteattr(_points_attr(line.baseline.points))}/>\n')
            if line.id in page.texts:
                conf = page.confidences.get(line.id)
                conf_attr = "" if conf is None else f" conf={quoteattr(repr(float(conf)))}"
                out.write(f'        <TextEquiv{conf_attr}>\n')
                out.write(f'          <Unicode>{escape(page.texts[line.id])}</Unicode>\n')
                out.write('        </TextEquiv>\n')
            out.write('      </TextLine>\n')
        out.write('    </TextRegion>\n')
    out.write('  </Page>\n')
    out.write('</PcGts>\n')
    return out.getvalue()


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def parse_page_xml(document: str | bytes) -> tuple[TranscribedPage, list[str]]:
    """Inverse of :func:`emit_page_xml` on the supported subset.

    Unknown elements and attributes are skipped and reported in the
    returned warning list; a TextLine without a Baseline is skipped with
    a warning.  Heights are recovered from the distance between the line
    polygon's top/bottom rings and the baseline.
    """
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise ValueError(f"malformed XML: {exc}") from exc
    warnings: list[str] = []
    if _local(root.tag) != "PcGts":
        raise ValueError(f"expected PcGts root, got {_local(root.tag)!r}")
    page_el = None
    for child in root:
        if _local(child.tag) == "Page":
            page_el = child
        else:
            warnings.append(f"ignored element {_local(child.tag)!r}")
    if page_el is None:
        raise ValueError("missing Page element")

    name = page_el.get("imageFilename", "page")
    page_id = name
    for ext in _IMAGE_EXT:
        if name.lower().endswith(ext):
            page_id = name[: -len(ext)]
            break
    try:
        width = int(page_el.get("imageWidth", "0"))
        height = int(page_el.get("imageHeight", "0"))
    except ValueError as exc:
        raise ValueError("non-integer page dimensions") from exc

    regions: list[Region] = []
    texts: dict[str, str] = {}
    confidences: dict[str, float] = {}
    for rel in page_el:
        if _local(rel.tag) != "TextRegion":
            warnings.append(f"ignored element {_local(rel.tag)!r} in Page")
            continue
        rid = rel.get("id", f"r{len(regions):03d}")
        rpoly: list[Point] = []
        lines: list[TextLineGeom] = []
        for lel in rel:
            tag = _local(lel.tag)
            if tag == "Coords":
                rpoly = _parse_points(lel.get("points", ""), f"region {rid}")
            elif tag == "TextLine":
                lid = lel.get("id", f"{rid}-l{len(lines):03d}")
                lpoly: list[Point] = []
                bl: list[Point] = []
                text = None
                conf = None
                for sub in lel:
                    stag = _local(sub.tag)
                    if stag == "Coords":
                        lpoly = _parse_points(sub.get("points", ""), f"line {lid}")
                    elif stag == "Baseline":
                        bl = _parse_points(sub.get("points", ""), f"line {lid}")
                    elif stag == "TextEquiv":
                        if sub.get("conf") is not None:
                            conf = float(sub.get("conf"))
                        for u in sub:
                            if _local(u.tag) == "Unicode":
                                text = u.text or ""
                    else:
                        warnings.append(f"ignored element {stag!r} in line {lid}")
                # integer-rounded coordinates may collapse near-vertical
                # vertices; keep the strictly increasing subsequence
                monotone: list[Point] = []
                for p in bl:
                    if not monotone or p.x > monotone[-1].x:
                        monotone.append(p)
                if len(monotone) < len(bl):
                    warnings.append(f"line {lid}: dropped non-increasing "
                                    f"baseline points")
                bl = monotone
                if len(bl) < 2:
                    warnings.append(f"line {lid} has no usable Baseline; skipped")
                    continue
                asc, desc = _heights_from_polygon(bl, lpoly)
                lines.append(TextLineGeom(lid, Baseline(tuple(bl)), asc, desc,
                                          tuple(lpoly)))
                if text is not None:
                    texts[lid] = text
                if conf is not None:
                    confidences[lid] = conf
            else:
                warnings.append(f"ignored element {tag!r} in region {rid}")
        regions.append(Region(rid, tuple(rpoly), lines))
    layout = PageLayout(page_id, width, height, regions)
    return TranscribedPage(layout, texts, confidences), warnings


def _heights_from_polygon(baseline: list[Point], polygon: list[Point]) -> tuple[float, float]:
    """Recover ascender/descender extents from a line polygon.

    The emitter writes the polygon as baseline+normals offsets, so the
    first half is the top ring and the second half the bottom ring; fall
    back to vertical bounds when the polygon has a different layout.
    """
    base_y = sum(p.y for p in baseline) / len(baseline)
    if polygon and len(polygon) == 2 * len(baseline):
        top = polygon[: len(baseline)]
        bottom = polygon[len(baseline):]
        asc = base_y - sum(p.y for p in top) / len(top)
        desc = sum(p.y for p in bottom) / len(bottom) - base_y
    elif polygon:
        ys = [p.y for p in polygon]
        asc = base_y - min(ys)
        desc = max(ys) - base_y
    else:
        asc, desc = 1.0, 0.0
    return max(asc, 1.0), max(desc, 0.0)


# ---------------------------------------------------------------------------
# Markdown and plain text

_MD_SPECIALS = set("\\`*_{}[]()#+-.!|>~<")


def _md_escape(text: str) -> str:
    return "".join("\\" + c if c in _MD_SPECIALS else c for c in text)


def emit_markdown(page: TranscribedPage) -> str:
    """Revision-friendly Markdown: one heading, one block per region.

    Line breaks inside a region are preserved with two-space hard breaks;
    untranscribed lines appear as HTML comments so reviewers see gaps.
    """
    parts = [f"# {page.layout.page_id}\n"]
    for region in page.layout.regions:
        block = [f"<!-- region: {region.id} -->"]
        rendered = []
        for line in region.lines:
            if line.id in page.texts:
                rendered.append(_md_escape(page.texts[line.id]))
            else:
                rendered.append(f"<!-- line {line.id}: no text -->")
        for i, text in enumerate(rendered):
            block.append(text + ("  " if i < len(rendered) - 1 else ""))
        parts.append("\n" + "\n".join(block) + "\n")
    return "".join(parts)


def emit_txt(page: TranscribedPage) -> str:
    """One line per transcribed TextLine in reading order; no trailing newline."""
    return "\n".join(page.text_in_reading_order())


# ---------------------------------------------------------------------------
# INI configuration


@dataclass
class PipelineFlags:
    run_layout_parser: bool = True
    run_line_cropper: bool = True
    run_ocr: bool = True
    run_decoder: bool = False  # accepted but inert: no LM decoding stage


@dataclass
class LayoutParserConfig:
    method: str = "LAYOUT_CNN"
    detect_lines: bool = True
    detect_regions: bool = True
    merge_lines: bool = False
    adjust_heights: bool = False
    model_path: str = "./ParseNet_296000.pt"
    max_megapixels: float = 5.0
    use_cpu: bool = False
    downsample: int = 5
    detection_threshold: float = 0.2
    line_end_weight: float = 1.0
    vertical_line_connection_range: int = 3
    smooth_line_predictions: bool = False


@dataclass
class SorterConfig:
    method: str = "REGION_SORTER_SMART"


@dataclass
class CropperConfig:
    interp: int = 2
    line_scale: float = 1.0
    line_height: int = 50


@dataclass
class OcrSectionConfig:
    ocr_json: str = "./ocr_engine.json"
    use_cpu: bool = False
    model_path: str = ""


@dataclass
class TrainingSectionConfig:
    max_lr: float = 1e-3
    train_batch: int = 64
    val_batch: int = 8
    weight_decay: float = 0.5
    mask_ratio: float = 0.4
    attn_mask_ratio: float = 0.1
    max_span: int = 8
    image_width: int = 512
    image_height: int = 64
    projection: int = 8
    morph_max_kernel: int = 2
    morph_iterations: int = 1
    sample_prob: float = 0.5
    alpha: float = 1.0
    total_iterations: int = 100000
    sam_rho: float = 0.05
    seed: int = 0


@dataclass
class PipelineConfig:
    flags: PipelineFlags = field(default_factory=PipelineFlags)
    layout: LayoutParserConfig = field(default_factory=LayoutParserConfig)
    sorter: SorterConfig = field(default_factory=SorterConfig)
    cropper: CropperConfig = field(default_factory=CropperConfig)
    ocr: OcrSectionConfig = field(default_factory=OcrSectionConfig)
    training: TrainingSectionConfig = field(default_factory=TrainingSectionConfig)


_BOOL_TRUE = {"yes", "true", "1", "on"}
_BOOL_FALSE = {"no", "false", "0", "off"}

# maps section -> key (lowercase) -> (target dataclass attr, field name)
_SECTION_KEYS: dict[str, dict[str, tuple[str, str]]] = {
    "PAGE_PARSER": {
        "run_layout_parser": ("flags", "run_layout_parser"),
        "run_line_cropper": ("flags", "run_line_cropper"),
        "run_ocr": ("flags", "run_ocr"),
        "run_decoder": ("flags", "run_decoder"),
    },
    "LAYOUT_PARSER_1": {
        "method": ("layout", "method"),
        "detect_lines": ("layout", "detect_lines"),
        "detect_regions": ("layout", "detect_regions"),
        "merge_lines": ("layout", "merge_lines"),
        "adjust_heights": ("layout", "adjust_heights"),
        "model_path": ("layout", "model_path"),
        "max_megapixels": ("layout", "max_megapixels"),
        "use_cpu": ("layout", "use_cpu"),
        "downsample": ("layout", "downsample"),
        "detection_threshold": ("layout", "detection_threshold"),
        "line_end_weight": ("layout", "line_end_weight"),
        "vertical_line_connection_range": ("layout", "vertical_line_connection_range"),
        "smooth_line_predictions": ("layout", "smooth_line_predictions"),
    },
    "LAYOUT_PARSER_2": {
        "method": ("sorter", "method"),
    },
    "LINE_CROPPER": {
        "interp": ("cropper", "interp"),
        "line_scale": ("cropper", "line_scale"),
        "line_height": ("cropper", "line_height"),
    },
    "OCR": {
        "ocr_json": ("ocr", "ocr_json"),
        "use_cpu": ("ocr", "use_cpu"),
        "model_path": ("ocr", "model_path"),
    },
    "OCR_TRAINING": {
        # verbatim long names as printed in the training-configuration table
        "maximum learning rate": ("training", "max_lr"),
        "training batch size": ("training", "train_batch"),
        "validation batch size": ("training", "val_batch"),
        "weight decay factor": ("training", "weight_decay"),
        "mask ratio for the input": ("training", "mask_ratio"),
        "attention mask ratio": ("training", "attn_mask_ratio"),
        "maximum span length for attention": ("training", "max_span"),
        "image size for input": ("training", "__image_size__"),
        "projection size": ("training", "projection"),
        "maximum kernel size for dilation erosion": ("training", "morph_max_kernel"),
        "number of iterations for dilation erosion": ("training", "morph_iterations"),
        "probability factor for random sampling": ("training", "sample_prob"),
        "alpha parameter": ("training", "alpha"),
        "total number of iterations": ("training", "total_iterations"),
        # snake_case aliases
        "max_lr": ("training", "max_lr"),
        "train_batch": ("training", "train_batch"),
        "val_batch": ("training", "val_batch"),
        "weight_decay": ("training", "weight_decay"),
        "mask_ratio": ("training", "mask_ratio"),
        "attn_mask_ratio": ("training", "attn_mask_ratio"),
        "max_span": ("training", "max_span"),
        "image_size": ("training", "__image_size__"),
        "projection": ("training", "projection"),
        "morph_max_kernel": ("training", "morph_max_kernel"),
        "morph_iterations": ("training", "morph_iterations"),
        "sample_prob": ("training", "sample_prob"),
        "alpha": ("training", "alpha"),
        "total_iterations": ("training", "total_iterations"),
        "sam_rho": ("training", "sam_rho"),
        "seed": ("training", "seed"),
    },
}


def _convert(section: str, key: str, raw: str, target_type):
    raw = raw.strip()
    try:
        if target_type is bool:
            low = raw.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(f"not a yes/no value: {raw!r}")
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ValueError(f"[{section}] {key.upper()}: {exc}") from exc


def _parse_image_size(section: str, key: str, raw: str) -> tuple[int, int]:
    m = re.match(r"^\s*(\d+)\s*[xX,]\s*(\d+)\s*$", raw)
    if not m:
        raise ValueError(f"[{section}] {key.upper()}: expected 'WIDTH x HEIGHT', got {raw!r}")
    return int(m.group(1)), int(m.group(2))


def parse_config(text: str) -> tuple[PipelineConfig, list[str]]:
    """Parse INI configuration text into a validated typed configuration.

    Keys are case-insensitive; booleans accept yes/no variants; unknown
    sections or keys produce warnings, not errors; anything omitted keeps
    its documented default.
    """
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=", ":"))
    parser.optionxform = lambda k: k.strip().lower()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValueError(f"invalid config: {exc}") from exc

    cfg = PipelineConfig()
    warnings: list[str] = []
    for section in parser.sections():
        canon = section.strip().upper()
        mapping = _SECTION_KEYS.get(canon)
        if mapping is None:
            warnings.append(f"unknown section [{section}]")
            continue
        for key, raw in parser.items(section):
            entry = mapping.get(key)
            if entry is None:
                warnings.append(f"unknown key {key.upper()!r} in [{canon}]")
                continue
            attr, fname = entry
            target = getattr(cfg, attr)
            if fname == "__image_size__":
                w, h = _parse_image_size(canon, key, raw)
                target.image_width = w
                target.image_height = h
                continue
            current = getattr(target, fname)
            setattr(target, fname, _convert(canon, key, raw, type(current)))
    return cfg, warnings


def load_config(path: str | Path | None) -> tuple[PipelineConfig, list[str]]:
    """Read configuration from ``path`` (or the FPTHD_CONFIG env var)."""
    if path is None:
        path = os.environ.get("FPTHD_CONFIG")
    if not path:
        return PipelineConfig(), []
    return parse_config(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# atomic file output


def atomic_write(path: str | Path, data: str | bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(f"{path.name}.tmp.{os.getpid()}")
    if isinstance(data, str):
        tmp.write_text(data, encoding="utf-8", newline="\n")
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)
