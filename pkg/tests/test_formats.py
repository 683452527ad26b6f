import re
from pathlib import Path

import numpy as np
import pytest

from scriptorium.formats import (LineImageRef, PipelineConfig, TranscribedPage,
                                 atomic_write, emit_markdown, emit_page_xml,
                                 emit_txt, parse_config, parse_page_xml)
from scriptorium.geometry import (Baseline, PageLayout, Point, Region,
                                  TextLineGeom)

GOLDEN = Path(__file__).parent / "golden"


def make_sample_page() -> TranscribedPage:
    l1 = TextLineGeom("r000-l000", Baseline.from_xy([(0, 95), (10, 95)]), 5, 2)
    l2 = TextLineGeom("r000-l001", Baseline.from_xy([(0, 130), (220, 131)]), 14, 6)
    l3 = TextLineGeom("r001-l000", Baseline.from_xy([(300, 96), (500, 96)]), 15, 5)
    l4 = TextLineGeom("r001-l001", Baseline.from_xy([(300, 133), (480, 133)]), 15, 5)
    r0 = Region("r000", (Point(0, 60), Point(240, 60), Point(240, 150), Point(0, 150)),
                [l1, l2])
    r1 = Region("r001", (Point(290, 60), Point(520, 60), Point(520, 150), Point(290, 150)),
                [l3, l4])
    layout = PageLayout("fueros-0042", 560, 200, [r0, r1])
    texts = {
        "r000-l000": "dñi",
        "r000-l001": "et fuero de aragon",
        "r001-l000": "qð sñr *nota* #84",
    }
    return TranscribedPage(layout, texts, {"r000-l000": 0.97})


def random_layout(rng) -> PageLayout:
    regions = []
    for ri in range(int(rng.integers(0, 4))):
        x0 = int(rng.integers(0, 300))
        lines = []
        for li in range(int(rng.integers(1, 4))):
            y = int(rng.integers(20, 700))
            n = int(rng.integers(2, 5))
            xs = np.cumsum(rng.integers(5, 40, size=n)) + x0
            ys = y + rng.integers(-3, 4, size=n)
            lines.append(TextLineGeom(
                f"r{ri:03d}-l{li:03d}",
                Baseline.from_xy(list(zip(map(int, xs), map(int, ys)))),
                float(rng.integers(4, 30)), float(rng.integers(0, 12))))
        poly = (Point(x0, 10), Point(x0 + 200, 10),
                Point(x0 + 200, 700), Point(x0, 700))
        regions.append(Region(f"r{ri:03d}", poly, lines))
    return PageLayout("page-xy", 800, 760, regions)


# ---------------------------------------------------------------------------
# PAGE XML


def test_golden_page_xml():
    assert emit_page_xml(make_sample_page()).encode() == \
        (GOLDEN / "sample_page.xml").read_bytes()


def test_emit_deterministic():
    page = make_sample_page()
    assert emit_page_xml(page) == emit_page_xml(page)


def test_emit_parse_emit_fixed_point():
    doc = emit_page_xml(make_sample_page())
    parsed, warnings = parse_page_xml(doc)
    assert warnings == []
    assert emit_page_xml(parsed) == doc


def test_roundtrip_structural_identity():
    rng = np.random.default_rng(0)
    for _ in range(60):
        layout = random_layout(rng)
        page = TranscribedPage(layout)
        parsed, _ = parse_page_xml(emit_page_xml(page))
        assert parsed.layout.page_id == layout.page_id
        assert (parsed.layout.width, parsed.layout.height) == (800, 760)
        assert [r.id for r in parsed.layout.regions] == [r.id for r in layout.regions]
        for rp, ro in zip(parsed.layout.regions, layout.regions):
            assert [l.id for l in rp.lines] == [l.id for l in ro.lines]
            assert [(p.x, p.y) for p in rp.polygon] == \
                   [(p.x, p.y) for p in ro.polygon]
            for lp, lo in zip(rp.lines, ro.lines):
                assert [(p.x, p.y) for p in lp.baseline.points] == \
                       [(p.x, p.y) for p in lo.baseline.points]


def test_empty_layout_document():
    page = TranscribedPage(PageLayout("empty-page", 100, 50, []))
    doc = emit_page_xml(page)
    assert "<Page" in doc and "TextRegion" not in doc
    parsed, warnings = parse_page_xml(doc)
    assert parsed.layout.regions == [] and warnings == []


def test_unknown_element_warns():
    doc = emit_page_xml(make_sample_page())
    doc = doc.replace("<Page ", "<Metadata><Creator>x</Creator></Metadata><Page ", 1)
    parsed, warnings = parse_page_xml(doc)
    assert any("Metadata" in w for w in warnings)
    assert parsed.layout.line_count == 4


def test_coords_string_parsing():
    doc = """<?xml version="1.0"?>
    <PcGts xmlns="http://schema.primaresearch.org/PAGE/gts/pagecontent/2019-07-15">
      <Page imageFilename="p.png" imageWidth="100" imageHeight="100">
        <TextRegion id="r0">
          <Coords points="10,20 30,40 50,60"/>
        </TextRegion>
      </Page>
    </PcGts>"""
    parsed, _ = parse_page_xml(doc)
    assert [(p.x, p.y) for p in parsed.layout.regions[0].polygon] == \
        [(10.0, 20.0), (30.0, 40.0), (50.0, 60.0)]


def test_missing_baseline_skips_line_with_warning():
    doc = """<?xml version="1.0"?>
    <PcGts xmlns="http://schema.primaresearch.org/PAGE/gts/pagecontent/2019-07-15">
      <Page imageFilename="p.png" imageWidth="100" imageHeight="100">
        <TextRegion id="r0">
          <Coords points="0,0 99,0 99,99 0,99"/>
          <TextLine id="l0"><Coords points="0,0 10,0 10,5 0,5"/></TextLine>
        </TextRegion>
      </Page>
    </PcGts>"""
    parsed, warnings = parse_page_xml(doc)
    assert parsed.layout.line_count == 0
    assert any("Baseline" in w for w in warnings)


def test_parse_errors():
    with pytest.raises(ValueError, match="malformed"):
        parse_page_xml("<PcGts><unclosed")
    with pytest.raises(ValueError, match="Page"):
        parse_page_xml("<PcGts xmlns='http://schema.primaresearch.org/PAGE/"
                       "gts/pagecontent/2019-07-15'></PcGts>")
    bad_coords = """<PcGts xmlns="http://schema.primaresearch.org/PAGE/gts/pagecontent/2019-07-15">
      <Page imageFilename="p.png" imageWidth="9" imageHeight="9">
        <TextRegion id="r0"><Coords points="xx,yy"/></TextRegion>
      </Page></PcGts>"""
    with pytest.raises(ValueError, match="r0"):
        parse_page_xml(bad_coords)


def test_invalid_id_rejected_on_emit():
    line = TextLineGeom("bad id!", Baseline.from_xy([(0, 5), (10, 5)]), 3, 1)
    layout = PageLayout("p", 20, 20, [Region("r0", (), [line])])
    with pytest.raises(ValueError, match="XML name"):
        emit_page_xml(TranscribedPage(layout))


def test_texts_must_reference_known_lines():
    layout = PageLayout("p", 20, 20, [])
    with pytest.raises(ValueError, match="unknown line"):
        TranscribedPage(layout, {"ghost": "boo"})


def test_confidence_roundtrip():
    page = make_sample_page()
    parsed, _ = parse_page_xml(emit_page_xml(page))
    assert parsed.confidences == {"r000-l000": 0.97}


# ---------------------------------------------------------------------------
# Markdown / TXT


def test_golden_markdown():
    assert emit_markdown(make_sample_page()).encode() == \
        (GOLDEN / "sample_page.md").read_bytes()


def test_markdown_empty_page():
    page = TranscribedPage(PageLayout("folio-7", 10, 10, []))
    assert emit_markdown(page) == "# folio-7\n"


def _render_markdown_subset(md: str) -> list[str]:
    """Tiny renderer for the emitted subset: strips the heading, comments
    and hard breaks, and resolves backslash escapes."""
    out = []
    for line in md.split("\n"):
        if line.startswith("# ") or line.startswith("<!--") or not line.strip():
            continue
        line = line[:-2] if line.endswith("  ") else line
        out.append(re.sub(r"\\(.)", r"\1", line))
    return out


def test_markdown_escaping_round_trip():
    texts = ["# not a heading", "*emph* _x_ [link](url)", "`code` + |table|",
             "a\\b {c} <tag> 1. list"]
    lines = [TextLineGeom(f"l{i}", Baseline.from_xy([(0, 10 + 20 * i), (50, 10 + 20 * i)]),
                          5, 1) for i in range(len(texts))]
    layout = PageLayout("esc", 100, 120, [Region("r0", (), lines)])
    page = TranscribedPage(layout, {f"l{i}": t for i, t in enumerate(texts)})
    assert _render_markdown_subset(emit_markdown(page)) == texts


def test_golden_txt():
    assert emit_txt(make_sample_page()).encode() == \
        (GOLDEN / "sample_page.txt").read_bytes()


def test_txt_simple_and_empty():
    l1 = TextLineGeom("a", Baseline.from_xy([(0, 10), (10, 10)]), 3, 0)
    l2 = TextLineGeom("b", Baseline.from_xy([(0, 30), (10, 30)]), 3, 0)
    layout = PageLayout("p", 20, 40, [Region("r", (), [l1, l2])])
    page = TranscribedPage(layout, {"a": "abc", "b": "def"})
    assert emit_txt(page) == "abc\ndef"
    assert emit_txt(TranscribedPage(PageLayout("p", 1, 1, []))) == ""


def test_txt_line_count_matches_transcribed():
    page = make_sample_page()
    assert len(emit_txt(page).split("\n")) == len(page.texts)


def test_txt_untranscribed_omitted():
    page = make_sample_page()
    assert "r001-l001" not in emit_txt(page)
    assert emit_txt(page).split("\n")[0] == "dñi"


# ---------------------------------------------------------------------------
# crop naming


def test_line_image_ref_roundtrip():
    ref = LineImageRef("fueros-0042", 1, 23)
    assert ref.file_name == "fueros-0042-r001-l023.png"
    assert LineImageRef.parse(ref.file_name) == ref


def test_line_image_ref_hyphenated_page_id():
    # page ids containing -rNNN-lNNN-like substrings still parse: the
    # suffix is anchored at the end
    ref = LineImageRef("a-r001-l002-b", 3, 4)
    parsed = LineImageRef.parse(ref.file_name)
    assert parsed.page_id == "a-r001-l002-b"
    assert (parsed.region_index, parsed.line_index) == (3, 4)


def test_line_image_ref_rejects_nonmatching():
    with pytest.raises(ValueError):
        LineImageRef.parse("nope.png")
    with pytest.raises(ValueError):
        LineImageRef.parse("p-r1-l1.png")  # not zero-padded to 3 digits


# ---------------------------------------------------------------------------
# config


TABLE1_INI = """
[PAGE_PARSER]
RUN_LAYOUT_PARSER = yes
RUN_LINE_CROPPER = yes
RUN_OCR = yes
RUN_DECODER = no

[LAYOUT_PARSER_1]
METHOD = LAYOUT_CNN
DETECT_LINES = yes
DETECT_REGIONS = yes
MERGE_LINES = no
ADJUST_HEIGHTS = no
MODEL_PATH = ./ParseNet_296000.pt
MAX_MEGAPIXELS = 5
USE_CPU = no
DOWNSAMPLE = 5
DETECTION_THRESHOLD = 0.2
LINE_END_WEIGHT = 1.0
VERTICAL_LINE_CONNECTION_RANGE = 3
SMOOTH_LINE_PREDICTIONS = no

[LAYOUT_PARSER_2]
METHOD = REGION_SORTER_SMART

[LINE_CROPPER]
INTERP = 2
LINE_SCALE = 1.0
LINE_HEIGHT = 50
"""

TABLE5_INI = """
[OCR_TRAINING]
Maximum learning rate = 1e-3
Training batch size = 64
Validation batch size = 8
Weight decay factor = 0.5
Mask ratio for the input = 0.4
Attention mask ratio = 0.1
Maximum span length for attention = 8
Image size for input = 512 x 64
Projection size = 8
Maximum kernel size for dilation erosion = 2
Number of iterations for dilation erosion = 1
Probability factor for random sampling = 0.5
Alpha parameter = 1
Total number of iterations = 100000
"""


def test_config_table1_verbatim():
    cfg, warnings = parse_config(TABLE1_INI)
    assert warnings == []
    assert cfg.flags.run_layout_parser is True
    assert cfg.flags.run_decoder is False
    assert cfg.layout.detection_threshold == 0.2
    assert cfg.layout.downsample == 5
    assert cfg.layout.merge_lines is False
    assert cfg.layout.vertical_line_connection_range == 3
    assert cfg.layout.max_megapixels == 5.0
    assert cfg.cropper.line_height == 50
    assert cfg.cropper.interp == 2
    assert cfg.cropper.line_scale == 1.0
    assert cfg.sorter.method == "REGION_SORTER_SMART"


def test_config_table5_verbatim():
    cfg, warnings = parse_config(TABLE5_INI)
    assert warnings == []
    t = cfg.training
    assert t.max_lr == 1e-3
    assert t.train_batch == 64 and t.val_batch == 8
    assert t.weight_decay == 0.5
    assert t.mask_ratio == 0.4 and t.attn_mask_ratio == 0.1
    assert t.max_span == 8
    assert (t.image_width, t.image_height) == (512, 64)
    assert t.projection == 8
    assert t.morph_max_kernel == 2 and t.morph_iterations == 1
    assert t.sample_prob == 0.5 and t.alpha == 1.0
    assert t.total_iterations == 100000


def test_config_empty_gives_defaults():
    cfg, warnings = parse_config("")
    assert warnings == []
    assert cfg == PipelineConfig()


def test_config_case_and_spacing_variants():
    for text in ("[page_parser]\nrun_ocr = YES",
                 "[Page_Parser]\nRun_OCR=yes",
                 "[PAGE_PARSER]\nRUN_OCR :  true"):
        cfg, _ = parse_config(text)
        assert cfg.flags.run_ocr is True
    cfg, _ = parse_config("[PAGE_PARSER]\nRUN_OCR = No")
    assert cfg.flags.run_ocr is False


def test_config_unknown_keys_warn():
    cfg, warnings = parse_config("[LAYOUT_PARSER_1]\nMYSTERY_KNOB = 7\n"
                                 "[WHO_KNOWS]\nX = 1")
    assert any("MYSTERY_KNOB" in w for w in warnings)
    assert any("WHO_KNOWS" in w for w in warnings)
    assert cfg.layout.downsample == 5  # untouched defaults


def test_config_type_error_names_section_and_key():
    with pytest.raises(ValueError, match=r"\[LAYOUT_PARSER_1\] DOWNSAMPLE"):
        parse_config("[LAYOUT_PARSER_1]\nDOWNSAMPLE = abc")


def test_config_bad_image_size():
    with pytest.raises(ValueError, match="IMAGE SIZE"):
        parse_config("[OCR_TRAINING]\nImage size for input = huge")


# ---------------------------------------------------------------------------
# atomic writes


def test_atomic_write_no_partial(tmp_path):
    target = tmp_path / "out.txt"
    atomic_write(target, "hello")
    assert target.read_text() == "hello"
    assert list(tmp_path.iterdir()) == [target]
    atomic_write(target, b"bytes")
    assert target.read_bytes() == b"bytes"
