import numpy as np
import pytest

from scriptorium import cli, layout as layout_mod, ocrnet, raster, synth
from scriptorium.cli import load_manifest, sanitize_page_id
from scriptorium.ocrnet import Charset, compact_conv_spec, init_ocr_model


@pytest.fixture(scope="module")
def quick_layout_ckpt(tmp_path_factory):
    """A briefly trained layout net: good enough to find lines on clean
    synthetic pages; CLI tests exercise plumbing, not accuracy."""
    rng = np.random.default_rng(5)
    corpus = []
    for i in range(6):
        cols = synth.random_page_columns(rng, n_columns=2)
        img, gt = synth.render_page(f"q{i}", cols, scale=3)
        shape = (max(1, round(img.shape[0] / 5)), max(1, round(img.shape[1] / 5)))
        corpus.append((img, layout_mod.rasterize_maps(gt, 5, shape)))
    net, _ = layout_mod.train_layout_net(
        corpus, layout_mod.LayoutTrainConfig(lr=3e-3, iterations=150,
                                             batch_size=2, seed=0))
    path = tmp_path_factory.mktemp("models") / "layout.fpthd"
    layout_mod.save_checkpoint(net, path)
    return path


@pytest.fixture(scope="module")
def quick_ocr_ckpt(tmp_path_factory):
    model = init_ocr_model(Charset(tuple(synth.ALPHABET)), dim=32, blocks=1,
                           heads=4, input_height=64, input_width=256,
                           projection=8, conv_spec=compact_conv_spec(32), seed=0)
    path = tmp_path_factory.mktemp("models") / "ocr.fpthd"
    ocrnet.save_checkpoint(model, path)
    return path


@pytest.fixture(scope="module")
def sample_pages(tmp_path_factory):
    root = tmp_path_factory.mktemp("pages")
    paths = []
    for i in range(2):
        cols = synth.random_page_columns(np.random.default_rng(40 + i), 2)
        img, _ = synth.render_page(f"pg{i}", cols, scale=3)
        path = root / f"pg{i}.png"
        raster.save_png(path, img)
        paths.append(path)
    return paths


def read_outputs(out_dir, stem):
    return {ext: (out_dir / f"{stem}.{ext}").read_bytes()
            for ext in ("xml", "md", "txt")}


# ---------------------------------------------------------------------------
# manifests


def test_manifest_tsv_and_tree_equal(tmp_path):
    tree = tmp_path / "tree"
    tree.mkdir()
    rows = []
    for i, text in enumerate(["ab", "noñ", "dego"]):
        img = synth.make_line_sample(text, scale=3)
        name = f"line{i}.png"
        raster.save_png(tree / name, img.pixels)
        (tree / f"line{i}.txt").write_text(text, encoding="utf-8")
        rows.append(f"tree/{name}\t{text}")
    tsv = tmp_path / "data.tsv"
    tsv.write_text("\n".join(rows) + "\n", encoding="utf-8")

    from_tree = load_manifest(tree)
    from_tsv = load_manifest(tsv)
    assert [p.name for p, _ in from_tree.entries] == \
           [p.name for p, _ in from_tsv.entries]
    assert [t for _, t in from_tree.entries] == [t for _, t in from_tsv.entries]
    assert from_tree.charset == from_tsv.charset
    assert set("abdegnoñ") <= set(from_tree.charset.chars)


def test_manifest_missing_image_names_row(tmp_path):
    tsv = tmp_path / "data.tsv"
    tsv.write_text("ok.png\tab\nmissing.png\tcd\n", encoding="utf-8")
    raster.save_png(tmp_path / "ok.png", np.ones((10, 10)))
    with pytest.raises(ValueError, match="data.tsv:2"):
        load_manifest(tsv)


def test_manifest_tree_missing_transcript(tmp_path):
    raster.save_png(tmp_path / "orphan.png", np.ones((10, 10)))
    with pytest.raises(ValueError, match="orphan"):
        load_manifest(tmp_path)


def test_sanitize_page_id():
    assert sanitize_page_id("scan 001 (copy)") == "scan_001__copy_"
    assert sanitize_page_id("0042") == "p_0042"
    assert sanitize_page_id("fueros-42.v2") == "fueros-42.v2"


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_identical(tmp_path, capsys):
    for d in ("hyp", "ref"):
        (tmp_path / d).mkdir()
        (tmp_path / d / "p0.txt").write_text("abc\ndef", encoding="utf-8")
    rc = cli.main(["evaluate", "--hyp", str(tmp_path / "hyp"),
                   "--ref", str(tmp_path / "ref")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "CER: 0.0000%" in out


def test_evaluate_known_rate(tmp_path, capsys):
    (tmp_path / "hyp").mkdir()
    (tmp_path / "ref").mkdir()
    (tmp_path / "ref" / "p.txt").write_text("a" * 100, encoding="utf-8")
    (tmp_path / "hyp" / "p.txt").write_text("bb" + "a" * 98, encoding="utf-8")
    csv = tmp_path / "report.csv"
    rc = cli.main(["evaluate", "--hyp", str(tmp_path / "hyp"),
                   "--ref", str(tmp_path / "ref"), "--out", str(csv)])
    assert rc == 0
    assert "CER: 2.0000%" in capsys.readouterr().out
    assert csv.read_text().strip().endswith("TOTAL,0.020000,1.000000")


def test_evaluate_stem_mismatch(tmp_path, capsys):
    (tmp_path / "hyp").mkdir()
    (tmp_path / "ref").mkdir()
    (tmp_path / "ref" / "a.txt").write_text("x", encoding="utf-8")
    (tmp_path / "hyp" / "b.txt").write_text("x", encoding="utf-8")
    rc = cli.main(["evaluate", "--hyp", str(tmp_path / "hyp"),
                   "--ref", str(tmp_path / "ref")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "a" in err and "b" in err


# ---------------------------------------------------------------------------
# transcribe pipeline


def test_transcribe_full_run(tmp_path, sample_pages, quick_layout_ckpt,
                             quick_ocr_ckpt):
    out = tmp_path / "out"
    rc = cli.main(["transcribe", *map(str, sample_pages), "--out", str(out),
                   "--layout-model", str(quick_layout_ckpt),
                   "--ocr-model", str(quick_ocr_ckpt), "--workers", "1"])
    assert rc == 0
    for page in sample_pages:
        for ext in ("xml", "md", "txt"):
            assert (out / f"{page.stem}.{ext}").exists()
    crops = list((out / "crops").glob("*.png"))
    assert crops, "expected kept crops"
    from scriptorium.formats import LineImageRef
    for crop in crops:
        LineImageRef.parse(crop.name)  # naming convention holds


def test_transcribe_blank_page_valid_outputs(tmp_path, quick_layout_ckpt,
                                             quick_ocr_ckpt):
    # exit 0 and all three well-formed outputs; the zero-lines guarantee
    # needs a converged layout net and is asserted in the acceptance suite
    page = tmp_path / "blank.png"
    raster.save_png(page, np.ones((300, 400)))
    out = tmp_path / "out"
    rc = cli.main(["transcribe", str(page), "--out", str(out),
                   "--layout-model", str(quick_layout_ckpt),
                   "--ocr-model", str(quick_ocr_ckpt), "--workers", "1"])
    assert rc == 0
    from scriptorium.formats import parse_page_xml
    parsed, _ = parse_page_xml((out / "blank.xml").read_text(encoding="utf-8"))
    assert parsed.layout.page_id == "blank"
    assert (out / "blank.md").read_text(encoding="utf-8").startswith("# blank")


def test_transcribe_partial_failure(tmp_path, sample_pages, quick_layout_ckpt,
                                    quick_ocr_ckpt, capsys):
    pages_dir = tmp_path / "pages"
    pages_dir.mkdir()
    for p in sample_pages:
        (pages_dir / p.name).write_bytes(p.read_bytes())
    (pages_dir / "broken.png").write_bytes(b"not a png at all")
    out = tmp_path / "out"
    rc = cli.main(["transcribe", str(pages_dir), "--out", str(out),
                   "--layout-model", str(quick_layout_ckpt),
                   "--ocr-model", str(quick_ocr_ckpt), "--workers", "1"])
    assert rc == 1
    assert "broken" in capsys.readouterr().err
    assert len(list(out.glob("*.txt"))) == 2


def test_transcribe_missing_checkpoint_is_config_error(tmp_path, sample_pages):
    rc = cli.main(["transcribe", str(sample_pages[0]), "--out", str(tmp_path),
                   "--layout-model", str(tmp_path / "nope.fpthd"),
                   "--ocr-model", str(tmp_path / "nope2.fpthd")])
    assert rc == 2


def test_transcribe_deterministic(tmp_path, sample_pages, quick_layout_ckpt,
                                  quick_ocr_ckpt):
    outs = []
    for run in range(2):
        out = tmp_path / f"out{run}"
        rc = cli.main(["transcribe", str(sample_pages[0]), "--out", str(out),
                       "--layout-model", str(quick_layout_ckpt),
                       "--ocr-model", str(quick_ocr_ckpt), "--workers", "1"])
        assert rc == 0
        outs.append(read_outputs(out, sample_pages[0].stem))
    assert outs[0] == outs[1]


def test_transcribe_parallel_matches_serial(tmp_path, sample_pages,
                                            quick_layout_ckpt, quick_ocr_ckpt):
    serial = tmp_path / "serial"
    parallel = tmp_path / "parallel"
    for out, workers in ((serial, "1"), (parallel, "2")):
        rc = cli.main(["transcribe", *map(str, sample_pages), "--out", str(out),
                       "--layout-model", str(quick_layout_ckpt),
                       "--ocr-model", str(quick_ocr_ckpt), "--workers", workers])
        assert rc == 0
    for page in sample_pages:
        assert read_outputs(serial, page.stem) == read_outputs(parallel, page.stem)


def test_stage_composition_matches_full_run(tmp_path, sample_pages,
                                            quick_layout_ckpt, quick_ocr_ckpt):
    """layout-only -> crop-only -> OCR from existing XML/crops produces the
    same crops and text as the single full run."""
    page = sample_pages[0]
    full = tmp_path / "full"
    rc = cli.main(["transcribe", str(page), "--out", str(full),
                   "--layout-model", str(quick_layout_ckpt),
                   "--ocr-model", str(quick_ocr_ckpt), "--workers", "1"])
    assert rc == 0

    staged = tmp_path / "staged"
    rc = cli.main(["layout", str(page), "--out", str(staged),
                   "--layout-model", str(quick_layout_ckpt), "--workers", "1"])
    assert rc == 0
    rc = cli.main(["crop", str(page), "--out", str(staged),
                   "--xml-dir", str(staged), "--workers", "1"])
    assert rc == 0
    rc = cli.main(["transcribe", str(page), "--out", str(staged),
                   "--run-layout-parser", "no", "--run-line-cropper", "no",
                   "--xml-dir", str(staged), "--crops-dir", str(staged / "crops"),
                   "--ocr-model", str(quick_ocr_ckpt), "--workers", "1"])
    assert rc == 0

    assert (staged / f"{page.stem}.txt").read_bytes() == \
           (full / f"{page.stem}.txt").read_bytes()
    full_crops = sorted((full / "crops").glob("*.png"))
    staged_crops = sorted((staged / "crops").glob("*.png"))
    assert [c.name for c in full_crops] == [c.name for c in staged_crops]
    for a, b in zip(full_crops, staged_crops):
        assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------------------
# train command


def write_line_tree(root, texts, scale=3):
    root.mkdir(parents=True, exist_ok=True)
    for i, text in enumerate(texts):
        img = synth.make_line_sample(text, scale=scale)
        raster.save_png(root / f"l{i:03d}.png", img.pixels)
        (root / f"l{i:03d}.txt").write_text(text, encoding="utf-8")


def test_train_command_smoke(tmp_path, capsys):
    write_line_tree(tmp_path / "train", ["ab", "noñ", "dego", "rs", "ba", "geo"])
    write_line_tree(tmp_path / "val", ["ab", "no"])
    ckpt = tmp_path / "model.fpthd"
    log = tmp_path / "metrics.csv"
    rc = cli.main(["train", "--train", str(tmp_path / "train"),
                   "--val", str(tmp_path / "val"), "--out", str(ckpt),
                   "--log", str(log), "--dim", "32", "--blocks", "1",
                   "--conv", "compact", "--image-size", "256x64",
                   "--train-batch", "2", "--val-batch", "2",
                   "--iterations", "4", "--val-interval", "2"])
    assert rc == 0
    assert ckpt.exists()
    rows = log.read_text().strip().split("\n")
    assert rows[0] == "iteration,train_loss,val_cer,val_wer,lr"
    assert len(rows) == 3  # two validation events


def test_train_command_zero_iterations_keeps_init(tmp_path):
    write_line_tree(tmp_path / "train", ["ab", "no"])
    ckpt = tmp_path / "model.fpthd"
    rc = cli.main(["train", "--train", str(tmp_path / "train"), "--out",
                   str(ckpt), "--dim", "32", "--blocks", "1", "--conv",
                   "compact", "--image-size", "256x64", "--iterations", "0",
                   "--seed", "3"])
    assert rc == 0
    loaded, _ = ocrnet.load_checkpoint(ckpt)
    manifest = load_manifest(tmp_path / "train")
    reference = init_ocr_model(manifest.charset, dim=32, blocks=1, heads=4,
                               input_height=64, input_width=256, projection=8,
                               conv_spec=compact_conv_spec(32), seed=3)
    for k in reference.params:
        np.testing.assert_array_equal(loaded.params[k],
                                      reference.params[k].astype(np.float32))


def test_train_command_val_charset_violation(tmp_path, capsys):
    write_line_tree(tmp_path / "train", ["ab", "ba"])
    write_line_tree(tmp_path / "val", ["añ"])  # ñ unseen in training
    rc = cli.main(["train", "--train", str(tmp_path / "train"),
                   "--val", str(tmp_path / "val"),
                   "--out", str(tmp_path / "m.fpthd"), "--iterations", "1"])
    assert rc == 2
    err = capsys.readouterr().err
    assert "ñ" in err and "l000" in err
