"""Command-line pipeline: layout -> crop -> OCR -> PAGE/Markdown/TXT.

Subcommands: ``transcribe`` (full pipeline), ``layout`` (layout-only XML),
``crop`` (crops from existing PAGE XML), ``train`` and ``evaluate``.
Flags mirror the INI configuration keys and override them; the env var
``FPTHD_CONFIG`` points at a default INI.  Exit codes: 0 success, 1 some
pages failed, 2 configuration or checkpoint errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import re
import sys
import unicodedata
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ctc, layout as layout_mod, metrics, ocrnet, raster, train as train_mod
from .formats import (LineImageRef, PipelineConfig, TranscribedPage, atomic_write,
                      emit_markdown, emit_page_xml, emit_txt, load_config,
                      parse_page_xml)
from .geometry import LineImage, rectify_and_crop

logger = logging.getLogger("scriptorium")

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".tif", ".tiff"}


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass
class DatasetManifest:
    entries: list[tuple[Path, str]]
    charset: ocrnet.Charset


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load (line image, text) pairs from a TSV file or a directory tree.

    TSV rows are ``relative_image_path<TAB>text`` (paths relative to the
    TSV's directory).  A directory is scanned recursively for images with
    a sibling ``.txt`` of the same stem.  Entries come back in
    lexicographic path order; every image must exist.
    """
    path = Path(path)
    entries: list[tuple[Path, str]] = []
    if path.is_file():
        root = path.parent
        for lineno, row in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not row.strip():
                continue
            if "\t" not in row:
                raise ValueError(f"{path}:{lineno}: expected 'image<TAB>text'")
            rel, text = row.split("\t", 1)
            img = root / rel
            if not img.is_file():
                raise ValueError(f"{path}:{lineno}: missing image {img}")
            entries.append((img, unicodedata.normalize("NFC", text)))
    elif path.is_dir():
        for img in sorted(path.rglob("*")):
            if img.suffix.lower() not in IMAGE_EXTS:
                continue
            txt = img.with_suffix(".txt")
            if not txt.is_file():
                raise ValueError(f"no transcript for {img}")
            text = txt.read_text(encoding="utf-8").rstrip("\n")
            entries.append((img, unicodedata.normalize("NFC", text)))
    else:
        raise ValueError(f"manifest path not found: {path}")
    entries.sort(key=lambda e: e[0].as_posix())
    charset = ocrnet.Charset.from_texts(text for _, text in entries)
    return DatasetManifest(entries, charset)


def sanitize_page_id(stem: str) -> str:
    out = re.sub(r"[^A-Za-z0-9_.\-]", "_", stem)
    if not out or not re.match(r"[A-Za-z_]", out[0]):
        out = "p_" + out
    return out


# ---------------------------------------------------------------------------
# per-page pipeline


def _decoder_config(cfg: PipelineConfig) -> layout_mod.LayoutDecoderConfig:
    lc = cfg.layout
    return layout_mod.LayoutDecoderConfig(
        detection_threshold=lc.detection_threshold,
        vertical_connection_range=lc.vertical_line_connection_range,
        line_end_weight=lc.line_end_weight,
        merge_lines=lc.merge_lines,
        smooth_predictions=lc.smooth_line_predictions,
        max_megapixels=lc.max_megapixels,
        detect_regions=lc.detect_regions,
        adjust_heights=lc.adjust_heights,
    )


def _canonical(page_layout) -> TranscribedPage:
    """Round-trip the layout through the PAGE emitter so that cropping from
    a freshly decoded layout and from a re-parsed XML file is identical."""
    page, _ = parse_page_xml(emit_page_xml(TranscribedPage(page_layout)))
    return page


def _line_confidence(logp: np.ndarray, valid_len: int) -> float:
    return float(np.exp(np.mean(np.max(logp[:valid_len], axis=1))))


def transcribe_page(image_path: Path, out_dir: Path, cfg: PipelineConfig,
                    layout_net, ocr_model, xml_dir: Path | None = None,
                    crops_dir: Path | None = None, keep_crops: bool = True) -> dict:
    """Run the configured stages on one page; returns a small report dict."""
    page_id = sanitize_page_id(image_path.stem)
    flags = cfg.flags
    image = raster.load_image(image_path) if (flags.run_layout_parser or
                                              flags.run_line_cropper) else None

    if flags.run_layout_parser:
        if layout_net is None:
            raise ValueError("layout stage requires a layout checkpoint")
        maps = layout_mod.predict_maps(image, layout_net,
                                       cfg.layout.max_megapixels, page_id)
        decoded = layout_mod.decode_baselines(maps, _decoder_config(cfg), page_id)
        page = _canonical(decoded)
    else:
        source = (xml_dir or out_dir) / f"{page_id}.xml"
        if not source.is_file():
            raise ValueError(f"no PAGE XML for {page_id} at {source}")
        page, _ = parse_page_xml(source.read_text(encoding="utf-8"))

    crop_root = crops_dir or (out_dir / "crops")
    crops: list[tuple[LineImage, str]] = []
    if flags.run_line_cropper:
        crop_root.mkdir(parents=True, exist_ok=True)
        for ri, li, _, line in page.layout.iter_lines():
            crop = rectify_and_crop(image, line,
                                    target_height=cfg.cropper.line_height,
                                    line_scale=cfg.cropper.line_scale,
                                    interp_order=cfg.cropper.interp)
            # snap to the 8-bit PNG grid so OCR sees identical pixels
            # whether crops are kept in memory or reloaded from disk
            quantized = np.floor(np.clip(crop.pixels, 0, 1) * 255.0 + 0.5) / 255.0
            crop = dataclasses.replace(crop, pixels=quantized.astype(np.float32),
                                       page_id=page_id,
                                       region_index=ri, line_index=li)
            crops.append((crop, line.id))
            if keep_crops:
                ref = LineImageRef(page_id, ri, li)
                raster.save_png(crop_root / ref.file_name, crop.pixels)
    elif flags.run_ocr:
        for ri, li, _, line in page.layout.iter_lines():
            ref = LineImageRef(page_id, ri, li)
            crop_path = crop_root / ref.file_name
            if not crop_path.is_file():
                raise ValueError(f"missing crop {crop_path}")
            crop = LineImage(raster.load_image(crop_path), line_id=line.id,
                             page_id=page_id, region_index=ri, line_index=li)
            crops.append((crop, line.id))

    texts: dict[str, str] = {}
    confs: dict[str, float] = {}
    if flags.run_ocr:
        if ocr_model is None:
            raise ValueError("OCR stage requires an OCR checkpoint")
        for crop, line_id in crops:
            logp, valid_len = ocrnet.forward_logits(crop, ocr_model, train_mode=False)
            labels = ctc.greedy_decode(logp, valid_len)
            texts[line_id] = ocr_model.charset.decode(labels)
            confs[line_id] = _line_confidence(logp, valid_len)

    page = TranscribedPage(page.layout, texts, confs)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write(out_dir / f"{page_id}.xml", emit_page_xml(page))
    atomic_write(out_dir / f"{page_id}.md", emit_markdown(page))
    atomic_write(out_dir / f"{page_id}.txt", emit_txt(page))
    return {"page_id": page_id, "lines": page.layout.line_count,
            "transcribed": len(texts)}


# worker-process state for page parallelism
_WORKER: dict = {}


def _init_worker(cfg, layout_path, ocr_path, xml_dir, crops_dir, keep_crops, out_dir):
    _WORKER["cfg"] = cfg
    _WORKER["layout"] = (layout_mod.load_checkpoint(layout_path)[0]
                         if layout_path else None)
    _WORKER["ocr"] = ocrnet.load_checkpoint(ocr_path)[0] if ocr_path else None
    _WORKER["xml_dir"] = xml_dir
    _WORKER["crops_dir"] = crops_dir
    _WORKER["keep_crops"] = keep_crops
    _WORKER["out_dir"] = out_dir


def _run_page(image_path: Path):
    return transcribe_page(image_path, _WORKER["out_dir"], _WORKER["cfg"],
                           _WORKER["layout"], _WORKER["ocr"],
                           _WORKER["xml_dir"], _WORKER["crops_dir"],
                           _WORKER["keep_crops"])


def _collect_pages(inputs: list[str]) -> list[Path]:
    pages: list[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            pages.extend(sorted(q for q in p.iterdir()
                                if q.suffix.lower() in IMAGE_EXTS))
        else:
            pages.append(p)
    return pages


# ---------------------------------------------------------------------------
# argument plumbing


def _yesno(value: str) -> bool:
    low = value.strip().lower()
    if low in ("yes", "true", "1", "on"):
        return True
    if low in ("no", "false", "0", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected yes/no, got {value!r}")


def _add_pipeline_flags(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("pipeline configuration (overrides the INI)")
    g.add_argument("--config", help="INI config path (default: $FPTHD_CONFIG)")
    g.add_argument("--run-layout-parser", type=_yesno, default=None)
    g.add_argument("--run-line-cropper", type=_yesno, default=None)
    g.add_argument("--run-ocr", type=_yesno, default=None)
    g.add_argument("--run-decoder", type=_yesno, default=None,
                   help="accepted for config compatibility; no decoder stage exists")
    g.add_argument("--detect-regions", type=_yesno, default=None)
    g.add_argument("--merge-lines", type=_yesno, default=None)
    g.add_argument("--adjust-heights", type=_yesno, default=None)
    g.add_argument("--smooth-line-predictions", type=_yesno, default=None)
    g.add_argument("--detection-threshold", type=float, default=None)
    g.add_argument("--line-end-weight", type=float, default=None)
    g.add_argument("--vertical-line-connection-range", type=int, default=None)
    g.add_argument("--max-megapixels", type=float, default=None)
    g.add_argument("--interp", type=int, default=None)
    g.add_argument("--line-scale", type=float, default=None)
    g.add_argument("--line-height", type=int, default=None)


_FLAG_TARGETS = {
    "run_layout_parser": ("flags", "run_layout_parser"),
    "run_line_cropper": ("flags", "run_line_cropper"),
    "run_ocr": ("flags", "run_ocr"),
    "run_decoder": ("flags", "run_decoder"),
    "detect_regions": ("layout", "detect_regions"),
    "merge_lines": ("layout", "merge_lines"),
    "adjust_heights": ("layout", "adjust_heights"),
    "smooth_line_predictions": ("layout", "smooth_line_predictions"),
    "detection_threshold": ("layout", "detection_threshold"),
    "line_end_weight": ("layout", "line_end_weight"),
    "vertical_line_connection_range": ("layout", "vertical_line_connection_range"),
    "max_megapixels": ("layout", "max_megapixels"),
    "interp": ("cropper", "interp"),
    "line_scale": ("cropper", "line_scale"),
    "line_height": ("cropper", "line_height"),
}


def _config_from_args(args) -> PipelineConfig:
    cfg, warnings = load_config(getattr(args, "config", None))
    for warning in warnings:
        logger.warning("config: %s", warning)
    for arg_name, (section, field) in _FLAG_TARGETS.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            setattr(getattr(cfg, section), field, value)
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_transcribe(args) -> int:
    try:
        cfg = _config_from_args(args)
        if getattr(args, "layout_only", False):
            cfg.flags.run_line_cropper = False
            cfg.flags.run_ocr = False
        if getattr(args, "crop_only", False):
            cfg.flags.run_layout_parser = False
            cfg.flags.run_ocr = False
            cfg.flags.run_line_cropper = True
        layout_path = args.layout_model or (cfg.layout.model_path or None)
        ocr_path = getattr(args, "ocr_model", None) or (cfg.ocr.model_path or None)
        if cfg.flags.run_layout_parser:
            if not layout_path or not Path(layout_path).is_file():
                raise ValueError(f"layout checkpoint not found: {layout_path}")
        else:
            layout_path = None
        if cfg.flags.run_ocr:
            if not ocr_path or not Path(ocr_path).is_file():
                raise ValueError(f"OCR checkpoint not found: {ocr_path}")
        else:
            ocr_path = None
        pages = _collect_pages(args.inputs)
        if not pages:
            raise ValueError("no input pages")
        out_dir = Path(args.out)
        xml_dir = Path(args.xml_dir) if getattr(args, "xml_dir", None) else None
        crops_dir = Path(args.crops_dir) if getattr(args, "crops_dir", None) else None
        keep_crops = not getattr(args, "no_keep_crops", False)
        workers = args.workers if args.workers else (os.cpu_count() or 1)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    failures: list[tuple[Path, str]] = []
    results = []
    if workers <= 1 or len(pages) <= 1:
        _init_worker(cfg, layout_path, ocr_path, xml_dir, crops_dir,
                     keep_crops, out_dir)
        for page in pages:
            try:
                results.append(_run_page(page))
            except Exception as exc:  # per-page isolation
                failures.append((page, str(exc)))
    else:
        with ProcessPoolExecutor(
                max_workers=workers, initializer=_init_worker,
                initargs=(cfg, layout_path, ocr_path, xml_dir, crops_dir,
                          keep_crops, out_dir)) as pool:
            futures = {pool.submit(_run_page, page): page for page in pages}
            for future, page in futures.items():
                try:
                    results.append(future.result())
                except Exception as exc:
                    failures.append((page, str(exc)))

    for r in sorted(results, key=lambda r: r["page_id"]):
        print(f"{r['page_id']}: {r['lines']} lines, {r['transcribed']} transcribed")
    for page, err in failures:
        print(f"failed: {page}: {err}", file=sys.stderr)
    return 1 if failures else 0


def cmd_train(args) -> int:
    try:
        cfg = _config_from_args(args)
        tc = cfg.training
        overrides = {
            "max_lr": args.max_lr, "train_batch": args.train_batch,
            "val_batch": args.val_batch, "weight_decay": args.weight_decay,
            "mask_ratio": args.mask_ratio, "attn_mask_ratio": args.attn_mask_ratio,
            "max_span": args.max_span, "projection": args.projection,
            "morph_max_kernel": args.morph_max_kernel,
            "morph_iterations": args.morph_iterations,
            "sample_prob": args.sample_prob, "alpha": args.alpha,
            "total_iterations": args.iterations, "sam_rho": args.sam_rho,
            "seed": args.seed,
        }
        for key, value in overrides.items():
            if value is not None:
                setattr(tc, key, value)
        if args.image_size:
            m = re.match(r"^(\d+)\s*[xX]\s*(\d+)$", args.image_size)
            if not m:
                raise ValueError(f"bad --image-size {args.image_size!r}")
            tc.image_width, tc.image_height = int(m.group(1)), int(m.group(2))

        train_manifest = load_manifest(args.train)
        val_manifest = load_manifest(args.val) if args.val else DatasetManifest([], ocrnet.Charset(()))
        extra = set(val_manifest.charset.chars) - set(train_manifest.charset.chars)
        if extra:
            paths = [str(p) for p, t in val_manifest.entries
                     if set(unicodedata.normalize("NFC", t)) & extra][:5]
            raise ValueError(
                f"validation characters missing from training charset: "
                f"{sorted(extra)!r} (in {', '.join(paths)})")

        resume_state = None
        if args.resume:
            model, raw_state = ocrnet.load_checkpoint(args.resume)
            if raw_state is None or "rng_state" not in raw_state:
                raise ValueError(f"{args.resume} has no resume state; "
                                 f"use the .last checkpoint")
            resume_state = train_mod.TrainState(
                iteration=raw_state["iteration"],
                best_cer=raw_state.get("best_cer", float("inf")),
                rng_state=raw_state["rng_state"])
        else:
            conv = (ocrnet.compact_conv_spec(args.dim)
                    if args.conv == "compact" else ocrnet.default_conv_spec(args.dim))
            model = ocrnet.init_ocr_model(
                train_manifest.charset, dim=args.dim, blocks=args.blocks,
                heads=args.heads, input_height=tc.image_height,
                input_width=tc.image_width, projection=tc.projection,
                conv_spec=conv, seed=tc.seed)

        cfg_train = train_mod.TrainConfig(**{
            f.name: getattr(tc, f.name) for f in dataclasses.fields(tc)
        }, val_interval=args.val_interval,
           rotation_aug=bool(args.rotation_aug))
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    def load_pairs(manifest):
        return [(raster.load_image(p), t) for p, t in manifest.entries]

    result = train_mod.train_loop(
        model, load_pairs(train_manifest), load_pairs(val_manifest), cfg_train,
        checkpoint_path=args.out, log_path=args.log, resume=resume_state)
    if result.log:
        last = result.log[-1]
        print(f"final: iteration {last['iteration']} "
              f"val_cer {last['val_cer']:.4f} val_wer {last['val_wer']:.4f}")
    print(f"checkpoint: {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    hyp_dir, ref_dir = Path(args.hyp), Path(args.ref)
    try:
        refs = {p.stem: p for p in sorted(ref_dir.glob("*.txt"))}
        hyps = {p.stem: p for p in sorted(hyp_dir.glob("*.txt"))}
        if not refs:
            raise ValueError(f"no reference .txt files in {ref_dir}")
        missing = sorted(set(refs) ^ set(hyps))
        if missing:
            raise ValueError(f"unpaired page stems: {', '.join(missing)}")
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    pairs = []
    ids = []
    for stem in sorted(refs):
        pairs.append((refs[stem].read_text(encoding="utf-8"),
                      hyps[stem].read_text(encoding="utf-8")))
        ids.append(stem)
    report = metrics.evaluate_pages(pairs, ids)
    print(report.summary())
    if args.out:
        atomic_write(args.out, report.to_csv())
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = argparse.ArgumentParser(
        prog="scriptorium",
        description="Full-page transcription of historical documents")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_io(p, ocr=True):
        p.add_argument("inputs", nargs="+", help="page images or directories")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--layout-model", help="layout checkpoint (FPTHD-L)")
        if ocr:
            p.add_argument("--ocr-model", help="OCR checkpoint (FPTHD-O)")
        p.add_argument("--xml-dir", help="existing PAGE XML dir (run_layout_parser=no)")
        p.add_argument("--crops-dir", help="line-crop directory override")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel page workers (0 = all cores)")
        p.add_argument("--no-keep-crops", action="store_true",
                       help="do not keep crops under <out>/crops")
        _add_pipeline_flags(p)

    p_tr = sub.add_parser("transcribe", help="full pipeline to XML/MD/TXT")
    add_io(p_tr)
    p_tr.set_defaults(func=cmd_transcribe, layout_only=False, crop_only=False)

    p_lay = sub.add_parser("layout", help="layout analysis only (PAGE XML)")
    add_io(p_lay, ocr=False)
    p_lay.set_defaults(func=cmd_transcribe, layout_only=True, crop_only=False,
                       ocr_model=None)

    p_crop = sub.add_parser("crop", help="crop line images from existing PAGE XML")
    add_io(p_crop, ocr=False)
    p_crop.set_defaults(func=cmd_transcribe, layout_only=False, crop_only=True,
                        ocr_model=None)

    p_train = sub.add_parser("train", help="train the OCR model")
    p_train.add_argument("--train", required=True, help="train manifest (TSV or dir)")
    p_train.add_argument("--val", help="validation manifest")
    p_train.add_argument("--out", required=True, help="output checkpoint path")
    p_train.add_argument("--log", help="metrics CSV path")
    p_train.add_argument("--resume", help="resume from a .last checkpoint")
    p_train.add_argument("--config")
    p_train.add_argument("--dim", type=int, default=128)
    p_train.add_argument("--blocks", type=int, default=4)
    p_train.add_argument("--heads", type=int, default=4)
    p_train.add_argument("--conv", choices=("default", "compact"), default="default")
    p_train.add_argument("--image-size", help="WxH, e.g. 512x64")
    p_train.add_argument("--projection", type=int, default=None)
    p_train.add_argument("--max-lr", type=float, default=None)
    p_train.add_argument("--train-batch", type=int, default=None)
    p_train.add_argument("--val-batch", type=int, default=None)
    p_train.add_argument("--weight-decay", type=float, default=None)
    p_train.add_argument("--mask-ratio", type=float, default=None)
    p_train.add_argument("--attn-mask-ratio", type=float, default=None)
    p_train.add_argument("--max-span", type=int, default=None)
    p_train.add_argument("--morph-max-kernel", type=int, default=None)
    p_train.add_argument("--morph-iterations", type=int, default=None)
    p_train.add_argument("--sample-prob", type=float, default=None)
    p_train.add_argument("--alpha", type=float, default=None)
    p_train.add_argument("--iterations", type=int, default=None)
    p_train.add_argument("--sam-rho", type=float, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--val-interval", type=int, default=None)
    p_train.add_argument("--rotation-aug", type=_yesno, default=False)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="CER/WER between TXT directories")
    p_eval.add_argument("--hyp", required=True, help="hypothesis TXT directory")
    p_eval.add_argument("--ref", required=True, help="reference TXT directory")
    p_eval.add_argument("--out", help="write per-page CSV report here")
    p_eval.set_defaults(func=cmd_evaluate)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
