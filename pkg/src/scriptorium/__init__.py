"""Full-page transcription of historical documents.

Stages: layout analysis (probability maps -> text-line geometry), baseline
rectification and cropping, span-masked transformer recognition trained
with CTC and SAM, and PAGE XML / Markdown / TXT emission with a CER/WER
evaluation harness.
"""

from . import ctc, formats, geometry, layout, metrics, ocrnet, raster, synth, train
from .formats import TranscribedPage, emit_markdown, emit_page_xml, emit_txt, parse_page_xml
from .geometry import (Baseline, LineImage, PageLayout, Point, Region,
                       TextLineGeom, polygon_from_baseline, rectify_and_crop,
                       sort_reading_order)
from .metrics import cer, edit_distance, evaluate_pages, wer
from .ocrnet import Charset, OcrModel, forward_logits, init_ocr_model

__version__ = "0.1.0"

__all__ = [
    "ctc", "formats", "geometry", "layout", "metrics", "ocrnet", "raster",
    "synth", "train",
    "Baseline", "Charset", "LineImage", "OcrModel", "PageLayout", "Point",
    "Region", "TextLineGeom", "TranscribedPage",
    "cer", "edit_distance", "emit_markdown", "emit_page_xml", "emit_txt",
    "evaluate_pages", "forward_logits", "init_ocr_model", "parse_page_xml",
    "polygon_from_baseline", "rectify_and_crop", "sort_reading_order", "wer",
    "__version__",
]
