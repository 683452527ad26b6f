"""Character and word error rates over edit distance, with corpus reports.

Comparison is canonical: both sides are NFC-normalized first, so a
combining tilde and its precomposed codepoint compare equal.  Corpus
rates are micro-averages (edit sum over reference-length sum), not means
of per-line rates.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = ["edit_distance", "cer", "wer", "EvalReport", "evaluate_pages"]


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs.

    Strings are NFC-normalized and compared by unicode scalar; other
    sequences are compared element-wise.
    """
    if isinstance(a, str):
        a = unicodedata.normalize("NFC", a)
    if isinstance(b, str):
        b = unicodedata.normalize("NFC", b)
    if len(a) < len(b):
        a, b = b, a
    n = len(b)
    if n == 0:
        return len(a)
    offsets = np.arange(n + 1, dtype=np.int64)
    prev = offsets.copy()
    row = np.empty(n + 1, dtype=np.int64)
    for i, ca in enumerate(a, start=1):
        row[0] = i
        neq = np.fromiter((cb != ca for cb in b), count=n, dtype=np.int64)
        np.minimum(prev[:-1] + neq, prev[1:] + 1, out=row[1:])
        # fold insertions in via prefix-min over (value - index):
        # row[j] = min_{k<=j} (row_nolook[k] + (j - k))
        shifted = row - offsets
        np.minimum.accumulate(shifted, out=shifted)
        prev = shifted + offsets
    return int(prev[-1])


def cer(ref: str, hyp: str) -> float:
    """Character error rate: char edit distance / len(ref), NFC-normalized."""
    ref_n = unicodedata.normalize("NFC", ref)
    hyp_n = unicodedata.normalize("NFC", hyp)
    return edit_distance(ref_n, hyp_n) / max(len(ref_n), 1)


def wer(ref: str, hyp: str) -> float:
    """Word error rate; words split on runs of whitespace."""
    ref_w = unicodedata.normalize("NFC", ref).split()
    hyp_w = unicodedata.normalize("NFC", hyp).split()
    return edit_distance(ref_w, hyp_w) / max(len(ref_w), 1)


@dataclass
class EvalReport:
    cer: float
    wer: float
    total_char_edits: int
    total_chars: int
    total_word_edits: int
    total_words: int
    per_line: list[tuple[str, float, float]] = field(default_factory=list)
    empty_references: list[str] = field(default_factory=list)

    def summary(self) -> str:
        lines = [
            f"pages: {len(self.per_line)}",
            f"CER: {self.cer:.4%} ({self.total_char_edits}/{self.total_chars})",
            f"WER: {self.wer:.4%} ({self.total_word_edits}/{self.total_words})",
        ]
        if self.empty_references:
            lines.append(f"empty references: {', '.join(self.empty_references)}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        rows = ["id,cer,wer"]
        rows += [f"{pid},{c:.6f},{w:.6f}" for pid, c, w in self.per_line]
        rows.append(f"TOTAL,{self.cer:.6f},{self.wer:.6f}")
        return "\n".join(rows) + "\n"


def _normalize_page(text: str) -> str:
    lines = [ln.rstrip() for ln in unicodedata.normalize("NFC", text).split("\n")]
    while lines and lines[-1] == "":
        lines.pop()
    return "\n".join(lines)


def evaluate_pages(pairs: Sequence[tuple[str, str]],
                   ids: Sequence[str] | None = None) -> EvalReport:
    """Micro-averaged corpus CER/WER over (reference, hypothesis) page texts.

    Page text is compared after trimming trailing whitespace per line and
    joining with single newlines.  Pages with an empty reference are
    flagged in the report and counted with a denominator of 1.
    """
    if ids is not None and len(ids) != len(pairs):
        raise ValueError("ids and pairs must align")
    if ids is None:
        ids = [f"page{i:03d}" for i in range(len(pairs))]
    ce = ch = we = wo = 0
    per_line = []
    empties = []
    for pid, (ref, hyp) in zip(ids, pairs):
        ref_n = _normalize_page(ref)
        hyp_n = _normalize_page(hyp)
        d_c = edit_distance(ref_n, hyp_n)
        d_w = edit_distance(ref_n.split(), hyp_n.split())
        if not ref_n:
            empties.append(pid)
        ce += d_c
        ch += len(ref_n)
        we += d_w
        wo += len(ref_n.split())
        per_line.append((pid, d_c / max(len(ref_n), 1), d_w / max(len(ref_n.split()), 1)))
    return EvalReport(
        cer=ce / max(ch, 1), wer=we / max(wo, 1),
        total_char_edits=ce, total_chars=ch,
        total_word_edits=we, total_words=wo,
        per_line=per_line, empty_references=empties,
    )
