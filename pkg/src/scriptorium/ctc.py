"""Connectionist Temporal Classification: exact loss, gradient, greedy decode.

The loss is the negative log probability of a label sequence under the
usual blank-interleaved forward recursion, computed in log space with
max-subtraction.  Class 0 is always the blank.  An infeasible target
(fewer frames than the minimum alignment needs) yields ``inf`` from
:func:`ctc_loss` rather than an exception so callers can skip corrupt
samples; :func:`ctc_grad` raises instead.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

NEG_INF = -1.0e30

__all__ = ["ctc_loss", "ctc_grad", "ctc_loss_and_grad", "greedy_decode",
           "min_frames"]


def min_frames(labels: Sequence[int]) -> int:
    """Minimum number of frames that can emit ``labels`` under CTC."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _validate(logprobs: np.ndarray, valid_len: int, labels: Sequence[int]) -> np.ndarray:
    lp = np.asarray(logprobs, dtype=np.float64)
    if lp.ndim != 2:
        raise ValueError("logprobs must be (T, C)")
    T, C = lp.shape
    if not 0 < valid_len <= T:
        raise ValueError(f"valid_len {valid_len} out of range for T={T}")
    rows = lp[:valid_len]
    norm = np.log(np.sum(np.exp(rows - rows.max(axis=1, keepdims=True)), axis=1)) \
        + rows.max(axis=1)
    if np.any(np.abs(norm) > 1e-4):
        raise ValueError("logprob rows are not normalized log-distributions")
    for lab in labels:
        if not 1 <= lab < C:
            raise ValueError(f"label {lab} out of range [1, {C})")
    return lp


def _extended(labels: Sequence[int]) -> np.ndarray:
    """Blank-interleaved target: [0, l1, 0, l2, ..., 0]."""
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = np.asarray(labels, dtype=np.int64)
    return ext


def _logaddexp3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    m = np.maximum(m, NEG_INF)
    return m + np.log(np.exp(a - m) + np.exp(b - m) + np.exp(c - m))


def _forward(lp: np.ndarray, valid_len: int, ext: np.ndarray):
    S = len(ext)
    can_skip = np.zeros(S, dtype=bool)
    can_skip[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])
    alphas = np.full((valid_len, S), NEG_INF)
    alphas[0, 0] = lp[0, ext[0]]
    if S > 1:
        alphas[0, 1] = lp[0, ext[1]]
    for t in range(1, valid_len):
        prev = alphas[t - 1]
        stay = prev
        step = np.full(S, NEG_INF)
        step[1:] = prev[:-1]
        skip = np.full(S, NEG_INF)
        skip[2:] = prev[:-2]
        skip = np.where(can_skip, skip, NEG_INF)
        alphas[t] = _logaddexp3(stay, step, skip) + lp[t, ext]
    return alphas, can_skip


def ctc_loss(logprobs: np.ndarray, valid_len: int, labels: Sequence[int]) -> float:
    """-log P(labels | logprobs[:valid_len]); ``inf`` for infeasible targets."""
    lp = _validate(logprobs, valid_len, labels)
    if valid_len < min_frames(labels):
        return math.inf
    ext = _extended(labels)
    alphas, _ = _forward(lp, valid_len, ext)
    tail = alphas[-1, -1] if len(ext) == 1 else np.logaddexp(alphas[-1, -1], alphas[-1, -2])
    return float(-tail)


def ctc_loss_and_grad(logprobs: np.ndarray, valid_len: int,
                      labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the log-probabilities.

    Gradient rows beyond ``valid_len`` are zero.  Uses the forward-backward
    posteriors: d(-log P)/d(logprob[t, k]) = -sum of occupation probability
    over extended-target states emitting class k at time t.
    """
    lp = _validate(logprobs, valid_len, labels)
    if valid_len < min_frames(labels):
        raise ValueError("infeasible target for valid_len")
    ext = _extended(labels)
    S = len(ext)
    alphas, can_skip = _forward(lp, valid_len, ext)
    tail = alphas[-1, -1] if S == 1 else np.logaddexp(alphas[-1, -1], alphas[-1, -2])
    loss = float(-tail)

    # betas exclude the emission at the current frame
    betas = np.full((valid_len, S), NEG_INF)
    betas[-1, -1] = 0.0
    if S > 1:
        betas[-1, -2] = 0.0
    for t in range(valid_len - 2, -1, -1):
        nxt = betas[t + 1] + lp[t + 1, ext]
        stay = nxt
        step = np.full(S, NEG_INF)
        step[:-1] = nxt[1:]
        skip = np.full(S, NEG_INF)
        if S > 2:
            skip[:-2] = np.where(can_skip[2:], nxt[2:], NEG_INF)
        betas[t] = _logaddexp3(stay, step, skip)

    gamma = alphas + betas - tail            # log posterior per (t, state)
    grad = np.zeros_like(lp)
    occ = np.exp(np.maximum(gamma, NEG_INF))
    for s in range(S):
        grad[:valid_len, ext[s]] -= occ[:, s]
    return loss, grad


def ctc_grad(logprobs: np.ndarray, valid_len: int, labels: Sequence[int]) -> np.ndarray:
    return ctc_loss_and_grad(logprobs, valid_len, labels)[1]


def greedy_decode(logprobs: np.ndarray, valid_len: int) -> list[int]:
    """Best-path decoding: per-frame argmax, collapse repeats, drop blanks.

    Ties resolve to the smallest class index.
    """
    lp = np.asarray(logprobs)
    path = np.argmax(lp[:valid_len], axis=1)
    out: list[int] = []
    prev = -1
    for c in path:
        c = int(c)
        if c != prev and c != 0:
            out.append(c)
        prev = c
    return out
