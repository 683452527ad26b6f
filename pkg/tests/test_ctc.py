import math

import numpy as np
import pytest

from scriptorium import ctc


def random_logprobs(rng, T, C):
    logits = rng.normal(size=(T, C))
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def enumerate_paths_loss(logprobs, valid_len, labels):
    """Vectorized exhaustive path enumeration (independent oracle)."""
    T, C = logprobs.shape[0], logprobs.shape[1]
    T = valid_len
    paths = np.indices((C,) * T).reshape(T, -1).T        # (C^T, T)
    prev = np.concatenate([np.full((paths.shape[0], 1), -1), paths[:, :-1]], axis=1)
    keep = (paths != 0) & (paths != prev)
    counts = keep.sum(axis=1)
    L = len(labels)
    match = counts == L
    if L:
        pos = np.cumsum(keep, axis=1) - 1
        collapsed = np.zeros((paths.shape[0], L), dtype=paths.dtype)
        valid = keep & (pos < L)
        rows = np.nonzero(valid)[0]
        collapsed[rows, pos[valid]] = paths[valid]
        match &= (collapsed == np.asarray(labels)).all(axis=1)
    if not match.any():
        return math.inf
    lp = logprobs[np.arange(T)[None, :], paths[match]].sum(axis=1)
    m = lp.max()
    return float(-(m + np.log(np.exp(lp - m).sum())))


def test_single_frame_single_label():
    p = 0.3
    lp = np.log(np.array([[1 - p, p]]))
    assert ctc.ctc_loss(lp, 1, [1]) == pytest.approx(-math.log(p))


def test_uniform_two_frames():
    lp = np.log(np.full((2, 2), 0.5))
    assert ctc.ctc_loss(lp, 2, [1]) == pytest.approx(-math.log(0.75))


def test_empty_target_all_blank_path():
    rng = np.random.default_rng(0)
    lp = random_logprobs(rng, 5, 3)
    assert ctc.ctc_loss(lp, 5, []) == pytest.approx(-lp[:, 0].sum())


def test_brute_force_equivalence():
    rng = np.random.default_rng(1)
    for _ in range(200):
        T = int(rng.integers(1, 9))
        C = int(rng.integers(2, 4))
        L = int(rng.integers(0, 4))
        lp = random_logprobs(rng, T, C)
        labels = list(map(int, rng.integers(1, C, size=L)))
        mine = ctc.ctc_loss(lp, T, labels)
        oracle = enumerate_paths_loss(lp, T, labels)
        if math.isinf(oracle):
            assert math.isinf(mine)
        else:
            assert mine == pytest.approx(oracle, abs=1e-9)


def test_loss_nonnegative():
    rng = np.random.default_rng(2)
    for _ in range(50):
        lp = random_logprobs(rng, 6, 4)
        labels = list(map(int, rng.integers(1, 4, size=2)))
        assert ctc.ctc_loss(lp, 6, labels) >= 0.0


def test_infeasible_returns_inf_sentinel():
    lp = np.log(np.full((2, 3), 1 / 3))
    assert math.isinf(ctc.ctc_loss(lp, 2, [1, 1]))  # needs 3 frames
    with pytest.raises(ValueError):
        ctc.ctc_grad(lp, 2, [1, 1])


def test_appended_deterministic_blank_keeps_loss():
    rng = np.random.default_rng(3)
    lp = random_logprobs(rng, 4, 3)
    labels = [1, 2]
    base = ctc.ctc_loss(lp, 4, labels)
    blank_row = np.full((1, 3), ctc.NEG_INF)
    blank_row[0, 0] = 0.0  # log 1
    extended = np.concatenate([lp, blank_row])
    assert ctc.ctc_loss(extended, 5, labels) == pytest.approx(base, abs=1e-9)


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        lp = random_logprobs(rng, 6, 4)
        labels = list(map(int, rng.integers(1, 4, size=2)))
        if 6 < ctc.min_frames(labels):
            continue
        _, grad = ctc.ctc_loss_and_grad(lp, 6, labels)
        eps = 1e-6
        for t in range(6):
            for c in range(4):
                lp_p = lp.copy()
                lp_p[t, c] += eps
                lp_m = lp.copy()
                lp_m[t, c] -= eps
                fd = (ctc.ctc_loss(lp_p, 6, labels)
                      - ctc.ctc_loss(lp_m, 6, labels)) / (2 * eps)
                rel = abs(fd - grad[t, c]) / max(abs(fd), abs(grad[t, c]), 1e-6)
                worst = max(worst, rel)
    assert worst <= 1e-6


def test_grad_rows_sum_to_zero_at_logit_level():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(5, 4))
    lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    _, grad = ctc.ctc_loss_and_grad(lp, 5, [1, 2])
    # chain through log-softmax: g_logit = g - softmax * sum(g)
    g_logit = grad - np.exp(lp) * grad.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(g_logit.sum(axis=1), 0.0, atol=1e-12)


def test_zero_grad_at_one_hot_exact_path():
    # T=2, target [a, b]: the only path; one-hot rows -> loss 0, grad 0
    lp = np.full((2, 3), ctc.NEG_INF)
    lp[0, 1] = 0.0
    lp[1, 2] = 0.0
    loss, grad = ctc.ctc_loss_and_grad(lp, 2, [1, 2])
    assert loss == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(grad[:, 1:], [[-1, 0], [0, -1]], atol=1e-12)


def test_grad_zero_beyond_valid_len():
    rng = np.random.default_rng(6)
    lp = random_logprobs(rng, 6, 3)
    _, grad = ctc.ctc_loss_and_grad(lp, 4, [1])
    assert np.all(grad[4:] == 0)


def test_greedy_decode_collapse():
    lp = np.log(np.array([[.1, .8, .1], [.1, .8, .1], [.8, .1, .1],
                          [.1, .1, .8], [.1, .1, .8]]))
    assert ctc.greedy_decode(lp, 5) == [1, 2]


def test_greedy_decode_all_blank():
    lp = np.log(np.array([[.9, .05, .05]] * 4))
    assert ctc.greedy_decode(lp, 4) == []


def test_greedy_decode_blank_separates_repeats():
    lp = np.log(np.array([[.1, .8, .1], [.8, .1, .1], [.1, .8, .1]]))
    assert ctc.greedy_decode(lp, 3) == [1, 1]
    # oracle: collapse of the most probable path
    path = np.argmax(lp, axis=1)
    collapsed = []
    prev = -1
    for c in path:
        if c != prev and c != 0:
            collapsed.append(int(c))
        prev = c
    assert collapsed == [1, 1]


def test_greedy_decode_tie_smallest_index():
    lp = np.log(np.array([[1 / 3, 1 / 3, 1 / 3]]))
    assert ctc.greedy_decode(lp, 1) == []  # blank (index 0) wins the tie


def test_greedy_decode_respects_valid_len():
    lp = np.log(np.array([[.1, .8, .1], [.1, .1, .8]]))
    assert ctc.greedy_decode(lp, 1) == [1]


def test_validation_errors():
    bad = np.zeros((3, 3))  # rows not normalized
    with pytest.raises(ValueError, match="normalized"):
        ctc.ctc_loss(bad, 3, [1])
    lp = np.log(np.full((3, 3), 1 / 3))
    with pytest.raises(ValueError, match="label"):
        ctc.ctc_loss(lp, 3, [3])
    with pytest.raises(ValueError, match="label"):
        ctc.ctc_loss(lp, 3, [0])
    with pytest.raises(ValueError, match="valid_len"):
        ctc.ctc_loss(lp, 4, [1])
