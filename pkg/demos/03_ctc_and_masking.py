"""CTC and span masking, piece by piece.

Shows the exact CTC loss against brute-force path enumeration on a tiny
instance, greedy best-path decoding, and the span-mask statistics used to
regularize the recognizer (contiguous spans, learnable mask token).
"""

import itertools
import math

import numpy as np

from scriptorium import ctc
from scriptorium.ocrnet import sample_span_mask, sinusoidal_positions


def brute_force(logprobs, labels):
    T, C = logprobs.shape
    total = -math.inf
    for path in itertools.product(range(C), repeat=T):
        collapsed, prev = [], -1
        for c in path:
            if c != prev and c != 0:
                collapsed.append(c)
            prev = c
        if collapsed == list(labels):
            total = np.logaddexp(total, sum(logprobs[t, c]
                                            for t, c in enumerate(path)))
    return -total


def main():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 3))
    lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    labels = [1, 2]

    loss = ctc.ctc_loss(lp, 5, labels)
    print(f"forward-recursion loss: {loss:.10f}")
    print(f"enumeration loss:       {brute_force(lp, labels):.10f}")

    decoded = ctc.greedy_decode(lp, 5)
    print(f"greedy best-path decode: {decoded}")

    _, grad = ctc.ctc_loss_and_grad(lp, 5, labels)
    print(f"gradient row sums (each -1 over the valid range): "
          f"{grad.sum(axis=1).round(6)}")

    print("\nspan masking at T=64, ratio 0.4, max span 8:")
    mask = sample_span_mask(64, 0.4, 8, np.random.default_rng(7))
    print("".join("#" if b else "." for b in mask.masked))
    print(f"masked {mask.count}/64 positions in spans {mask.spans}")

    freq = np.zeros(64)
    for _ in range(2000):
        freq += sample_span_mask(64, 0.4, 8, rng).masked
    print(f"per-position frequency over 2000 draws: "
          f"[{freq.min() / 2000:.3f}, {freq.max() / 2000:.3f}]")

    pos = sinusoidal_positions(8, 6)
    print(f"\nsinusoidal positions, row norms (all D/2): "
          f"{(pos ** 2).sum(axis=1).round(6)}")


if __name__ == "__main__":
    main()
