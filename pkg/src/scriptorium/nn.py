"""Minimal numpy neural-network layers with explicit backward passes.

Everything here is a pure function: forward passes return the output plus
a cache tuple, and the matching ``*_backward`` consumes the cache.
Parameters live in flat ``dict[str, np.ndarray]`` trees; gradients use
the same keys.  Convolutions use 'same' padding with odd kernels and are
implemented as one BLAS contraction per kernel tap, which is fast enough
for the desk-scale models in this package.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

Params = dict[str, np.ndarray]

# ---------------------------------------------------------------------------
# parameter-tree helpers


def tree_copy(p: Params) -> Params:
    return {k: v.copy() for k, v in p.items()}


def tree_add_scaled(p: Params, g: Params, scale: float) -> Params:
    """p + scale * g, elementwise over matching keys."""
    return {k: p[k] + scale * g[k] for k in p}

def tree_zeros_like(p: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in p.items()}


def global_norm(g: Params) -> float:
    sq = 0.0
    for v in g.values():
        sq += float(np.sum(np.square(v, dtype=np.float64)))
    return math.sqrt(sq)


def all_finite(g: Params) -> bool:
    return all(np.all(np.isfinite(v)) for v in g.values())


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
           stride: tuple[int, int]):
    """Strided 2-D convolution, 'same' padding, odd kernel.

    x: (B, C, H, W), w: (O, C, kh, kw) -> y: (B, O, ceil(H/sv), ceil(W/sh))
    """
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    sv, sh = stride
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    Ho, Wo = -(-H // sv), -(-W // sh)
    acc = np.zeros((O, B, Ho, Wo), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            xs = xp[:, :, ki:ki + sv * Ho:sv, kj:kj + sh * Wo:sh]
            acc += np.tensordot(w[:, :, ki, kj], xs, axes=([1], [1]))
    y = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
    if b is not None:
        y += b[None, :, None, None]
    cache = (xp, x.shape, w.shape, stride)
    return y, cache


def conv2d_backward(dy: np.ndarray, cache, w: np.ndarray):
    xp, xshape, wshape, stride = cache
    B, C, H, W = xshape
    O, _, kh, kw = wshape
    sv, sh = stride
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    Ho, Wo = dy.shape[2], dy.shape[3]
    dxp = np.zeros_like(xp)
    dw = np.zeros(wshape, dtype=dy.dtype)
    for ki in range(kh):
        for kj in range(kw):
            xs = xp[:, :, ki:ki + sv * Ho:sv, kj:kj + sh * Wo:sh]
            dw[:, :, ki, kj] = np.tensordot(dy, xs, axes=([0, 2, 3], [0, 2, 3]))
            dxs = np.tensordot(w[:, :, ki, kj], dy, axes=([0], [1]))
            dxp[:, :, ki:ki + sv * Ho:sv, kj:kj + sh * Wo:sh] += dxs.transpose(1, 0, 2, 3)
    db = dy.sum(axis=(0, 2, 3))
    dx = dxp[:, :, ph:ph + H, pw:pw + W]
    return np.ascontiguousarray(dx), dw, db


def upsample2x(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x spatial upsampling of (B, C, H, W)."""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_backward(dy: np.ndarray) -> np.ndarray:
    B, C, H, W = dy.shape
    return dy.reshape(B, C, H // 2, 2, W // 2, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# pointwise activations


def relu(x):
    return np.maximum(x, 0), x


def relu_backward(dy, cache):
    return np.where(cache > 0, dy, 0)


def gelu(x):
    phi = 0.5 * (1.0 + special.erf(x / math.sqrt(2.0)))
    return x * phi, (x, phi)


def gelu_backward(dy, cache):
    x, phi = cache
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return dy * (phi + x * pdf)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


# ---------------------------------------------------------------------------
# linear / layernorm / softmax


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x: (..., Din) @ w: (Din, Dout) + b."""
    y = x @ w + b
    return y, (x, w)


def linear_backward(dy: np.ndarray, cache):
    x, w = cache
    dx = dy @ w.T
    dw = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dw, db


def layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    return g * xh + b, (xh, inv, g)


def layernorm_backward(dy: np.ndarray, cache):
    xh, inv, g = cache
    dg = np.sum(dy * xh, axis=tuple(range(dy.ndim - 1)))
    db = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxh = dy * g
    m1 = dxh.mean(axis=-1, keepdims=True)
    m2 = np.mean(dxh * xh, axis=-1, keepdims=True)
    dx = inv * (dxh - m1 - xh * m2)
    return dx, dg, db


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dy: np.ndarray, p: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (dy - np.sum(dy * p, axis=axis, keepdims=True))


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def log_softmax_backward(dy: np.ndarray, logp: np.ndarray) -> np.ndarray:
    return dy - np.exp(logp) * dy.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# transformer encoder block (pre-norm, MHSA + GELU feed-forward)


def encoder_block(x: np.ndarray, p: Params, prefix: str, heads: int,
                  hidden_keys: np.ndarray | None = None):
    """One pre-norm transformer block on (B, T, D).

    ``hidden_keys`` is an optional index array of key positions whose
    attention logits are forced to -inf for every query (training-time
    attention masking); their attention weight is exactly zero.
    """
    B, T, D = x.shape
    dh = D // heads

    h1, ln1c = layernorm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    q, qc = linear(h1, p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.bq"])
    k, kc = linear(h1, p[f"{prefix}.attn.wk"], p[f"{prefix}.attn.bk"])
    v, vc = linear(h1, p[f"{prefix}.attn.wv"], p[f"{prefix}.attn.bv"])

    def split(a):
        return a.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q), split(k), split(v)
    logits = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(dh)
    if hidden_keys is not None and len(hidden_keys):
        logits[:, :, :, hidden_keys] = -np.inf
    attn = softmax(logits, axis=-1)
    ctx = attn @ vh
    ctx_m = ctx.transpose(0, 2, 1, 3).reshape(B, T, D)
    att_out, oc = linear(ctx_m, p[f"{prefix}.attn.wo"], p[f"{prefix}.attn.bo"])
    y1 = x + att_out

    h2, ln2c = layernorm(y1, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    f1, f1c = linear(h2, p[f"{prefix}.ff.w1"], p[f"{prefix}.ff.b1"])
    f2, gc = gelu(f1)
    f3, f3c = linear(f2, p[f"{prefix}.ff.w2"], p[f"{prefix}.ff.b2"])
    out = y1 + f3

    cache = (ln1c, qc, kc, vc, qh, kh, vh, attn, oc, ln2c, f1c, gc, f3c,
             (B, T, D, heads, dh))
    return out, cache


def encoder_block_backward(dout: np.ndarray, cache, p: Params, prefix: str,
                           grads: Params):
    (ln1c, qc, kc, vc, qh, kh, vh, attn, oc, ln2c, f1c, gc, f3c, dims) = cache
    B, T, D, heads, dh = dims

    df2, dw2, db2 = linear_backward(dout, f3c)
    grads[f"{prefix}.ff.w2"] = dw2
    grads[f"{prefix}.ff.b2"] = db2
    df1 = gelu_backward(df2, gc)
    dh2, dw1, db1 = linear_backward(df1, f1c)
    grads[f"{prefix}.ff.w1"] = dw1
    grads[f"{prefix}.ff.b1"] = db1
    dy1_ln, dg2, dbeta2 = layernorm_backward(dh2, ln2c)
    grads[f"{prefix}.ln2.g"] = dg2
    grads[f"{prefix}.ln2.b"] = dbeta2
    dy1 = dout + dy1_ln

    dctx_m, dwo, dbo = linear_backward(dy1, oc)
    grads[f"{prefix}.attn.wo"] = dwo
    grads[f"{prefix}.attn.bo"] = dbo
    dctx = dctx_m.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)
    dattn = dctx @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ dctx
    dlogits = softmax_backward(dattn, attn)
    dqh = dlogits @ kh / math.sqrt(dh)
    dkh = dlogits.transpose(0, 1, 3, 2) @ qh / math.sqrt(dh)

    def merge(a):
        return a.transpose(0, 2, 1, 3).reshape(B, T, D)

    dh1_q, dwq, dbq = linear_backward(merge(dqh), qc)
    dh1_k, dwk, dbk = linear_backward(merge(dkh), kc)
    dh1_v, dwv, dbv = linear_backward(merge(dvh), vc)
    grads[f"{prefix}.attn.wq"] = dwq
    grads[f"{prefix}.attn.bq"] = dbq
    grads[f"{prefix}.attn.wk"] = dwk
    grads[f"{prefix}.attn.bk"] = dbk
    grads[f"{prefix}.attn.wv"] = dwv
    grads[f"{prefix}.attn.bv"] = dbv
    dx_ln, dg1, dbeta1 = layernorm_backward(dh1_q + dh1_k + dh1_v, ln1c)
    grads[f"{prefix}.ln1.g"] = dg1
    grads[f"{prefix}.ln1.b"] = dbeta1
    return dy1 + dx_ln


# ---------------------------------------------------------------------------
# weight init


def he_conv(rng: np.random.Generator, o: int, c: int, k: int, dtype) -> np.ndarray:
    std = math.sqrt(2.0 / (c * k * k))
    return (rng.standard_normal((o, c, k, k)) * std).astype(dtype)


def xavier(rng: np.random.Generator, din: int, dout: int, dtype) -> np.ndarray:
    std = math.sqrt(2.0 / (din + dout))
    return (rng.standard_normal((din, dout)) * std).astype(dtype)
