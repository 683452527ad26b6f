"""Line recognition network.

A convolutional extractor collapses a 512x64 line image into a sequence
of 64 feature tokens (8 horizontal pixels per token), which a pre-norm
transformer encoder refines and a per-token affine head maps to character
logits.  There is no class token; positions are fixed sinusoids.  During
training, contiguous token spans are replaced by a learnable mask token
and each encoder block hides a random subset of key positions; both are
regularizers only and are disabled at inference.
"""

from __future__ import annotations

import io
import math
import os
import unicodedata
from dataclasses import dataclass, field

import numpy as np

from . import _binio, nn, raster
from .geometry import LineImage

OCR_MAGIC = b"FPTHD-O"
CHECKPOINT_VERSION = 1

__all__ = [
    "Charset", "ConvLayerSpec", "OcrModel", "SpanMask",
    "default_conv_spec", "compact_conv_spec", "init_ocr_model",
    "extract_tokens", "sinusoidal_positions", "sample_span_mask",
    "apply_mask", "encode", "forward_logits",
    "save_checkpoint", "load_checkpoint",
]


@dataclass(frozen=True)
class Charset:
    """Ordered recognizer alphabet; class 0 is reserved for the CTC blank."""

    chars: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars):
            raise ValueError("duplicate characters in charset")
        for ch in self.chars:
            if len(ch) != 1:
                raise ValueError(f"charset entries must be single characters, got {ch!r}")

    @classmethod
    def from_texts(cls, texts) -> "Charset":
        seen = set()
        for text in texts:
            seen.update(unicodedata.normalize("NFC", text))
        return cls(tuple(sorted(seen)))

    @property
    def blank_index(self) -> int:
        return 0

    @property
    def num_classes(self) -> int:
        return len(self.chars) + 1

    def encode(self, text: str) -> list[int]:
        text = unicodedata.normalize("NFC", text)
        missing = sorted(set(text) - set(self.chars))
        if missing:
            raise KeyError(f"characters not in charset: {missing!r}")
        index = {c: i + 1 for i, c in enumerate(self.chars)}
        return [index[c] for c in text]

    def decode(self, labels) -> str:
        return "".join(self.chars[i - 1] for i in labels)


@dataclass(frozen=True)
class ConvLayerSpec:
    out_channels: int
    kernel: int
    stride_v: int
    stride_h: int
    residual: bool = True


def default_conv_spec(dim: int) -> tuple[ConvLayerSpec, ...]:
    """Six-layer residual stack for 64-high input: stride 64 vertical, 8 horizontal."""
    return (
        ConvLayerSpec(16, 3, 2, 2),
        ConvLayerSpec(32, 3, 2, 2),
        ConvLayerSpec(64, 3, 2, 2),
        ConvLayerSpec(64, 3, 2, 1),
        ConvLayerSpec(dim, 3, 2, 1),
        ConvLayerSpec(dim, 3, 2, 1),
    )


def compact_conv_spec(dim: int) -> tuple[ConvLayerSpec, ...]:
    """Shallower 4-layer stack with the same token geometry; trains faster on CPU."""
    return (
        ConvLayerSpec(16, 5, 4, 2),
        ConvLayerSpec(32, 5, 4, 2),
        ConvLayerSpec(64, 3, 2, 2),
        ConvLayerSpec(dim, 3, 2, 1),
    )


@dataclass
class OcrModel:
    charset: Charset
    params: nn.Params
    conv_spec: tuple[ConvLayerSpec, ...]
    dim: int
    blocks: int
    heads: int
    input_height: int = 64
    input_width: int = 512
    projection: int = 8
    dtype: type = np.float32

    @property
    def tokens(self) -> int:
        return self.input_width // self.projection

    @property
    def num_classes(self) -> int:
        return self.charset.num_classes


def _check_geometry(conv_spec, input_height, input_width, projection, dim):
    h, w = input_height, input_width
    sh_total = 1
    for spec in conv_spec:
        h = -(-h // spec.stride_v)
        w = -(-w // spec.stride_h)
        sh_total *= spec.stride_h
    if h != 1:
        raise ValueError(f"conv stack must collapse height to 1, got {h}")
    if sh_total != projection:
        raise ValueError(f"horizontal stride {sh_total} != projection {projection}")
    if input_width % projection != 0:
        raise ValueError("input width must be a multiple of the projection stride")
    if conv_spec[-1].out_channels != dim:
        raise ValueError("final conv channels must equal the token dimension")


def init_ocr_model(charset: Charset, dim: int = 128, blocks: int = 4, heads: int = 4,
                   input_height: int = 64, input_width: int = 512,
                   projection: int = 8, conv_spec=None, seed: int = 0,
                   dtype=np.float32) -> OcrModel:
    if dim % heads != 0:
        raise ValueError("dim must be divisible by heads")
    if conv_spec is None:
        conv_spec = default_conv_spec(dim)
    conv_spec = tuple(conv_spec)
    _check_geometry(conv_spec, input_height, input_width, projection, dim)
    rng = np.random.default_rng(seed)
    p: nn.Params = {}
    cin = 1
    for i, spec in enumerate(conv_spec):
        p[f"conv{i}.w"] = nn.he_conv(rng, spec.out_channels, cin, spec.kernel, dtype)
        p[f"conv{i}.b"] = np.zeros(spec.out_channels, dtype=dtype)
        if spec.residual:
            p[f"conv{i}.pw"] = nn.he_conv(rng, spec.out_channels, cin, 1, dtype)
        cin = spec.out_channels
    p["mask_token"] = (rng.standard_normal(dim) * 0.02).astype(dtype)
    for bi in range(blocks):
        pre = f"enc{bi}"
        p[f"{pre}.ln1.g"] = np.ones(dim, dtype=dtype)
        p[f"{pre}.ln1.b"] = np.zeros(dim, dtype=dtype)
        for nm in ("wq", "wk", "wv", "wo"):
            p[f"{pre}.attn.{nm}"] = nn.xavier(rng, dim, dim, dtype)
        for nm in ("bq", "bk", "bv", "bo"):
            p[f"{pre}.attn.{nm}"] = np.zeros(dim, dtype=dtype)
        p[f"{pre}.ln2.g"] = np.ones(dim, dtype=dtype)
        p[f"{pre}.ln2.b"] = np.zeros(dim, dtype=dtype)
        p[f"{pre}.ff.w1"] = nn.xavier(rng, dim, 4 * dim, dtype)
        p[f"{pre}.ff.b1"] = np.zeros(4 * dim, dtype=dtype)
        p[f"{pre}.ff.w2"] = nn.xavier(rng, 4 * dim, dim, dtype)
        p[f"{pre}.ff.b2"] = np.zeros(dim, dtype=dtype)
    p["head.w"] = nn.xavier(rng, dim, charset.num_classes, dtype)
    p["head.b"] = np.zeros(charset.num_classes, dtype=dtype)
    return OcrModel(charset, p, conv_spec, dim, blocks, heads,
                    input_height, input_width, projection, dtype)


# ---------------------------------------------------------------------------
# input preparation


def _prepare_line(pixels, model: OcrModel) -> tuple[np.ndarray, int]:
    """Resize a line crop to the model input plane.

    Height is scaled to ``input_height`` preserving aspect; wider inputs
    are squeezed to ``input_width``, narrower ones right-padded with the
    image background after per-image standardization.  Returns the
    (H, W) plane and the un-padded valid width.
    """
    img = raster.to_gray01(pixels)
    if img.size == 0:
        raise ValueError("empty line image")
    h, w = model.input_height, model.input_width
    h0, w0 = img.shape
    new_w = max(1, int(round(w0 * h / h0)))
    resized = raster.resize(img, h, min(new_w, w), order=1)
    valid_w = resized.shape[1]
    m = float(resized.mean())
    s = float(resized.std())
    norm = (resized - m) / (s + 1e-6)
    if valid_w < w:
        bgn = (raster.median_border(img) - m) / (s + 1e-6)
        canvas = np.full((h, w), bgn, dtype=np.float64)
        canvas[:, :valid_w] = norm
    else:
        canvas = norm
    return canvas.astype(model.dtype), valid_w


def _valid_tokens(valid_w: int, model: OcrModel) -> int:
    return max(1, -(-valid_w // model.projection))


# ---------------------------------------------------------------------------
# conv extractor


def _conv_layer_forward(x, p: nn.Params, i: int, spec: ConvLayerSpec):
    stride = (spec.stride_v, spec.stride_h)
    y, c_main = nn.conv2d(x, p[f"conv{i}.w"], p[f"conv{i}.b"], stride)
    shortcut_cache = None
    identity = False
    if f"conv{i}.pw" in p:
        sc, shortcut_cache = nn.conv2d(x, p[f"conv{i}.pw"], None, stride)
        y = y + sc
    elif spec.residual and stride == (1, 1) and x.shape[1] == y.shape[1]:
        y = y + x
        identity = True
    out, rc = nn.relu(y)
    return out, (c_main, shortcut_cache, identity, rc)


def _conv_layer_backward(dy, cache, p: nn.Params, i: int, grads: nn.Params):
    c_main, shortcut_cache, identity, rc = cache
    dz = nn.relu_backward(dy, rc)
    dx, dw, db = nn.conv2d_backward(dz, c_main, p[f"conv{i}.w"])
    grads[f"conv{i}.w"] = dw
    grads[f"conv{i}.b"] = db
    if shortcut_cache is not None:
        dx2, dpw, _ = nn.conv2d_backward(dz, shortcut_cache, p[f"conv{i}.pw"])
        grads[f"conv{i}.pw"] = dpw
        dx = dx + dx2
    elif identity:
        dx = dx + dz
    return dx


def _extract_batch(xb: np.ndarray, model: OcrModel, want_cache: bool):
    h = xb
    caches = []
    for i, spec in enumerate(model.conv_spec):
        h, c = _conv_layer_forward(h, model.params, i, spec)
        caches.append(c if want_cache else None)
    # no class token: the token count is exactly width / stride
    if h.shape[2] != 1 or h.shape[3] != -(-xb.shape[3] // model.projection):
        raise AssertionError(f"unexpected feature-map shape {h.shape}")
    tokens = np.ascontiguousarray(h[:, :, 0, :].transpose(0, 2, 1))
    return tokens, caches


def extract_tokens(line, model: OcrModel) -> tuple[np.ndarray, int]:
    """Token sequence (T, D) for one line image plus the valid token count.

    Width shorter than the input plane is right-padded with background
    before extraction; the valid count is ceil(valid_width / projection).
    """
    pixels = line.pixels if isinstance(line, LineImage) else line
    x, valid_w = _prepare_line(pixels, model)
    tokens, _ = _extract_batch(x[None, None], model, want_cache=False)
    return tokens[0], _valid_tokens(valid_w, model)


# ---------------------------------------------------------------------------
# positions, span masking


def sinusoidal_positions(T: int, D: int) -> np.ndarray:
    """Fixed sin/cos position matrix: (t, 2i) -> sin(t / 10000^(2i/D))."""
    if D % 2 != 0:
        raise ValueError("position dimension must be even")
    t = np.arange(T, dtype=np.float64)[:, None]
    i = np.arange(D // 2, dtype=np.float64)[None, :]
    ang = t / np.power(10000.0, 2.0 * i / D)
    pos = np.empty((T, D), dtype=np.float64)
    pos[:, 0::2] = np.sin(ang)
    pos[:, 1::2] = np.cos(ang)
    return pos


@dataclass(frozen=True)
class SpanMask:
    """Boolean token mask whose set bits form disjoint contiguous spans."""

    masked: np.ndarray
    spans: tuple[tuple[int, int], ...]

    @property
    def count(self) -> int:
        return int(self.masked.sum())


def _runs(masked: np.ndarray) -> tuple[tuple[int, int], ...]:
    spans = []
    i = 0
    T = len(masked)
    while i < T:
        if masked[i]:
            j = i
            while j < T and masked[j]:
                j += 1
            spans.append((i, j - i))
            i = j
        else:
            i += 1
    return tuple(spans)


def sample_span_mask(T: int, mask_ratio: float, max_span: int,
                     rng: np.random.Generator, attempt_cap: int = 1000) -> SpanMask:
    """Sample disjoint contiguous spans totalling round(mask_ratio * T) bits.

    Spans are placed uniformly on the circle (a span crossing the end
    wraps and splits into two pieces) and must keep one unmasked token of
    separation, so maximal runs never exceed ``max_span``; the last span
    is truncated to hit the target count exactly.  After ``attempt_cap``
    rejected draws, remaining bits fill the largest free gaps
    deterministically.
    """
    if not 0 <= mask_ratio < 1:
        raise ValueError("mask_ratio must be in [0, 1)")
    if max_span < 1:
        raise ValueError("max_span must be >= 1")
    if T < 1:
        raise ValueError("T must be >= 1")
    target = int(round(mask_ratio * T))
    if target > T:
        raise ValueError("infeasible mask target")
    masked = np.zeros(T, dtype=bool)
    count = 0
    attempts = 0
    while count < target:
        if attempts >= attempt_cap:
            best_start, best_run = None, 0
            i = 0
            while i < T:
                if not masked[i]:
                    j = i
                    while j < T and not masked[j]:
                        j += 1
                    lo = i + (1 if i > 0 else 0)
                    hi = j - (1 if j < T else 0)
                    if hi - lo > best_run:
                        best_run, best_start = hi - lo, lo
                    i = j
                else:
                    i += 1
            if best_start is None or best_run <= 0:
                break
            fill = min(best_run, max_span, target - count)
            masked[best_start:best_start + fill] = True
            count += fill
            continue
        length = int(rng.integers(1, max_span + 1))
        start = int(rng.integers(0, T))
        attempts += 1
        idx = np.arange(start, start + length) % T
        neighbours = np.concatenate([idx, [(start - 1) % T, (start + length) % T]])
        if masked[neighbours].any():
            continue
        if length > target - count:
            idx = idx[:target - count]
        masked[idx] = True
        count += len(idx)
    return SpanMask(masked, _runs(masked))


def apply_mask(tokens: np.ndarray, mask: SpanMask, mask_token: np.ndarray) -> np.ndarray:
    """Replace masked token rows with the mask token; input left untouched."""
    tokens = np.asarray(tokens)
    if tokens.shape[0] != len(mask.masked):
        raise ValueError("mask length does not match token count")
    if tokens.shape[1] != len(mask_token):
        raise ValueError("mask token dimension mismatch")
    return np.where(mask.masked[:, None], mask_token[None, :].astype(tokens.dtype), tokens)


# ---------------------------------------------------------------------------
# encoder and full forward


def _sample_hidden_keys(T: int, attn_mask_ratio: float, blocks: int,
                        rng: np.random.Generator) -> list[np.ndarray]:
    k = int(round(attn_mask_ratio * T))
    return [np.sort(rng.choice(T, size=k, replace=False)) for _ in range(blocks)]


def _encode_batch(tokens: np.ndarray, model: OcrModel,
                  hidden_keys: list[np.ndarray] | None, want_cache: bool):
    B, T, D = tokens.shape
    pos = sinusoidal_positions(T, D).astype(tokens.dtype)
    x = tokens + pos[None]
    caches = []
    for bi in range(model.blocks):
        hk = hidden_keys[bi] if hidden_keys is not None else None
        x, c = nn.encoder_block(x, model.params, f"enc{bi}", model.heads, hk)
        caches.append(c if want_cache else None)
    return x, caches


def encode(tokens: np.ndarray, model: OcrModel, attn_mask_ratio: float = 0.0,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Add sinusoidal positions and run the encoder blocks on (T, D) tokens.

    A positive ``attn_mask_ratio`` hides round(ratio*T) random key
    positions per block (training only; pass 0 at inference).
    """
    tokens = np.asarray(tokens)
    if not np.all(np.isfinite(tokens)):
        raise ValueError("non-finite token input")
    hidden = None
    if attn_mask_ratio > 0:
        if rng is None:
            raise ValueError("attention masking needs a random source")
        hidden = _sample_hidden_keys(tokens.shape[0], attn_mask_ratio, model.blocks, rng)
    out, _ = _encode_batch(tokens[None], model, hidden, want_cache=False)
    return out[0]


def _forward_batch(xb: np.ndarray, model: OcrModel,
                   span_masks: np.ndarray | None,
                   hidden_keys: list[np.ndarray] | None,
                   want_cache: bool = False):
    p = model.params
    tokens, conv_caches = _extract_batch(xb, model, want_cache)
    if span_masks is not None:
        mt = p["mask_token"].astype(tokens.dtype)
        x = np.where(span_masks[:, :, None], mt[None, None, :], tokens)
    else:
        x = tokens
    x, enc_caches = _encode_batch(x, model, hidden_keys, want_cache)
    logits, head_cache = nn.linear(x, p["head.w"], p["head.b"])
    logp = nn.log_softmax(logits)
    cache = None
    if want_cache:
        cache = (conv_caches, span_masks, enc_caches, head_cache, logp)
    return logp, cache


def _backward_batch(dlogp: np.ndarray, cache, model: OcrModel) -> nn.Params:
    conv_caches, span_masks, enc_caches, head_cache, logp = cache
    p = model.params
    grads: nn.Params = {}
    dlogits = nn.log_softmax_backward(dlogp, logp)
    dx, dw, db = nn.linear_backward(dlogits, head_cache)
    grads["head.w"] = dw
    grads["head.b"] = db
    for bi in range(model.blocks - 1, -1, -1):
        dx = nn.encoder_block_backward(dx, enc_caches[bi], p, f"enc{bi}", grads)
    if span_masks is not None:
        m3 = span_masks[:, :, None]
        grads["mask_token"] = (dx * m3).sum(axis=(0, 1)).astype(p["mask_token"].dtype)
        dtokens = np.where(m3, 0, dx)
    else:
        grads["mask_token"] = np.zeros_like(p["mask_token"])
        dtokens = dx
    dh = np.ascontiguousarray(dtokens.transpose(0, 2, 1))[:, :, None, :]
    for i in range(len(model.conv_spec) - 1, -1, -1):
        dh = _conv_layer_backward(dh, conv_caches[i], p, i, grads)
    return grads


def forward_logits(line, model: OcrModel, train_mode: bool = False,
                   rng: np.random.Generator | None = None,
                   mask_ratio: float = 0.4, attn_mask_ratio: float = 0.1,
                   max_span: int = 8) -> tuple[np.ndarray, int]:
    """Per-token character log-probabilities (T, |charset|+1) and valid length.

    ``train_mode`` enables span masking and attention-key hiding using
    ``rng``; at inference both are off and the call is deterministic.
    """
    pixels = line.pixels if isinstance(line, LineImage) else line
    x, valid_w = _prepare_line(pixels, model)
    span = None
    hidden = None
    if train_mode:
        if rng is None:
            raise ValueError("train_mode forward needs a random source")
        if mask_ratio > 0:
            span = sample_span_mask(model.tokens, mask_ratio, max_span, rng).masked[None]
        if attn_mask_ratio > 0:
            hidden = _sample_hidden_keys(model.tokens, attn_mask_ratio, model.blocks, rng)
    logp, _ = _forward_batch(x[None, None], model, span, hidden)
    return logp[0], _valid_tokens(valid_w, model)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: OcrModel, path, state: dict | None = None) -> None:
    """Write the versioned binary checkpoint (atomic: temp file + rename)."""
    buf = io.BytesIO()
    buf.write(OCR_MAGIC)
    _binio.write_u16(buf, CHECKPOINT_VERSION)
    _binio.write_u32(buf, len(model.charset.chars))
    for ch in model.charset.chars:
        _binio.write_str(buf, ch)
    meta = {
        "dim": model.dim,
        "blocks": model.blocks,
        "heads": model.heads,
        "input_height": model.input_height,
        "input_width": model.input_width,
        "projection": model.projection,
        "conv_spec": [[s.out_channels, s.kernel, s.stride_v, s.stride_h,
                       int(s.residual)] for s in model.conv_spec],
    }
    _binio.write_json_chunk(buf, meta)
    _binio.write_params(buf, model.params)
    if state is not None:
        _binio.write_json_chunk(buf, state)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path, dtype=np.float32) -> tuple[OcrModel, dict | None]:
    with open(path, "rb") as f:
        _binio.expect_magic(f, OCR_MAGIC)
        version = _binio.read_u16(f)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported OCR checkpoint version {version}")
        n = _binio.read_u32(f)
        chars = tuple(_binio.read_str(f) for _ in range(n))
        meta = _binio.read_json_chunk(f)
        params = _binio.read_params(f, dtype=dtype)
        state = _binio.read_optional_json(f)
    conv_spec = tuple(ConvLayerSpec(o, k, sv, sh, bool(r))
                      for o, k, sv, sh, r in meta["conv_spec"])
    model = OcrModel(Charset(chars), params, conv_spec, meta["dim"],
                     meta["blocks"], meta["heads"], meta["input_height"],
                     meta["input_width"], meta["projection"], dtype)
    _check_geometry(conv_spec, model.input_height, model.input_width,
                    model.projection, model.dim)
    return model, state
