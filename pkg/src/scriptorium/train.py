"""OCR training: SAM two-step optimization, morphological augmentation,
uniform-with-replacement sampling, cosine learning-rate decay,
checkpointing and a CSV metrics log.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as _scipy_ndimage

from . import ctc, metrics, nn, ocrnet
from .formats import atomic_write
from .geometry import LineImage

logger = logging.getLogger(__name__)

__all__ = ["TrainConfig", "TrainState", "TrainResult", "cosine_lr",
           "morph_augment", "sam_step", "default_decay_mask", "train_loop"]

LOG_HEADER = "iteration,train_loss,val_cer,val_wer,lr"


@dataclass
class TrainConfig:
    max_lr: float = 1e-3
    train_batch: int = 64
    val_batch: int = 8
    weight_decay: float = 0.5
    mask_ratio: float = 0.4
    attn_mask_ratio: float = 0.1
    max_span: int = 8
    image_width: int = 512
    image_height: int = 64
    projection: int = 8
    morph_max_kernel: int = 2
    morph_iterations: int = 1
    sample_prob: float = 0.5
    alpha: float = 1.0
    total_iterations: int = 100000
    sam_rho: float = 0.05
    seed: int = 0
    val_interval: int | None = None
    rotation_aug: bool = False  # ±45° rotations; tried and kept off by default
    base_optimizer: str = "sgd"  # or "adam": adaptive moments on the SAM gradient

    def __post_init__(self):
        for name in ("mask_ratio", "attn_mask_ratio", "sample_prob"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.train_batch < 1 or self.val_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be >= 0")

    @property
    def effective_val_interval(self) -> int:
        if self.val_interval is not None:
            return self.val_interval
        return max(100, self.total_iterations // 200)


@dataclass
class TrainState:
    iteration: int = 0
    best_cer: float = math.inf
    rng_state: dict | None = None


@dataclass
class TrainResult:
    model: ocrnet.OcrModel
    log: list[dict] = field(default_factory=list)
    state: TrainState = field(default_factory=TrainState)


def cosine_lr(iteration: int, total: int, max_lr: float) -> float:
    """Cosine decay from max_lr at step 0 to max_lr/100 at step ``total``."""
    end = max_lr / 100.0
    if total <= 0:
        return max_lr
    t = min(max(iteration / total, 0.0), 1.0)
    return end + 0.5 * (max_lr - end) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# morphological augmentation


def _dilate_ink(a: np.ndarray, k: int) -> np.ndarray:
    """Grayscale dilation with a k x k structuring element anchored top-left:
    out[p] = max over offsets b in [0,k)^2 of in[p - b]."""
    if k <= 1:
        return a
    ap = np.pad(a, ((k - 1, 0), (k - 1, 0)))
    h, w = a.shape
    out = a.copy()
    for dy in range(k):
        for dx in range(k):
            np.maximum(out, ap[k - 1 - dy:k - 1 - dy + h, k - 1 - dx:k - 1 - dx + w],
                       out=out)
    return out


def _erode_ink(a: np.ndarray, k: int) -> np.ndarray:
    """Dual of :func:`_dilate_ink`: out[p] = min over in[p + b], with
    background (zero ink) outside the image."""
    if k <= 1:
        return a
    ap = np.pad(a, ((0, k - 1), (0, k - 1)))
    h, w = a.shape
    out = a.copy()
    for dy in range(k):
        for dx in range(k):
            np.minimum(out, ap[dy:dy + h, dx:dx + w], out=out)
    return out


def morph_augment(line, max_kernel: int, iterations: int,
                  rng: np.random.Generator, sample_prob: float = 0.5):
    """Random dilation or erosion of the ink.

    With probability ``sample_prob``: coin-flip dilation vs erosion,
    kernel size k ~ Uniform{1..max_kernel} (k=1 is the identity), applied
    ``iterations`` times on the inverted-intensity (ink = high) image.
    Otherwise the input is returned unchanged.
    """
    if max_kernel < 1:
        raise ValueError("max_kernel must be >= 1")
    pixels = line.pixels if isinstance(line, LineImage) else np.asarray(line)
    if rng.random() >= sample_prob:
        return line
    dilate = rng.random() < 0.5
    k = int(rng.integers(1, max_kernel + 1))
    if k <= 1 or iterations <= 0:
        return line  # 1x1 element is the identity, bit for bit
    ink = 1.0 - pixels
    for _ in range(iterations):
        ink = _dilate_ink(ink, k) if dilate else _erode_ink(ink, k)
    out = (1.0 - ink).astype(pixels.dtype)
    if isinstance(line, LineImage):
        return dataclasses.replace(line, pixels=out)
    return out


def _rotate_aug(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    from . import raster
    angle = float(rng.uniform(-45.0, 45.0))
    bg = raster.median_border(pixels)
    return _scipy_ndimage.rotate(pixels, angle, reshape=False, order=1,
                                 mode="constant", cval=bg).astype(pixels.dtype)


# ---------------------------------------------------------------------------
# SAM optimizer


def default_decay_mask(params: nn.Params) -> dict[str, bool]:
    """Decoupled decay applies to weight matrices only: biases, layernorm
    parameters and the mask token are excluded."""
    mask = {}
    for k in params:
        last = k.rsplit(".", 1)[-1]
        mask[k] = not (last.startswith("b") or ".ln" in k or k == "mask_token")
    return mask


def sam_gradient(params: nn.Params, loss_and_grad, rho: float
                 ) -> tuple[float, nn.Params]:
    """Two-step SAM gradient on one batch.

    (1) gradient g at params, (2) climb to params + rho * g / ||g||_2,
    (3) gradient g' there.  Returns (loss at params, g').  The batch
    lives inside the ``loss_and_grad`` closure so both evaluations see
    identical data.  Non-finite values raise RuntimeError("divergence").
    """
    if rho <= 0:
        raise ValueError("rho must be > 0")
    loss, g = loss_and_grad(params)
    if not math.isfinite(loss) or not nn.all_finite(g):
        raise RuntimeError("divergence")
    scale = rho / (nn.global_norm(g) + 1e-12)
    perturbed = {k: params[k] + scale * g[k] for k in params}
    _, g2 = loss_and_grad(perturbed)
    if not nn.all_finite(g2):
        raise RuntimeError("divergence")
    return float(loss), g2


def sam_step(params: nn.Params, loss_and_grad, lr: float, rho: float,
             weight_decay: float = 0.0,
             decay_mask: dict[str, bool] | None = None) -> tuple[nn.Params, float]:
    """One sharpness-aware update: params - lr * (g' + weight_decay * params)
    with g' from :func:`sam_gradient`.  Decay skips masked-out parameters.
    Returns the new parameters and the pre-step loss.
    """
    loss, g2 = sam_gradient(params, loss_and_grad, rho)
    new_params = {}
    for k in params:
        decay = weight_decay if (decay_mask is None or decay_mask.get(k, True)) else 0.0
        new_params[k] = params[k] - lr * (g2[k] + decay * params[k])
    return new_params, loss


# ---------------------------------------------------------------------------
# training loop


def _as_pixels(item) -> np.ndarray:
    return item.pixels if isinstance(item, LineImage) else np.asarray(item)


def _check_charset(charset: ocrnet.Charset, pairs, what: str) -> None:
    known = set(charset.chars)
    offenders: dict[str, list[int]] = {}
    import unicodedata
    for i, (_, text) in enumerate(pairs):
        for ch in set(unicodedata.normalize("NFC", text)) - known:
            offenders.setdefault(ch, []).append(i)
    if offenders:
        detail = ", ".join(f"{ch!r} (e.g. {what} line {ix[0]})"
                           for ch, ix in sorted(offenders.items()))
        raise ValueError(f"characters outside the model charset: {detail}")


def _prepare_set(pairs, model: ocrnet.OcrModel):
    planes = []
    for item, text in pairs:
        plane, valid_w = ocrnet._prepare_line(_as_pixels(item), model)
        planes.append((plane, ocrnet._valid_tokens(valid_w, model),
                       model.charset.encode(text), text))
    return planes


def _evaluate(model: ocrnet.OcrModel, prepared, val_batch: int) -> tuple[float, float]:
    """Greedy-decoded micro-averaged CER/WER with all masking off."""
    ce = ch = we = wo = 0
    for lo in range(0, len(prepared), val_batch):
        chunk = prepared[lo:lo + val_batch]
        xb = np.stack([c[0] for c in chunk])[:, None]
        logp, _ = ocrnet._forward_batch(xb, model, None, None)
        for b, (_, vlen, _, ref) in enumerate(chunk):
            hyp = model.charset.decode(ctc.greedy_decode(logp[b], vlen))
            ce += metrics.edit_distance(ref, hyp)
            ch += len(ref)
            we += metrics.edit_distance(ref.split(), hyp.split())
            wo += len(ref.split())
    return ce / max(ch, 1), we / max(wo, 1)


def _write_log(log_path, rows) -> None:
    lines = [LOG_HEADER]
    lines += [f"{r['iteration']},{r['train_loss']:.10g},{r['val_cer']:.10g},"
              f"{r['val_wer']:.10g},{r['lr']:.10g}" for r in rows]
    atomic_write(log_path, "\n".join(lines) + "\n")


def train_loop(model: ocrnet.OcrModel, train_set, val_set, cfg: TrainConfig,
               checkpoint_path=None, log_path=None,
               resume: TrainState | None = None,
               stop_iteration: int | None = None) -> TrainResult:
    """Train the recognizer with CTC loss and SAM updates.

    ``train_set``/``val_set`` are sequences of (line image, text) pairs.
    Every ``effective_val_interval`` iterations (and at the end) the
    validation set is decoded with masking off; the best-CER model goes to
    ``checkpoint_path`` and the metrics log to ``log_path``.  The final
    checkpoint with optimizer-free resume state (rng, iteration) lands at
    ``<checkpoint_path>.last``; with the default stateless sgd base,
    resuming from it reproduces an uninterrupted run bit for bit.
    ``stop_iteration`` pauses a longer schedule early (the learning-rate
    schedule still spans ``total_iterations``).  On non-finite gradients
    the current parameters are checkpointed and RuntimeError("divergence")
    is raised.
    """
    if not train_set:
        raise ValueError("empty training set")
    if model.input_width != cfg.image_width or model.input_height != cfg.image_height:
        raise ValueError(
            f"model input {model.input_width}x{model.input_height} does not match "
            f"config image size {cfg.image_width}x{cfg.image_height}")
    _check_charset(model.charset, train_set, "train")
    _check_charset(model.charset, val_set, "val")

    train_pixels = [_as_pixels(item) for item, _ in train_set]
    train_labels = [model.charset.encode(text) for _, text in train_set]
    val_prepared = _prepare_set(val_set, model) if val_set else []

    rng = np.random.default_rng(cfg.seed)
    start_iter = 0
    best_cer = math.inf
    if resume is not None:
        start_iter = resume.iteration
        best_cer = resume.best_cer
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state

    decay_mask = default_decay_mask(model.params)
    T = model.tokens
    rows: list[dict] = []
    interval = cfg.effective_val_interval
    infeasible_warned = False
    best_saved = False
    if cfg.base_optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown base optimizer {cfg.base_optimizer!r}")
    adam_m = adam_v = None
    if cfg.base_optimizer == "adam":
        adam_m = {k: np.zeros_like(v, dtype=np.float64) for k, v in model.params.items()}
        adam_v = {k: np.zeros_like(v, dtype=np.float64) for k, v in model.params.items()}

    end_iter = cfg.total_iterations
    if stop_iteration is not None:
        end_iter = min(end_iter, stop_iteration)
    for it in range(start_iter, end_iter):
        idx = rng.integers(0, len(train_pixels), size=cfg.train_batch)
        planes = []
        valid_tokens = []
        for i in idx:
            px = morph_augment(train_pixels[int(i)], cfg.morph_max_kernel,
                               cfg.morph_iterations, rng, cfg.sample_prob)
            if cfg.rotation_aug:
                px = _rotate_aug(px, rng)
            plane, vw = ocrnet._prepare_line(px, model)
            planes.append(plane)
            valid_tokens.append(ocrnet._valid_tokens(vw, model))
        xb = np.stack(planes)[:, None]
        labels = [train_labels[int(i)] for i in idx]

        span_masks = None
        if cfg.mask_ratio > 0:
            span_masks = np.stack([
                ocrnet.sample_span_mask(T, cfg.mask_ratio, cfg.max_span, rng).masked
                for _ in range(len(labels))])
        hidden = None
        if cfg.attn_mask_ratio > 0:
            hidden = ocrnet._sample_hidden_keys(T, cfg.attn_mask_ratio,
                                                model.blocks, rng)

        def loss_and_grad(params):
            nonlocal infeasible_warned
            m = dataclasses.replace(model, params=params)
            logp, cache = ocrnet._forward_batch(xb, m, span_masks, hidden,
                                                want_cache=True)
            dlogp = np.zeros_like(logp, dtype=np.float64)
            total = 0.0
            used = 0
            for b, labs in enumerate(labels):
                if valid_tokens[b] < ctc.min_frames(labs):
                    if not infeasible_warned:
                        logger.warning("skipping sample with infeasible CTC target "
                                       "(%d frames < %d needed)", valid_tokens[b],
                                       ctc.min_frames(labs))
                        infeasible_warned = True
                    continue
                loss_b, grad_b = ctc.ctc_loss_and_grad(logp[b], valid_tokens[b], labs)
                dlogp[b] = grad_b
                total += loss_b
                used += 1
            if used == 0:
                return 0.0, nn.tree_zeros_like(params)
            dlogp *= cfg.alpha / used
            grads = ocrnet._backward_batch(dlogp.astype(model.dtype), cache, m)
            return cfg.alpha * total / used, grads

        lr = cosine_lr(it, cfg.total_iterations, cfg.max_lr)
        try:
            if cfg.base_optimizer == "sgd":
                new_params, loss_before = sam_step(model.params, loss_and_grad, lr,
                                                   cfg.sam_rho, cfg.weight_decay,
                                                   decay_mask)
            else:
                loss_before, g2 = sam_gradient(model.params, loss_and_grad,
                                               cfg.sam_rho)
                b1, b2, eps = 0.9, 0.999, 1e-8
                t_adam = it - start_iter + 1
                new_params = {}
                for k, p in model.params.items():
                    g = g2[k].astype(np.float64)
                    adam_m[k] = b1 * adam_m[k] + (1 - b1) * g
                    adam_v[k] = b2 * adam_v[k] + (1 - b2) * g * g
                    mhat = adam_m[k] / (1 - b1 ** t_adam)
                    vhat = adam_v[k] / (1 - b2 ** t_adam)
                    decay = cfg.weight_decay if decay_mask.get(k, True) else 0.0
                    step = mhat / (np.sqrt(vhat) + eps) + decay * p
                    new_params[k] = (p - lr * step).astype(model.dtype)
        except RuntimeError:
            if checkpoint_path:
                state = {"iteration": it, "best_cer": best_cer,
                         "rng_state": rng.bit_generator.state}
                ocrnet.save_checkpoint(model, f"{checkpoint_path}.diverged", state)
            raise
        model.params = new_params

        done = it + 1
        if val_prepared and (done % interval == 0 or done == end_iter):
            val_cer, val_wer = _evaluate(model, val_prepared, cfg.val_batch)
            rows.append({"iteration": done, "train_loss": loss_before,
                         "val_cer": val_cer, "val_wer": val_wer, "lr": lr})
            if log_path:
                _write_log(log_path, rows)
            if val_cer < best_cer:
                best_cer = val_cer
                if checkpoint_path:
                    ocrnet.save_checkpoint(model, checkpoint_path,
                                           {"iteration": done, "best_cer": best_cer})
                    best_saved = True

    final_state = TrainState(max(end_iter, start_iter), best_cer,
                             rng.bit_generator.state)
    if checkpoint_path:
        # keep an earlier best from a resumed run; only fill in a missing file
        if not best_saved and not os.path.exists(checkpoint_path):
            ocrnet.save_checkpoint(model, checkpoint_path,
                                   {"iteration": final_state.iteration,
                                    "best_cer": best_cer})
        ocrnet.save_checkpoint(model, f"{checkpoint_path}.last",
                               {"iteration": final_state.iteration,
                                "best_cer": best_cer,
                                "rng_state": final_state.rng_state})
    return TrainResult(model, rows, final_state)
