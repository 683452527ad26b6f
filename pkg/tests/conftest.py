"""Shared fixtures.

The toy OCR model (2000 iterations) and layout net (1000 iterations) are
expensive to train, so they are session-scoped and additionally cached as
checkpoint files under $SCRIPTORIUM_TEST_CACHE (default: none, train
fresh).  Set the env var to a directory to reuse trained models across
pytest invocations during development.
"""

from __future__ import annotations

import os
import time
from pathlib import Path

import numpy as np
import pytest

from scriptorium import layout as layout_mod
from scriptorium import ocrnet, synth, train

TOY_SEED = 11
TOY_DIM = 64
TOY_BLOCKS = 2
TOY_WIDTH = 256
TOY_ITERATIONS = 2000
LAYOUT_ITERATIONS = 1000


def _cache_dir() -> Path | None:
    root = os.environ.get("SCRIPTORIUM_TEST_CACHE")
    if not root:
        return None
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


@pytest.fixture(scope="session")
def toy_corpus():
    rng = np.random.default_rng(TOY_SEED)
    corpus = synth.make_corpus(240, rng, scale=4)
    return corpus[:200], corpus[200:240]


@pytest.fixture(scope="session")
def toy_charset(toy_corpus):
    train_set, _ = toy_corpus
    return ocrnet.Charset.from_texts(t for _, t in train_set)


def _fresh_toy_model(charset) -> ocrnet.OcrModel:
    return ocrnet.init_ocr_model(
        charset, dim=TOY_DIM, blocks=TOY_BLOCKS, heads=4,
        input_height=64, input_width=TOY_WIDTH, projection=8,
        conv_spec=ocrnet.compact_conv_spec(TOY_DIM), seed=0)


@pytest.fixture(scope="session")
def toy_train_config():
    return train.TrainConfig(
        max_lr=1e-3, train_batch=16, val_batch=8,
        total_iterations=TOY_ITERATIONS, image_width=TOY_WIDTH,
        image_height=64, seed=0, val_interval=250, base_optimizer="adam")


@pytest.fixture(scope="session")
def toy_ocr(toy_corpus, toy_charset, toy_train_config):
    """(model, final val CER, wall seconds) for the 2000-iteration toy run."""
    cache = _cache_dir()
    ckpt = cache / "toy_ocr.fpthd" if cache else None
    if ckpt and ckpt.exists():
        model, state = ocrnet.load_checkpoint(ckpt)
        return model, state["best_cer"], 0.0
    train_set, val_set = toy_corpus
    model = _fresh_toy_model(toy_charset)
    t0 = time.time()
    result = train.train_loop(model, train_set, val_set, toy_train_config)
    elapsed = time.time() - t0
    cer = result.log[-1]["val_cer"]
    if ckpt:
        ocrnet.save_checkpoint(result.model, ckpt, {"best_cer": cer})
    return result.model, cer, elapsed


@pytest.fixture(scope="session")
def layout_training_pages():
    rng = np.random.default_rng(5)
    pages = []
    for i in range(28):
        ncol = 2 if i % 4 else 1
        cols = synth.random_page_columns(rng, n_columns=ncol)
        img, gt = synth.render_page(f"tp{i:02d}", cols, scale=3)
        pages.append((img, gt))
    return pages


@pytest.fixture(scope="session")
def toy_layout_net(layout_training_pages):
    cache = _cache_dir()
    ckpt = cache / "toy_layout.fpthd" if cache else None
    if ckpt and ckpt.exists():
        return layout_mod.load_checkpoint(ckpt)[0]
    corpus = []
    for img, gt in layout_training_pages:
        shape = (max(1, round(img.shape[0] / 5)), max(1, round(img.shape[1] / 5)))
        corpus.append((img, layout_mod.rasterize_maps(gt, 5, shape)))
    net = layout_mod.init_layout_net(downsample=5, seed=0)
    net, _ = layout_mod.train_layout_net(
        corpus, layout_mod.LayoutTrainConfig(lr=3e-3, iterations=LAYOUT_ITERATIONS,
                                             batch_size=2, seed=0), net)
    if ckpt:
        layout_mod.save_checkpoint(net, ckpt)
    return net


@pytest.fixture(scope="session")
def eval_pages():
    """Five synthetic 2-column pages with ground-truth layout and text."""
    pages = []
    for i in range(5):
        cols = synth.random_page_columns(np.random.default_rng(100 + i), n_columns=2)
        img, gt = synth.render_page(f"page{i:02d}", cols, scale=3)
        pages.append((img, gt, cols))
    return pages
