"""Training loop, patch preprocessing and inference for the CNN classifier."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..texture import normalize_patch
from .layers import ShapeError
from .network import CANCER_CLASS, Arch, CnnModel, Network, cross_entropy_loss, softmax
from .optim import AdamState, adam_step
from .serialize import load_matching

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 64
    seed: int = 1
    decoupled_decay: bool = False

    def validate(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def block_mean(img: np.ndarray, factor: int) -> np.ndarray:
    """Downscale (H, W, C) by averaging factor x factor blocks."""
    h, w = img.shape[:2]
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"downscale factor {factor} must divide the patch size {h}x{w}")
    if factor == 1:
        return img
    return img.reshape(h // factor, factor, w // factor, factor, *img.shape[2:]).mean(axis=(1, 3))


def preprocess_patch(pixels: np.ndarray, input_size: int) -> np.ndarray:
    """Quantile-normalize per channel at full resolution, then block-mean to the network input."""
    size = pixels.shape[0]
    if size % input_size:
        raise ValueError(f"network input {input_size} must divide the patch size {size}")
    norm = normalize_patch(pixels)
    return block_mean(norm, size // input_size).transpose(2, 0, 1).astype(np.float32)


def load_patch_tensors(inventory, manifest, input_size: int, split: str | None = None):
    """-> (X float32 (n, 3, s, s), labels 0/1, patch ids, slide ids), inventory order."""
    from ..dataio import load_slide
    from ..tiling import CANCER, extract_patch

    rows = [p for p in inventory if split in (None, "all") or p.split == split]
    X = np.empty((len(rows), 3, input_size, input_size), dtype=np.float32)
    slide, current = None, None
    for k, p in enumerate(rows):
        sid = p.coord.slide_id
        if sid != current:
            slide = load_slide(manifest.entry(sid).image_path, sid)
            current = sid
        X[k] = preprocess_patch(extract_patch(slide, p.coord), input_size)
    y = np.array([1 if p.label == CANCER else 0 for p in rows], dtype=np.int64)
    return X, y, [p.coord.patch_id for p in rows], [p.coord.slide_id for p in rows]


def train_cnn(X, y, arch: Arch, config: TrainConfig = TrainConfig(), init=None, dtype=np.float32, on_batch=None):
    """Train from scratch (``init`` None) or fine-tune from a model / model path.

    Fine-tuning copies every parameter whose name exists in the source model
    and then trains the whole network.  Returns (model, per-epoch mean loss).
    """
    config.validate()
    X = np.asarray(X)
    y = np.asarray(y).astype(np.int64)
    n = len(X)
    if n == 0:
        raise ValueError("empty training set")
    if config.batch_size > n:
        raise ValueError(f"batch size {config.batch_size} exceeds dataset size {n}")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be binary")

    net = Network(arch, dtype=dtype).init(config.seed)
    if init is None:
        mode = "scratch"
    else:
        copied = load_matching(net, init)
        if not copied:
            raise ShapeError("fine-tune source shares no parameters with the target architecture")
        mode = f"finetune:{init}" if isinstance(init, (str, Path)) else "finetune"

    params = net.parameters()
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            logits = net.forward(X[idx], train=True, rng=rng)
            loss, dlogits = cross_entropy_loss(logits, y[idx])
            net.backward(dlogits)
            adam_step(params, net.gradients(), state, config.lr, config.weight_decay, config.decoupled_decay)
            total += loss * len(idx)
            if on_batch is not None:
                on_batch(epoch, loss)
        trace.append(total / n)
        log.info("epoch %d/%d loss %.6f", epoch + 1, config.epochs, trace[-1])

    meta = {
        "seed": config.seed,
        "epochs": config.epochs,
        "lr": config.lr,
        "weight_decay": config.weight_decay,
        "batch_size": config.batch_size,
        "decoupled_decay": config.decoupled_decay,
        "init": mode,
        "loss_trace": trace,
    }
    return CnnModel(net, meta), trace


def predict_proba(model: CnnModel, X, batch_size: int = 128) -> np.ndarray:
    """(n, 2) class probabilities from an inference-mode forward pass."""
    X = np.asarray(X)
    out = np.empty((len(X), 2), dtype=np.float64)
    for s in range(0, len(X), batch_size):
        out[s:s + batch_size] = softmax(model.net.forward(X[s:s + batch_size], train=False).astype(np.float64))
    return out


def predict_cnn(model: CnnModel, X, batch_size: int = 128) -> np.ndarray:
    """Probability of the cancer class for each patch."""
    return predict_proba(model, X, batch_size)[:, CANCER_CLASS]
