"""Architecture files, network construction and the softmax cross-entropy loss."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import (
    BatchNorm,
    Conv2d,
    Dropout,
    Flatten,
    FullyConnected,
    GlobalAvgPool,
    Layer,
    MaxPool2d,
    ReLU,
    ResidualBlock,
    Sequential,
    ShapeError,
    walk,
)

N_CLASSES = 2
CANCER_CLASS = 1


def pilotnet_layers(bn_conv_bias: bool = False) -> list[dict]:
    """Default desk-scale architecture for 3x64x64 inputs."""
    conv = lambda out: {"type": "conv", "out": out, "k": 3, "s": 1, "p": 1, "bias": bn_conv_bias}
    return [
        conv(16), {"type": "bn"}, {"type": "relu"}, {"type": "maxpool", "k": 2, "s": 2},
        {"type": "residual", "projection": False, "layers": [
            conv(16), {"type": "bn"}, {"type": "relu"}, conv(16), {"type": "bn"},
        ]},
        {"type": "relu"}, {"type": "maxpool", "k": 2, "s": 2},
        conv(32), {"type": "bn"}, {"type": "relu"}, {"type": "gap"},
        {"type": "fc", "out": N_CLASSES},
    ]


PILOTNET = {"input": [3, 64, 64], "layers": pilotnet_layers()}


@dataclass
class Arch:
    input_shape: tuple[int, int, int]
    layers: list[dict]

    def to_json(self) -> dict:
        return {"input": list(self.input_shape), "layers": copy.deepcopy(self.layers)}

    @classmethod
    def from_json(cls, doc, input_shape=(3, 64, 64)) -> "Arch":
        if isinstance(doc, list):
            return cls(tuple(input_shape), doc)
        if not isinstance(doc, dict) or "layers" not in doc:
            raise ShapeError("architecture must be a list of layers or an object with 'layers'")
        return cls(tuple(doc.get("input", input_shape)), doc["layers"])

    @classmethod
    def load(cls, path, input_shape=(3, 64, 64)) -> "Arch":
        return cls.from_json(json.loads(Path(path).read_text()), input_shape)


def _int(spec, key, default=None, minimum=1):
    v = spec.get(key, default)
    if v is None:
        raise ShapeError(f"{spec.get('type')} layer needs '{key}'")
    if not isinstance(v, int) or v < minimum:
        raise ShapeError(f"{spec.get('type')} layer: '{key}' must be an integer >= {minimum}, got {v!r}")
    return v


def _build(specs, in_shape, where="layer"):
    """Instantiate layers, threading shapes through to size each one."""
    layers = []
    shape = tuple(in_shape)
    for i, spec in enumerate(specs):
        name = f"{where} {i} ({spec.get('type')})" if isinstance(spec, dict) else f"{where} {i}"
        if not isinstance(spec, dict) or "type" not in spec:
            raise ShapeError(f"{name}: layer must be an object with a 'type'")
        t = spec["type"]
        try:
            if t == "conv":
                layer = Conv2d(shape[0], _int(spec, "out"), _int(spec, "k", 3), _int(spec, "s", 1),
                               _int(spec, "p", 0, minimum=0), bool(spec.get("bias", True)))
            elif t == "relu":
                layer = ReLU()
            elif t == "maxpool":
                layer = MaxPool2d(_int(spec, "k", 2), _int(spec, "s", spec.get("k", 2)))
            elif t == "bn":
                layer = BatchNorm(shape[0], float(spec.get("eps", 1e-5)), float(spec.get("momentum", 0.9)))
            elif t == "dropout":
                layer = Dropout(float(spec.get("rate", 0.5)))
            elif t == "flatten":
                layer = Flatten()
            elif t == "gap":
                layer = GlobalAvgPool()
            elif t == "fc":
                if len(shape) != 1:
                    raise ShapeError(f"fully-connected expects a flat input, got {shape}; add flatten or gap")
                layer = FullyConnected(shape[0], _int(spec, "out"))
            elif t == "residual":
                inner = Sequential(_build(spec.get("layers", []), shape, f"{name} inner layer"))
                inner_out = inner.out_shape(shape)
                proj = None
                if spec.get("projection", False):
                    if len(shape) != 3 or len(inner_out) != 3:
                        raise ShapeError("projection needs (C, H, W) shapes")
                    stride = max(1, shape[1] // inner_out[1])
                    proj = Conv2d(shape[0], inner_out[0], 1, stride, 0, bias=False)
                layer = ResidualBlock(inner, proj)
            else:
                raise ShapeError(f"unknown layer type {t!r}")
            shape = layer.out_shape(shape)
        except ShapeError as exc:
            msg = str(exc)
            raise ShapeError(msg if msg.startswith(where) else f"{name}: {msg}") from None
        layers.append(layer)
    return layers


class Network:
    """A built architecture with named parameters and buffers."""

    def __init__(self, arch: Arch, dtype=np.float32):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self.body = Sequential(_build(arch.layers, arch.input_shape))
        out = self.body.out_shape(arch.input_shape)
        if tuple(out) != (N_CLASSES,):
            raise ShapeError(f"network output shape is {tuple(out)}, expected ({N_CLASSES},)")

    def init(self, seed: int) -> "Network":
        self.body.init(np.random.default_rng(seed), self.dtype)
        return self

    def _named(self, attr):
        out = {}
        for path, layer in walk(self.body):
            for k, v in getattr(layer, attr).items():
                out[f"{path}.{k}" if path else k] = (layer, k)
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        return {n: l.params[k] for n, (l, k) in self._named("params").items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {n: l.grads[k] for n, (l, k) in self._named("params").items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {n: l.buffers[k] for n, (l, k) in self._named("buffers").items()}

    def state(self) -> dict[str, np.ndarray]:
        return {**self.parameters(), **self.buffers()}

    def set_parameter(self, name, value):
        for attr in ("params", "buffers"):
            named = self._named(attr)
            if name in named:
                layer, k = named[name]
                cur = getattr(layer, attr)[k]
                value = np.asarray(value)
                if value.shape != cur.shape:
                    raise ShapeError(f"parameter {name}: shape {value.shape} does not match {cur.shape}")
                getattr(layer, attr)[k] = value.astype(self.dtype).copy()
                return
        raise KeyError(name)

    def layer_kinds(self) -> set[str]:
        return {layer.kind for _, layer in walk(self.body)} - {"sequential"}

    def forward(self, x, train=False, rng=None, check_finite=False):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != tuple(self.arch.input_shape):
            raise ShapeError(f"batch shape {x.shape[1:]} does not match network input {tuple(self.arch.input_shape)}")
        return self.body.forward(x, train, rng, check_finite)

    def backward(self, dlogits):
        return self.body.backward(np.asarray(dlogits, dtype=self.dtype))

    def astype(self, dtype) -> "Network":
        net = copy.deepcopy(self)
        net.dtype = np.dtype(dtype)
        for _, layer in walk(net.body):
            for d in (layer.params, layer.buffers):
                for k in d:
                    d[k] = d[k].astype(dtype)
        return net


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood and its gradient with respect to the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels).astype(np.intp)
    if not np.all((labels >= 0) & (labels < logits.shape[1])):
        raise ValueError("labels out of range")
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


@dataclass
class CnnModel:
    net: Network
    metadata: dict = field(default_factory=dict)

    @property
    def arch(self) -> Arch:
        return self.net.arch
