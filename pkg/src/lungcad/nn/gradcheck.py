"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

import numpy as np

from .layers import Dropout, walk
from .network import Arch, Network, cross_entropy_loss


def rel_error(a, n):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(arch: Arch, seed: int = 0, epsilon: float = 1e-5, batch: int = 4, max_params: int = 10_000) -> dict:
    """Compare backprop with central differences on every parameter and the input.

    Runs in float64 with batch norm in training mode.  Dropout layers are run
    as the identity and listed under "skipped": their random mask makes the
    loss non-differentiable in the usual sense.
    """
    net = Network(arch, dtype=np.float64).init(seed)
    skipped = []
    for path, layer in walk(net.body):
        if isinstance(layer, Dropout):
            layer.rate = 0.0
            skipped.append(f"{path} (dropout)")
    n_params = sum(p.size for p in net.parameters().values())
    if n_params > max_params:
        raise ValueError(f"network has {n_params} parameters; gradient check is for tiny nets (<= {max_params})")

    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((batch, *arch.input_shape))
    labels = rng.integers(0, 2, size=batch)

    def loss_at(inp):
        return cross_entropy_loss(net.forward(inp, train=True), labels)[0]

    _, dlogits = cross_entropy_loss(net.forward(x, train=True), labels)
    dx = net.backward(dlogits)
    analytic = {k: v.copy() for k, v in net.gradients().items()}

    kinds = {}
    for path, layer in walk(net.body):
        for k in layer.params:
            kinds[f"{path}.{k}" if path else k] = layer.kind

    per_param = {}
    for name, p in net.parameters().items():
        num = np.empty_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            lp = loss_at(x)
            flat[i] = old - epsilon
            lm = loss_at(x)
            flat[i] = old
            nflat[i] = (lp - lm) / (2 * epsilon)
        per_param[name] = float(rel_error(analytic[name], num).max())

    num_dx = np.empty_like(x)
    xf, nf = x.reshape(-1), num_dx.reshape(-1)
    for i in range(xf.size):
        old = xf[i]
        xf[i] = old + epsilon
        lp = loss_at(x)
        xf[i] = old - epsilon
        lm = loss_at(x)
        xf[i] = old
        nf[i] = (lp - lm) / (2 * epsilon)
    input_err = float(rel_error(dx, num_dx).max())

    by_kind: dict[str, float] = {}
    for name, err in per_param.items():
        by_kind[kinds[name]] = max(by_kind.get(kinds[name], 0.0), err)
    return {
        "params": per_param,
        "by_kind": by_kind,
        "input": input_err,
        "max": max([input_err, *per_param.values()]),
        "layer_kinds": sorted(net.layer_kinds()),
        "skipped": skipped,
    }


def tiny_archs() -> dict[str, Arch]:
    """Small networks that together cover every layer type."""
    c = lambda out, k=3, s=1, p=1, bias=True: {"type": "conv", "out": out, "k": k, "s": s, "p": p, "bias": bias}
    return {
        "conv": Arch((2, 5, 5), [c(3), {"type": "flatten"}, {"type": "fc", "out": 2}]),
        "conv_strided": Arch((2, 6, 6), [c(2, k=3, s=2, p=1), {"type": "flatten"}, {"type": "fc", "out": 2}]),
        "fc": Arch((3, 2, 2), [{"type": "flatten"}, {"type": "fc", "out": 4}, {"type": "fc", "out": 2}]),
        "bn": Arch((2, 4, 4), [c(3, bias=False), {"type": "bn"}, {"type": "gap"}, {"type": "fc", "out": 2}]),
        "bn_flat": Arch((4, 1, 1), [{"type": "flatten"}, {"type": "bn"}, {"type": "fc", "out": 2}]),
        "relu": Arch((2, 3, 3), [c(3), {"type": "relu"}, {"type": "flatten"}, {"type": "fc", "out": 2}]),
        "maxpool": Arch((2, 6, 6), [c(2), {"type": "maxpool", "k": 2, "s": 2}, {"type": "flatten"}, {"type": "fc", "out": 2}]),
        "maxpool_overlap": Arch((1, 5, 5), [{"type": "maxpool", "k": 3, "s": 2}, {"type": "flatten"}, {"type": "fc", "out": 2}]),
        "gap": Arch((3, 4, 4), [c(2), {"type": "gap"}, {"type": "fc", "out": 2}]),
        "residual": Arch((2, 4, 4), [
            {"type": "residual", "layers": [c(2), {"type": "relu"}, c(2)]},
            {"type": "gap"}, {"type": "fc", "out": 2},
        ]),
        "residual_projection": Arch((2, 6, 6), [
            {"type": "residual", "projection": True, "layers": [c(3, s=2)]},
            {"type": "gap"}, {"type": "fc", "out": 2},
        ]),
        "softmax_ce": Arch((3, 1, 1), [{"type": "flatten"}, {"type": "fc", "out": 2}]),
        "conv_bn_relu_pool_fc": Arch((2, 6, 6), [
            c(3, bias=False), {"type": "bn"}, {"type": "relu"}, {"type": "maxpool", "k": 2, "s": 2},
            {"type": "flatten"}, {"type": "fc", "out": 2},
        ]),
        "dropout": Arch((3, 1, 1), [{"type": "flatten"}, {"type": "fc", "out": 4}, {"type": "dropout", "rate": 0.5}, {"type": "fc", "out": 2}]),
    }
