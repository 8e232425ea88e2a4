"""Soft-margin SVM trained with sequential minimal optimization."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    gamma: float | None = None  # None -> 1 / feature dim

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.kind == "rbf" and self.gamma is not None and not self.gamma > 0:
            raise ValueError("rbf gamma must be > 0")

    def resolved(self, dim: int) -> "KernelSpec":
        if self.kind == "rbf" and self.gamma is None:
            return KernelSpec("rbf", 1.0 / dim)
        return self

    def matrix(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        B = np.atleast_2d(np.asarray(B, dtype=np.float64))
        if A.shape[1] != B.shape[1]:
            raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
        if self.kind == "linear":
            return A @ B.T
        gamma = self.gamma if self.gamma is not None else 1.0 / A.shape[1]
        sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * (A @ B.T)
        return np.exp(-gamma * np.maximum(sq, 0.0))


def kernel_eval(kernel: KernelSpec, x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if kernel.kind == "linear":
        return float(x @ y)
    gamma = kernel.gamma if kernel.gamma is not None else 1.0 / x.size
    d = x - y
    return float(np.exp(-gamma * (d @ d)))


def dual_objective(alphas, labels, K) -> float:
    a = np.asarray(alphas, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    ay = a * y
    return float(a.sum() - 0.5 * ay @ np.asarray(K) @ ay)


@dataclass
class SvmModel:
    kernel: KernelSpec
    C: float
    bias: float
    support: np.ndarray  # standardized support vectors (m, d)
    alpha_y: np.ndarray  # alpha_i * y_i for each support vector
    mean: np.ndarray
    std: np.ndarray
    trace: list[float] = field(default_factory=list, repr=False)
    # training-time state (canonical row order): alpha, y, Z, errors
    fit_info: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return self.mean.size

    def standardize(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} features, got {X.shape[1]}")
        return (X - self.mean) / self.std

    def decision(self, X) -> np.ndarray:
        Z = self.standardize(X)
        if len(self.alpha_y) == 0:
            return np.full(len(Z), self.bias)
        return self.kernel.matrix(Z, self.support) @ self.alpha_y + self.bias

    def save(self, path) -> None:
        doc = {
            "format_version": FORMAT_VERSION,
            "kind": "svm",
            "kernel": {"kind": self.kernel.kind, "gamma": self.kernel.gamma},
            "C": self.C,
            "bias": self.bias,
            "standardization": {"mean": self.mean.tolist(), "std": self.std.tolist()},
            "support": [{"alpha_y": float(a), "x": x.tolist()} for a, x in zip(self.alpha_y, self.support)],
        }
        # json emits shortest round-trip reprs, so floats reload bit-exactly
        Path(path).write_text(json.dumps(doc) + "\n")

    @classmethod
    def load(cls, path) -> "SvmModel":
        doc = json.loads(Path(path).read_text())
        if doc.get("kind") != "svm":
            raise ValueError(f"{path}: not an SVM model file")
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format_version {doc.get('format_version')}")
        k = doc["kernel"]
        mean = np.array(doc["standardization"]["mean"], dtype=np.float64)
        sup = doc["support"]
        return cls(
            kernel=KernelSpec(k["kind"], k.get("gamma")),
            C=float(doc["C"]),
            bias=float(doc["bias"]),
            support=np.array([s["x"] for s in sup], dtype=np.float64).reshape(len(sup), mean.size),
            alpha_y=np.array([s["alpha_y"] for s in sup], dtype=np.float64),
            mean=mean,
            std=np.array(doc["standardization"]["std"], dtype=np.float64),
        )


def svm_decision(model: SvmModel, x) -> float | np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = model.decision(x)
    return float(out[0]) if x.ndim == 1 else out


class _Smo:
    """Platt's SMO on a precomputed kernel matrix, with an incremental error cache."""

    def __init__(self, K, y, C, tol, eps=1e-12, on_update=None):
        self.K, self.y, self.C, self.tol, self.eps = K, y, C, tol, eps
        self.on_update = on_update
        n = len(y)
        self.alpha = np.zeros(n)
        self.b = 0.0
        self.E = -y.astype(np.float64)  # f = 0 initially

    def refresh_errors(self):
        f0 = self.K @ (self.alpha * self.y)
        a, y, C = self.alpha, self.y, self.C
        if not np.any((a > 0) & (a < C)):
            # with every alpha at a bound, Platt's midpoint bias can fall outside
            # the range the KKT conditions allow; use the middle of that range
            g = y - f0
            lower = np.r_[g[(a == 0) & (y > 0)], g[(a == C) & (y < 0)]]
            upper = np.r_[g[(a == 0) & (y < 0)], g[(a == C) & (y > 0)]]
            if lower.size and upper.size:
                self.b = 0.5 * (lower.max() + upper.min())
        self.E = f0 + self.b - y

    def violates(self, i) -> bool:
        r = self.E[i] * self.y[i]  # = y f - 1
        a = self.alpha[i]
        return (r < -self.tol and a < self.C) or (r > self.tol and a > 0)

    def take_step(self, i, j) -> bool:
        if i == j:
            return False
        K, y, C = self.K, self.y, self.C
        a_i, a_j = self.alpha[i], self.alpha[j]
        y_i, y_j = y[i], y[j]
        E_i, E_j = self.E[i], self.E[j]
        s = y_i * y_j
        if s < 0:
            L, H = max(0.0, a_j - a_i), min(C, C + a_j - a_i)
        else:
            L, H = max(0.0, a_i + a_j - C), min(C, a_i + a_j)
        if H - L < self.eps:
            return False
        eta = K[i, i] + K[j, j] - 2.0 * K[i, j]
        if eta <= 1e-12:
            # objective is linear along the pair direction: skip rather than
            # risk a non-ascent step
            return False
        a_j_new = a_j + y_j * (E_i - E_j) / eta
        a_j_new = min(max(a_j_new, L), H)
        if a_j_new < 1e-12 * C:
            a_j_new = 0.0
        elif a_j_new > C * (1 - 1e-12):
            a_j_new = C
        if abs(a_j_new - a_j) < self.eps * (a_j_new + a_j + self.eps):
            return False
        a_i_new = a_i + s * (a_j - a_j_new)
        if a_i_new < 1e-12 * C:
            a_i_new = 0.0
        elif a_i_new > C * (1 - 1e-12):
            a_i_new = C

        d_i, d_j = y_i * (a_i_new - a_i), y_j * (a_j_new - a_j)
        b1 = self.b - E_i - d_i * K[i, i] - d_j * K[i, j]
        b2 = self.b - E_j - d_i * K[i, j] - d_j * K[j, j]
        if 0 < a_i_new < C:
            b_new = b1
        elif 0 < a_j_new < C:
            b_new = b2
        else:
            b_new = 0.5 * (b1 + b2)
        self.E += d_i * K[i] + d_j * K[j] + (b_new - self.b)
        self.alpha[i], self.alpha[j] = a_i_new, a_j_new
        self.b = b_new
        if self.on_update is not None:
            self.on_update(self)
        return True

    def examine(self, i, order) -> bool:
        if not self.violates(i):
            return False
        # second choice: maximize |E_i - E_j|, then fall back to a scan
        j = int(np.argmax(np.abs(self.E[order] - self.E[i])))
        if self.take_step(i, order[j]):
            return True
        free = [k for k in order if 0 < self.alpha[k] < self.C]
        for k in free:
            if self.take_step(i, k):
                return True
        for k in order:
            if self.take_step(i, k):
                return True
        return False


def _canonical_order(X, y, seed):
    """Row order that depends only on row content and the seed."""
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(X.shape[1] + 1)
    key = np.column_stack([X, y]) @ proj
    return np.lexsort((*[X[:, k] for k in range(X.shape[1] - 1, -1, -1)], y, key))


def train_svm(
    features,
    labels,
    C: float = 1.0,
    kernel: KernelSpec = KernelSpec(),
    tol: float = 1e-3,
    max_passes: int = 10,
    seed: int = 1,
    standardize: bool = True,
    max_sweeps: int = 10_000,
    on_update=None,
) -> SvmModel:
    """Fit an SVM; labels may be +-1 or 0/1.

    Training is invariant to the order of the input rows: rows are first put
    in a canonical order derived from their content and the seed, and each
    sweep visits them in a seeded shuffle of that order.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("features must be (n, d) with one label per row")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    if set(np.unique(y)) <= {0.0, 1.0}:
        y = 2.0 * y - 1.0
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise ValueError("labels must be +-1 or 0/1")
    if len(np.unique(y)) < 2:
        raise ValueError("training data must contain both classes")
    if not C > 0 or not tol > 0:
        raise ValueError("C and tol must be > 0")

    d = X.shape[1]
    kernel = kernel.resolved(d)
    if standardize:
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        std = np.where(std > 0, std, 1.0)
    else:
        mean, std = np.zeros(d), np.ones(d)
    Z = (X - mean) / std

    canon = _canonical_order(Z, y, seed)
    Z, y = Z[canon], y[canon]
    K = kernel.matrix(Z, Z)
    smo = _Smo(K, y, C, tol, on_update=on_update)
    rng = np.random.default_rng(seed)
    trace = [dual_objective(smo.alpha, y, K)]
    passes = 0
    sweeps = 0
    while passes < max_passes and sweeps < max_sweeps:
        smo.refresh_errors()
        order = rng.permutation(len(y))
        changed = 0
        for i in order:
            changed += smo.examine(i, order)
        sweeps += 1
        trace.append(dual_objective(smo.alpha, y, K))
        passes = passes + 1 if changed == 0 else 0
    if sweeps >= max_sweeps:
        log.warning("SMO stopped after %d sweeps without meeting tol=%g", sweeps, tol)
    log.info("SMO: %d sweeps, %d support vectors, dual %.6g", sweeps, int((smo.alpha > 0).sum()), trace[-1])

    sv = smo.alpha > 0
    model = SvmModel(
        kernel=kernel,
        C=float(C),
        bias=float(smo.b),
        support=Z[sv],
        alpha_y=smo.alpha[sv] * y[sv],
        mean=mean,
        std=std,
        trace=trace,
        fit_info={"alpha": smo.alpha, "y": y, "Z": Z, "errors": smo.E.copy(), "sweeps": sweeps},
    )
    return model
