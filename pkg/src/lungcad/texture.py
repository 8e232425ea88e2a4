"""Quantile normalization and GLCM texture descriptors for patches.

A patch is normalized per channel with its median and interquartile range,
reduced to luminance, quantized to a few gray levels and cut into 7x7
segments.  Each segment yields a co-occurrence matrix and eight statistics;
the patch descriptor is the mean and the variance of every statistic over
all segments.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

FEATURE_NAMES = (
    "mean",
    "variance",
    "homogeneity",
    "contrast",
    "dissimilarity",
    "entropy",
    "second_moment",
    "correlation",
)
N_FEATURES = len(FEATURE_NAMES)

LUMA = np.array([0.299, 0.587, 0.114])
IQR_EPS = 1e-12
CORR_EPS = 1e-12


def quantile(values, q):
    """Linear-interpolation quantile of the sorted values (h = (n-1)q).

    ``q`` may be a scalar or a sequence; the result has the same shape.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = v.size
    if n == 0:
        raise ValueError("quantile of an empty sequence")
    q = np.asarray(q, dtype=np.float64)
    if np.any((q < 0) | (q > 1)):
        raise ValueError("quantile level must be in [0, 1]")
    h = (n - 1) * q
    lo = np.floor(h).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    res = v[lo] + (h - lo) * (v[hi] - v[lo])
    return float(res) if res.ndim == 0 else res


def normalize_channel(values: np.ndarray) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    q25, q50, q75 = quantile(x, [0.25, 0.5, 0.75])
    iqr = abs(q75 - q25)
    if iqr < IQR_EPS:
        log.debug("degenerate IQR; centering without scaling")
        iqr = 1.0
    return 2.0 * (x - q50) / iqr


def normalize_patch(pixels: np.ndarray) -> np.ndarray:
    """Per-channel 2(I - median) / |IQR| over an (H, W, C) patch."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 2:
        return normalize_channel(px)
    out = np.empty(px.shape, dtype=np.float64)
    for c in range(px.shape[2]):
        out[..., c] = normalize_channel(px[..., c])
    return out


def to_gray_quantized(norm: np.ndarray, levels: int = 8) -> np.ndarray:
    if levels < 2:
        raise ValueError("need at least 2 gray levels")
    norm = np.asarray(norm, dtype=np.float64)
    lum = norm @ LUMA if norm.ndim == 3 else norm
    lum = np.clip(lum, -3.0, 3.0)
    return np.minimum(levels - 1, np.floor((lum + 3.0) / 6.0 * levels)).astype(np.intp)


def _pair_views(grid: np.ndarray, dx: int, dy: int):
    """Views (a, b) over the trailing two axes with b[p] = grid[p + (dy, dx)]."""
    h, w = grid.shape[-2:]
    if abs(dx) >= w or abs(dy) >= h:
        raise ValueError(f"offset ({dx},{dy}) leaves no pixel pairs in a {h}x{w} window")
    ys, yd = slice(max(0, -dy), h - max(0, dy)), slice(max(0, dy), h - max(0, -dy))
    xs, xd = slice(max(0, -dx), w - max(0, dx)), slice(max(0, dx), w - max(0, -dx))
    return grid[..., ys, xs], grid[..., yd, xd]


def compute_glcm(segment: np.ndarray, offset=(1, 0), symmetric: bool = True, levels: int | None = None) -> np.ndarray:
    """Normalized co-occurrence matrix P[i, j] of (level at p, level at p + offset)."""
    seg = np.asarray(segment, dtype=np.intp)
    if levels is None:
        levels = int(seg.max()) + 1
    return glcm_batch(seg[None], offset, symmetric, levels)[0]


def glcm_batch(segments: np.ndarray, offset, symmetric: bool, levels: int) -> np.ndarray:
    """GLCMs for a stack of equally sized windows, shape (n, G, G)."""
    dx, dy = offset
    a, b = _pair_views(segments, dx, dy)
    n = segments.shape[0]
    idx = (np.arange(n)[:, None, None] * levels + a) * levels + b
    counts = np.bincount(idx.ravel(), minlength=n * levels * levels).reshape(n, levels, levels).astype(np.float64)
    if symmetric:
        counts += counts.transpose(0, 2, 1)
    total = counts.sum(axis=(1, 2), keepdims=True)
    return counts / total


@dataclass
class TextureFeatures:
    mean: float
    variance: float
    homogeneity: float
    contrast: float
    dissimilarity: float
    entropy: float
    second_moment: float
    correlation: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in FEATURE_NAMES])


def glcm_features_batch(P: np.ndarray) -> np.ndarray:
    """Eight statistics for each GLCM in a (n, G, G) stack -> (n, 8)."""
    P = np.asarray(P, dtype=np.float64)
    G = P.shape[-1]
    i = np.arange(G, dtype=np.float64)[:, None]
    j = np.arange(G, dtype=np.float64)[None, :]
    d = i - j
    pi = P.sum(axis=2)  # marginal over rows, (n, G)
    pj = P.sum(axis=1)
    lv = np.arange(G, dtype=np.float64)
    mu_i = pi @ lv
    mu_j = pj @ lv
    var_i = ((lv[None, :] - mu_i[:, None]) ** 2 * pi).sum(axis=1)
    var_j = ((lv[None, :] - mu_j[:, None]) ** 2 * pj).sum(axis=1)

    homogeneity = (P / (1.0 + d**2)).sum(axis=(1, 2))
    contrast = (P * d**2).sum(axis=(1, 2))
    dissimilarity = (P * np.abs(d)).sum(axis=(1, 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(P > 0, P * np.log(np.where(P > 0, P, 1.0)), 0.0)
    entropy = -plogp.sum(axis=(1, 2))
    second_moment = (P**2).sum(axis=(1, 2))
    cov = (P * (i[None] - mu_i[:, None, None]) * (j[None] - mu_j[:, None, None])).sum(axis=(1, 2))
    sd = np.sqrt(var_i * var_j)
    corr = np.where(sd < CORR_EPS, 0.0, cov / np.where(sd < CORR_EPS, 1.0, sd))
    corr = np.clip(corr, -1.0, 1.0)
    return np.stack([mu_i, var_i, homogeneity, contrast, dissimilarity, entropy, second_moment, corr], axis=1)


def glcm_features(glcm: np.ndarray) -> TextureFeatures:
    return TextureFeatures(*map(float, glcm_features_batch(np.asarray(glcm)[None])[0]))


@dataclass(frozen=True)
class TextureConfig:
    levels: int = 8
    offset: tuple[int, int] = (1, 0)
    symmetric: bool = True
    segment: int = 7
    segment_stride: int = 7
    # "all": mean and variance of all eight statistics (16 values);
    # "mean_variance": only the GLCM mean and variance statistics (4 values)
    aggregate: str = "all"

    @property
    def dim(self) -> int:
        return 2 * N_FEATURES if self.aggregate == "all" else 4


def segment_grid(gray: np.ndarray, size: int = 7, stride: int = 7) -> np.ndarray:
    """Stack of size x size windows on a stride grid; partial edge windows dropped."""
    h, w = gray.shape
    if h < size or w < size:
        raise ValueError(f"patch {h}x{w} is smaller than one {size}x{size} segment")
    win = np.lib.stride_tricks.sliding_window_view(gray, (size, size))[::stride, ::stride]
    return win.reshape(-1, size, size)


def patch_feature_vector(pixels: np.ndarray, config: TextureConfig = TextureConfig()) -> np.ndarray:
    gray = to_gray_quantized(normalize_patch(pixels), config.levels)
    segs = segment_grid(gray, config.segment, config.segment_stride)
    feats = glcm_features_batch(glcm_batch(segs, config.offset, config.symmetric, config.levels))
    mean = feats.mean(axis=0)
    var = ((feats - mean) ** 2).mean(axis=0)  # two-pass, population variance
    if config.aggregate == "mean_variance":
        return np.concatenate([mean[:2], var[:2]])
    return np.concatenate([mean, var])


def feature_columns(dim: int = 2 * N_FEATURES) -> list[str]:
    return [f"f{k + 1}" for k in range(dim)]


def write_features(rows, path) -> None:
    """rows: iterable of (patch_id, label01, vector)."""
    rows = list(rows)
    dim = len(rows[0][2]) if rows else 2 * N_FEATURES
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patch_id", "label", *feature_columns(dim)])
        for pid, label, vec in rows:
            w.writerow([pid, int(label), *(repr(float(v)) for v in vec)])


def read_features(path):
    """-> (patch_ids, labels01 array, features matrix)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["patch_id", "label"] or header[2:] != feature_columns(len(header) - 2):
            raise ValueError(f"{path}: unexpected feature header")
        ids, labels, feats = [], [], []
        for row in reader:
            ids.append(row[0])
            labels.append(int(row[1]))
            feats.append([float(v) for v in row[2:]])
    X = np.array(feats, dtype=np.float64).reshape(len(ids), len(header) - 2)
    return ids, np.array(labels, dtype=np.int64), X
