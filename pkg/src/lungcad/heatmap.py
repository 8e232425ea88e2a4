"""Per-slide probability heatmaps stitched from overlapping patch scores."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dataio import AnnotationSet, SlideRaster
from .tiling import TilingConfig, grid_shape

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class HeatGrid:
    slide_id: str
    values: np.ndarray  # (rows, cols) probabilities
    patch_size: int
    stride: int


@dataclass
class PixelField:
    values: np.ndarray  # (H, W) float64, NaN where uncovered
    covered: np.ndarray  # (H, W) bool


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def stitch(
    scores: dict[tuple[int, int], float],
    config: TilingConfig,
    width: int,
    height: int,
    slide_id: str = "",
    rule: str = "mean",
) -> tuple[HeatGrid, PixelField]:
    """Combine per-patch probabilities keyed by (row, col).

    ``rule`` picks the pixel value where patches overlap: "mean" (default),
    "max", or "nearest" (patch whose center is closest).
    """
    rows, cols = grid_shape(width, height, config.patch_size, config.stride)
    expected = {(r, c) for r in range(rows) for c in range(cols)}
    got = set(scores)
    if got != expected:
        missing, extra = sorted(expected - got), sorted(got - expected)
        raise ValueError(f"patch scores do not match the tiling grid: missing={missing[:5]} extra={extra[:5]}")
    grid = np.empty((rows, cols))
    for (r, c), p in scores.items():
        grid[r, c] = p
    if np.any(~np.isfinite(grid)) or grid.min() < 0 or grid.max() > 1:
        raise ValueError("patch probabilities must lie in [0, 1]")

    P, S = config.patch_size, config.stride
    total = np.zeros((height, width))
    count = np.zeros((height, width), dtype=np.int64)
    lo = np.full((height, width), np.inf)
    hi = np.full((height, width), -np.inf)
    best_d = np.full((height, width), np.inf)
    nearest = np.zeros((height, width))
    for r in range(rows):
        for c in range(cols):
            ys, xs = slice(r * S, r * S + P), slice(c * S, c * S + P)
            p = grid[r, c]
            total[ys, xs] += p
            count[ys, xs] += 1
            np.minimum(lo[ys, xs], p, out=lo[ys, xs])
            np.maximum(hi[ys, xs], p, out=hi[ys, xs])
            if rule == "nearest":
                cy, cx = r * S + (P - 1) / 2, c * S + (P - 1) / 2
                yy, xx = np.ogrid[ys, xs]
                d = (yy - cy) ** 2 + (xx - cx) ** 2
                closer = d < best_d[ys, xs]
                best_d[ys, xs] = np.where(closer, d, best_d[ys, xs])
                nearest[ys, xs] = np.where(closer, p, nearest[ys, xs])
    covered = count > 0
    field = np.full((height, width), np.nan)
    if rule == "mean":
        # clamping to the covering range keeps constant fields exact
        field[covered] = np.clip(total[covered] / count[covered], lo[covered], hi[covered])
    elif rule == "max":
        field[covered] = hi[covered]
    elif rule == "nearest":
        field[covered] = nearest[covered]
    else:
        raise ValueError(f"unknown stitch rule {rule!r}")
    return HeatGrid(slide_id, grid, P, S), PixelField(field, covered)


def grayscale(slide: SlideRaster) -> np.ndarray:
    return slide.pixels.astype(np.float64) @ LUMA


def colorize(field: PixelField, background: np.ndarray | None = None) -> np.ndarray:
    """Blue (p=0) to red (p=1); uncovered pixels show ``background`` gray, else black."""
    h, w = field.values.shape
    out = np.zeros((h, w, 3), dtype=np.uint8)
    if background is not None:
        g = np.clip(_round_half_away(background), 0, 255).astype(np.uint8)
        out[...] = g[..., None]
    p = field.values[field.covered]
    out[field.covered] = np.stack(
        [_round_half_away(255 * p), np.zeros_like(p), _round_half_away(255 * (1 - p))], axis=1
    ).astype(np.uint8)
    return out


def colorize_value(p: float) -> tuple[int, int, int]:
    return int(_round_half_away(255 * p)), 0, int(_round_half_away(255 * (1 - p)))


def _bresenham(x0: int, y0: int, x1: int, y1: int):
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx, sy = (1 if x0 < x1 else -1), (1 if y0 < y1 else -1)
    err = dx + dy
    while True:
        yield x0, y0
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def draw_polygon(img: np.ndarray, vertices, color=(0, 0, 255)) -> None:
    """Closed polyline; each line pixel plus its 4-neighborhood is painted."""
    h, w = img.shape[:2]
    v = _round_half_away(np.asarray(vertices, dtype=np.float64)).astype(np.int64)
    pts = set()
    for k in range(len(v)):
        (x0, y0), (x1, y1) = v[k], v[(k + 1) % len(v)]
        for x, y in _bresenham(int(x0), int(y0), int(x1), int(y1)):
            for ddx, ddy in ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)):
                pts.add((x + ddx, y + ddy))
    if not pts:
        return
    xy = np.array(sorted(pts))
    keep = (xy[:, 0] >= 0) & (xy[:, 0] < w) & (xy[:, 1] >= 0) & (xy[:, 1] < h)
    xy = xy[keep]
    img[xy[:, 1], xy[:, 0]] = color


def render_overlay(
    slide: SlideRaster, field: PixelField, annotations: AnnotationSet | None = None, alpha: float = 0.4
) -> np.ndarray:
    if field.values.shape != (slide.height, slide.width):
        raise ValueError(
            f"field {field.values.shape[::-1]} does not match slide {slide.width}x{slide.height}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    gray = grayscale(slide)
    out = np.repeat(gray[..., None], 3, axis=2)
    color = colorize(field).astype(np.float64)
    cov = field.covered
    out[cov] = (1 - alpha) * out[cov] + alpha * color[cov]
    img = np.clip(_round_half_away(out), 0, 255).astype(np.uint8)
    if annotations is not None:
        for poly in annotations.polygons:
            draw_polygon(img, poly.vertices)
    return img


def save_png(img: np.ndarray, path) -> None:
    Image.fromarray(img, "RGB").save(path, format="PNG")


def save_field(field: PixelField, path) -> Path:
    """Raw float32 grid (NaN = uncovered) plus a JSON sidecar."""
    path = Path(path)
    field.values.astype("<f4").tofile(path)
    ys, xs = np.nonzero(field.covered)
    side = {
        "width": int(field.values.shape[1]),
        "height": int(field.values.shape[0]),
        "dtype": "float32-le",
        "uncovered": "NaN",
        "coverage_offset": [int(xs.min()), int(ys.min())] if len(xs) else None,
        "coverage_size": [int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)] if len(xs) else None,
    }
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(side, indent=1) + "\n")
    return sidecar
