"""Glue between stages: per-inventory feature extraction, scoring, heatmaps."""

from __future__ import annotations

import numpy as np

from .dataio import DatasetManifest, load_annotations, load_slide
from .heatmap import render_overlay, stitch
from .texture import TextureConfig, patch_feature_vector
from .tiling import CANCER, TilingConfig, extract_patch


def _select(inventory, split):
    return [p for p in inventory if split in (None, "all") or p.split == split]


def inventory_features(inventory, manifest: DatasetManifest, config: TextureConfig = TextureConfig(),
                       split: str | None = None, threads: int = 1):
    """-> list of (patch_id, label01, vector) in inventory order."""
    rows = _select(inventory, split)
    by_slide: dict[str, list] = {}
    for p in rows:
        by_slide.setdefault(p.coord.slide_id, []).append(p)

    def one(sid):
        slide = load_slide(manifest.entry(sid).image_path, sid)
        return {p.coord.patch_id: patch_feature_vector(extract_patch(slide, p.coord), config) for p in by_slide[sid]}

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(one, by_slide))
    else:
        parts = [one(sid) for sid in by_slide]
    vecs = {k: v for part in parts for k, v in part.items()}
    return [(p.coord.patch_id, int(p.label == CANCER), vecs[p.coord.patch_id]) for p in rows]


def slide_id_of(patch_id: str) -> str:
    return patch_id.rsplit("_r", 1)[0]


def grid_index_of(patch_id: str) -> tuple[int, int]:
    _, rc = patch_id.rsplit("_r", 1)
    r, c = rc.split("_c")
    return int(r), int(c)


def to_probability(scores: np.ndarray, transform: str = "auto") -> tuple[np.ndarray, str]:
    """Map scores into [0, 1]; "auto" keeps them when already in range, else applies a logistic."""
    s = np.asarray(scores, dtype=np.float64)
    if transform == "auto":
        transform = "none" if s.size and s.min() >= 0 and s.max() <= 1 else "sigmoid"
    if transform == "sigmoid":
        return 1.0 / (1.0 + np.exp(-s)), transform
    if transform == "none":
        return s, transform
    raise ValueError(f"unknown score transform {transform!r}")


def slide_heatmap(scoreset, manifest: DatasetManifest, slide_id: str, config: TilingConfig,
                  alpha: float = 0.4, rule: str = "mean", transform: str = "auto"):
    """-> (overlay RGB array, HeatGrid, PixelField, applied transform)."""
    keep = [i for i, sid in enumerate(scoreset.slide_ids) if sid == slide_id]
    if not keep:
        raise ValueError(f"no scores for slide {slide_id!r}")
    probs, used = to_probability(scoreset.scores[keep], transform)
    scores = {grid_index_of(scoreset.patch_ids[i]): float(p) for i, p in zip(keep, probs)}
    entry = manifest.entry(slide_id)
    slide = load_slide(entry.image_path, slide_id)
    grid, field = stitch(scores, config, slide.width, slide.height, slide_id, rule)
    img = render_overlay(slide, field, load_annotations(entry.annotation_path), alpha)
    return img, grid, field, used
