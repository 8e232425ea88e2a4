"""Stride-grid patch planning, extraction, and polygon-overlap labeling."""

from __future__ import annotations

import csv
import logging
import operator
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import AnnotationSet, DatasetManifest, Polygon, SlideRaster, dedupe_vertices

log = logging.getLogger(__name__)

CANCER, NORMAL = "cancer", "normal"

INVENTORY_HEADER = ["patch_id", "slide_id", "row", "col", "x0", "y0", "size", "label", "overlap_fraction", "split"]


@dataclass(frozen=True)
class TilingConfig:
    patch_size: int = 256
    stride: int = 196
    label_threshold: float = 0.5

    def validate(self, min_side: int | None = None):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if not 1 <= self.stride <= self.patch_size:
            raise ValueError(f"stride must satisfy 1 <= stride <= patch_size, got {self.stride}")
        if not 0.0 < self.label_threshold <= 1.0:
            raise ValueError(f"label_threshold must be in (0, 1], got {self.label_threshold}")
        if min_side is not None and self.patch_size > min_side:
            raise ValueError(f"patch_size {self.patch_size} exceeds slide side {min_side}")


@dataclass(frozen=True)
class PatchCoord:
    slide_id: str
    x0: int
    y0: int
    size: int
    row: int
    col: int

    @property
    def patch_id(self) -> str:
        return f"{self.slide_id}_r{self.row}_c{self.col}"


@dataclass(frozen=True)
class LabeledPatch:
    coord: PatchCoord
    label: str
    overlap_fraction: float
    split: str = ""


def grid_shape(width: int, height: int, patch_size: int, stride: int) -> tuple[int, int]:
    """(rows, cols) of the stride grid; remainders thinner than a stride are dropped."""
    if width < patch_size or height < patch_size:
        raise ValueError(f"slide {width}x{height} is smaller than patch size {patch_size}")
    return (height - patch_size) // stride + 1, (width - patch_size) // stride + 1


class PatchPlan(Sequence):
    """Row-major patch grid of one slide, built lazily.

    Coordinates are generated on access, so planning a gigapixel slide costs
    nothing until patches are actually visited.
    """

    def __init__(self, rows: int, cols: int, config: TilingConfig, slide_id: str = ""):
        self.rows, self.cols, self.config, self.slide_id = rows, cols, config, slide_id

    def __len__(self) -> int:
        return self.rows * self.cols

    def _coord(self, k: int) -> PatchCoord:
        r, c = divmod(k, self.cols)
        s = self.config.stride
        return PatchCoord(self.slide_id, c * s, r * s, self.config.patch_size, r, c)

    def __getitem__(self, k):
        if isinstance(k, slice):
            return [self._coord(i) for i in range(*k.indices(len(self)))]
        n = len(self)
        k = operator.index(k)
        if k < 0:
            k += n
        if not 0 <= k < n:
            raise IndexError("patch index out of range")
        return self._coord(k)

    def __iter__(self):
        for k in range(len(self)):
            yield self._coord(k)


def plan_patches(width: int, height: int, config: TilingConfig = TilingConfig(), slide_id: str = "") -> PatchPlan:
    config.validate()
    rows, cols = grid_shape(width, height, config.patch_size, config.stride)
    return PatchPlan(rows, cols, config, slide_id)


# ---------------------------------------------------------------------------
# geometry


def shoelace_area(vertices) -> float:
    v = np.asarray(vertices, dtype=np.float64)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon_to_rect(vertices, x0: float, y0: float, x1: float, y1: float) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clip of an arbitrary polygon against an axis-aligned box."""
    out = [tuple(map(float, p)) for p in vertices]

    # each edge: (inside test, intersection of segment p->q with the boundary)
    def x_cut(xc):
        return lambda p, q: (xc, p[1] + (q[1] - p[1]) * (xc - p[0]) / (q[0] - p[0]))

    def y_cut(yc):
        return lambda p, q: (p[0] + (q[0] - p[0]) * (yc - p[1]) / (q[1] - p[1]), yc)

    edges = (
        (lambda p: p[0] >= x0, x_cut(x0)),
        (lambda p: p[0] <= x1, x_cut(x1)),
        (lambda p: p[1] >= y0, y_cut(y0)),
        (lambda p: p[1] <= y1, y_cut(y1)),
    )
    for inside, cut in edges:
        if not out:
            break
        src, out = out, []
        prev = src[-1]
        prev_in = inside(prev)
        for cur in src:
            cur_in = inside(cur)
            if cur_in:
                if not prev_in:
                    out.append(cut(prev, cur))
                out.append(cur)
            elif prev_in:
                out.append(cut(prev, cur))
            prev, prev_in = cur, cur_in
    return out


def polygon_rect_overlap(polygon: Polygon | np.ndarray, rect: PatchCoord) -> float:
    """Fraction of the patch area covered by the polygon."""
    verts = polygon.vertices if isinstance(polygon, Polygon) else np.asarray(polygon, dtype=np.float64)
    verts = dedupe_vertices(verts)
    if len(verts) < 3 or shoelace_area(verts) == 0.0:
        return 0.0
    x0, y0 = float(rect.x0), float(rect.y0)
    x1, y1 = x0 + rect.size, y0 + rect.size
    # cheap reject on bounding boxes
    if verts[:, 0].max() <= x0 or verts[:, 0].min() >= x1 or verts[:, 1].max() <= y0 or verts[:, 1].min() >= y1:
        return 0.0
    clipped = clip_polygon_to_rect(verts, x0, y0, x1, y1)
    frac = shoelace_area(clipped) / float(rect.size * rect.size)
    return min(max(frac, 0.0), 1.0)


def label_patch(coord: PatchCoord, annotations: AnnotationSet, threshold: float = 0.5) -> tuple[str, float]:
    """Summed (then clamped) overlap; overlapping polygons can inflate the fraction."""
    frac = sum(polygon_rect_overlap(p, coord) for p in annotations.polygons)
    frac = min(frac, 1.0)
    return (CANCER if frac >= threshold else NORMAL), frac


def extract_patch(slide: SlideRaster, coord: PatchCoord) -> np.ndarray:
    if coord.x0 < 0 or coord.y0 < 0 or coord.x0 + coord.size > slide.width or coord.y0 + coord.size > slide.height:
        raise ValueError(
            f"patch at ({coord.x0},{coord.y0}) size {coord.size} is outside slide {slide.width}x{slide.height}"
        )
    return slide.pixels[coord.y0:coord.y0 + coord.size, coord.x0:coord.x0 + coord.size].copy()


# ---------------------------------------------------------------------------
# dataset-level tiling


def tile_slide(slide_id: str, width: int, height: int, annotations: AnnotationSet, config: TilingConfig, split: str = ""):
    return [
        LabeledPatch(c, *label_patch(c, annotations, config.label_threshold), split=split)
        for c in plan_patches(width, height, config, slide_id)
    ]


def _image_size(path) -> tuple[int, int]:
    from PIL import Image

    if Path(path).suffix.lower() in (".ppm", ".pnm"):
        from .dataio import load_slide

        s = load_slide(path)
        return s.width, s.height
    with Image.open(path) as im:
        return im.size


def tile_dataset(
    manifest: DatasetManifest,
    config: TilingConfig,
    split: tuple[list[str], list[str]],
    threads: int = 1,
) -> list[LabeledPatch]:
    """Labeled inventory ordered by manifest slide order, then row-major grid order."""
    from .dataio import load_annotations

    config.validate()
    train, test = split
    if not train or not test:
        raise ValueError("split must have non-empty train and test sets")
    assign = {sid: "train" for sid in train}
    assign.update({sid: "test" for sid in test})

    def one(entry):
        if entry.slide_id not in assign:
            return []
        w, h = _image_size(entry.image_path)
        ann = load_annotations(entry.annotation_path)
        return tile_slide(entry.slide_id, w, h, ann, config, assign[entry.slide_id])

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            per_slide = list(pool.map(one, manifest.slides))
    else:
        per_slide = [one(e) for e in manifest.slides]
    inventory = [p for group in per_slide for p in group]
    log.info("tiled %d slides into %d patches", sum(1 for g in per_slide if g), len(inventory))
    return inventory


def write_inventory(inventory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INVENTORY_HEADER)
        for p in inventory:
            c = p.coord
            w.writerow([c.patch_id, c.slide_id, c.row, c.col, c.x0, c.y0, c.size, p.label, repr(float(p.overlap_fraction)), p.split])


def read_inventory(path) -> list[LabeledPatch]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != INVENTORY_HEADER:
            raise ValueError(f"{path}: unexpected inventory header {reader.fieldnames}")
        out = []
        for row in reader:
            c = PatchCoord(row["slide_id"], int(row["x0"]), int(row["y0"]), int(row["size"]), int(row["row"]), int(row["col"]))
            out.append(LabeledPatch(c, row["label"], float(row["overlap_fraction"]), row["split"]))
    return out


def materialize_patches(inventory, manifest: DatasetManifest, out_dir) -> None:
    from PIL import Image

    from .dataio import load_slide

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_slide: dict[str, list[LabeledPatch]] = {}
    for p in inventory:
        by_slide.setdefault(p.coord.slide_id, []).append(p)
    for sid, patches in by_slide.items():
        slide = load_slide(manifest.entry(sid).image_path, sid)
        for p in patches:
            Image.fromarray(extract_patch(slide, p.coord), "RGB").save(out / f"{p.coord.patch_id}.png")
