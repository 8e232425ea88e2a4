"""Slides, annotations, dataset manifests and the synthetic slide generator."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import uniform_filter

log = logging.getLogger(__name__)

# Largest side accepted by load_slide; guards against decompression bombs.
MAX_SLIDE_SIDE = 1 << 16

CHANNEL_OFFSETS = (0, 8, -8)


class DataError(ValueError):
    """Raised for malformed manifests, annotations or slide files."""


@dataclass
class SlideRaster:
    id: str
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DataError(f"slide {self.id!r}: expected (H, W, 3) pixels, got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise DataError(f"slide {self.id!r}: empty raster")
        self.pixels = np.ascontiguousarray(px, dtype=np.uint8)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()


@dataclass
class Polygon:
    vertices: np.ndarray  # (n, 2) float64, (x, y)
    label: str = "cancer"

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise DataError(f"polygon vertices must be (n, 2), got shape {v.shape}")
        if len(v) < 3:
            raise DataError(f"polygon needs at least 3 vertices, got {len(v)}")
        if not np.all(np.isfinite(v)):
            raise DataError("polygon has non-finite vertex coordinates")
        self.vertices = v

    def area(self) -> float:
        from .tiling import shoelace_area

        return shoelace_area(dedupe_vertices(self.vertices))


def dedupe_vertices(v: np.ndarray) -> np.ndarray:
    """Drop consecutive repeated vertices, including a closing repeat of the first."""
    v = np.asarray(v, dtype=np.float64)
    if len(v) == 0:
        return v
    keep = np.ones(len(v), dtype=bool)
    keep[1:] = np.any(v[1:] != v[:-1], axis=1)
    v = v[keep]
    if len(v) > 1 and np.all(v[0] == v[-1]):
        v = v[:-1]
    return v


@dataclass
class AnnotationSet:
    slide_id: str
    polygons: list[Polygon] = field(default_factory=list)


@dataclass
class ManifestEntry:
    slide_id: str
    image_path: Path
    annotation_path: Path
    split: str | None = None


@dataclass
class DatasetManifest:
    slides: list[ManifestEntry]
    root: Path = Path(".")

    def __len__(self):
        return len(self.slides)

    def ids(self) -> list[str]:
        return [s.slide_id for s in self.slides]

    def entry(self, slide_id: str) -> ManifestEntry:
        for s in self.slides:
            if s.slide_id == slide_id:
                return s
        raise KeyError(slide_id)


@dataclass(frozen=True)
class SynthConfig:
    slide_count: int = 20
    width: int = 1024
    height: int = 1024
    cancer_regions_per_slide: int = 2
    seed: int = 7
    min_patch_size: int = 256

    def validate(self):
        for name in ("slide_count", "width", "height", "cancer_regions_per_slide"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.width < self.min_patch_size or self.height < self.min_patch_size:
            raise ValueError(
                f"slide {self.width}x{self.height} is smaller than patch size {self.min_patch_size}"
            )
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


# ---------------------------------------------------------------------------
# loaders


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(records, list):
        raise DataError("manifest must be a JSON array of slide records")
    if not records:
        raise DataError("empty manifest")

    root = path.parent
    entries = []
    seen = set()
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise DataError(f"manifest record {i} is not an object")
        try:
            sid, image, ann = rec["slide_id"], rec["image"], rec["annotations"]
        except KeyError as exc:
            raise DataError(f"manifest record {i} missing field {exc.args[0]!r}") from exc
        if not all(isinstance(x, str) and x for x in (sid, image, ann)):
            raise DataError(f"manifest record {i}: slide_id, image and annotations must be non-empty strings")
        if sid in seen:
            raise DataError(f"duplicate slide_id {sid!r} in manifest")
        seen.add(sid)
        split = rec.get("split")
        if split not in (None, "train", "test"):
            raise DataError(f"manifest record {i}: split must be 'train' or 'test', got {split!r}")
        entries.append(ManifestEntry(sid, root / image, root / ann, split))
    return DatasetManifest(entries, root)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    records = []
    for e in manifest.slides:
        rec = {
            "slide_id": e.slide_id,
            "image": os.path.relpath(e.image_path, path.parent),
            "annotations": os.path.relpath(e.annotation_path, path.parent),
        }
        if e.split is not None:
            rec["split"] = e.split
        records.append(rec)
    path.write_text(json.dumps(records, indent=2) + "\n")


def _read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval; '#' comments allowed
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise DataError(f"{path}: unsupported PPM variant {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataError(f"{path}: bad PPM header") from exc
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM supported")
    _check_dims(path, w, h)
    body = data[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise DataError(f"{path}: truncated PPM pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def _check_dims(path, w, h):
    if w < 1 or h < 1:
        raise DataError(f"{path}: invalid dimensions {w}x{h}")
    if w > MAX_SLIDE_SIDE or h > MAX_SLIDE_SIDE:
        raise DataError(f"{path}: dimensions {w}x{h} exceed limit {MAX_SLIDE_SIDE}")


def load_slide(path, slide_id: str | None = None) -> SlideRaster:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"slide not found: {path}")
    sid = slide_id if slide_id is not None else path.stem
    if path.suffix.lower() in (".ppm", ".pnm"):
        return SlideRaster(sid, _read_ppm(path))
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise DataError(f"{path}: unsupported raster format {im.format}")
            _check_dims(path, *im.size)
            im.load()
            px = np.asarray(im.convert("RGB"))
    except DataError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise DataError(f"{path}: cannot decode image: {exc}") from exc
    return SlideRaster(sid, px)


def save_slide(slide: SlideRaster, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        header = f"P6\n{slide.width} {slide.height}\n255\n".encode()
        path.write_bytes(header + slide.tobytes())
    else:
        Image.fromarray(slide.pixels, "RGB").save(path, format="PNG")


def load_annotations(path) -> AnnotationSet:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"annotation file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "polygons" not in doc:
        raise DataError(f"{path}: expected an object with a 'polygons' list")
    polygons = []
    for i, poly in enumerate(doc["polygons"]):
        try:
            verts = poly["vertices"]
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}: polygon {i} has no vertices") from exc
        try:
            polygons.append(Polygon(np.asarray(verts, dtype=np.float64), poly.get("label", "cancer")))
        except (DataError, ValueError, TypeError) as exc:
            raise DataError(f"{path}: polygon {i}: {exc}") from exc
    return AnnotationSet(str(doc.get("slide_id", path.stem)), polygons)


def save_annotations(ann: AnnotationSet, path) -> None:
    doc = {
        "slide_id": ann.slide_id,
        "polygons": [
            {"label": p.label, "vertices": [[float(x), float(y)] for x, y in p.vertices]}
            for p in ann.polygons
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


# ---------------------------------------------------------------------------
# synthetic data


def _place_regions(rng, width, height, count, max_tries=1000):
    """Non-overlapping axis-aligned rectangles (x0, y0, x1, y1), integer corners."""
    side = min(width, height)
    lo, hi = max(8, side // 4), max(9, (2 * side) // 5)
    rects = []
    for _ in range(count):
        for _ in range(max_tries):
            w = int(rng.integers(lo, hi + 1))
            h = int(rng.integers(lo, hi + 1))
            if w > width or h > height:
                continue
            x0 = int(rng.integers(0, width - w + 1))
            y0 = int(rng.integers(0, height - h + 1))
            cand = (x0, y0, x0 + w, y0 + h)
            if all(cand[2] <= r[0] or r[2] <= cand[0] or cand[3] <= r[1] or r[3] <= cand[1] for r in rects):
                rects.append(cand)
                break
        else:
            raise ValueError(
                f"cannot fit {count} non-overlapping cancer regions in a {width}x{height} slide"
            )
    return rects


def synth_slide(config: SynthConfig, index: int):
    """Render slide ``index``; content depends only on (seed, index)."""
    rng = np.random.default_rng([config.seed, index])
    W, H = config.width, config.height
    noise = rng.random((H, W))
    smooth = uniform_filter(noise, size=9, mode="reflect")  # box blur, radius 4
    lo, hi = smooth.min(), smooth.max()
    gray = 96.0 + (smooth - lo) * (64.0 / (hi - lo)) if hi > lo else np.full_like(smooth, 128.0)
    gray = np.floor(gray + 0.5)

    rects = _place_regions(rng, W, H, config.cancer_regions_per_slide)
    for x0, y0, x1, y1 in rects:
        speckle = rng.random((y1 - y0, x1 - x0)) < 0.5
        gray[y0:y1, x0:x1] = np.where(speckle, 255.0, 0.0)

    rgb = np.stack([np.clip(gray + off, 0, 255) for off in CHANNEL_OFFSETS], axis=-1).astype(np.uint8)
    sid = f"synth{index:03d}"
    polys = [
        Polygon(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64))
        for x0, y0, x1, y1 in rects
    ]
    return SlideRaster(sid, rgb), AnnotationSet(sid, polys)


def generate_synthetic_dataset(config: SynthConfig, out_dir, threads: int = 1) -> DatasetManifest:
    config.validate()
    out = Path(out_dir)
    (out / "slides").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)

    def one(i):
        slide, ann = synth_slide(config, i)
        img = out / "slides" / f"{slide.id}.png"
        annp = out / "annotations" / f"{slide.id}.json"
        save_slide(slide, img)
        save_annotations(ann, annp)
        return ManifestEntry(slide.id, img, annp)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            entries = list(pool.map(one, range(config.slide_count)))
    else:
        entries = [one(i) for i in range(config.slide_count)]
    manifest = DatasetManifest(entries, out)
    save_manifest(manifest, out / "manifest.json")
    log.info("wrote %d synthetic slides to %s", len(entries), out)
    return manifest


def mean_adjacent_difference(gray: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean |I(x+1,y) - I(x,y)| over horizontally adjacent pairs (both inside ``mask``)."""
    g = np.asarray(gray, dtype=np.float64)
    d = np.abs(np.diff(g, axis=1))
    if mask is None:
        return float(d.mean())
    m = mask[:, 1:] & mask[:, :-1]
    return float(d[m].mean()) if m.any() else math.nan


# ---------------------------------------------------------------------------
# splitting


def split_by_slide(manifest: DatasetManifest, test_fraction: float, seed: int):
    """Seeded shuffle of slide ids, then a prefix (test) / suffix (train) cut."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    ids = manifest.ids()
    n = len(ids)
    if n < 2:
        raise ValueError(f"cannot split {n} slide(s) into non-empty train and test sets")
    n_test = math.floor(test_fraction * n + 0.5)
    n_test = min(max(n_test, 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    test = sorted(shuffled[:n_test], key=ids.index)
    train = sorted(shuffled[n_test:], key=ids.index)
    return train, test


def manifest_split(manifest: DatasetManifest, test_fraction: float, seed: int):
    """Use the manifest's split tags when every slide has one, otherwise split_by_slide."""
    tags = [e.split for e in manifest.slides]
    if all(t is not None for t in tags):
        train = [e.slide_id for e in manifest.slides if e.split == "train"]
        test = [e.slide_id for e in manifest.slides if e.split == "test"]
        if not train or not test:
            raise ValueError("manifest split tags leave the train or test set empty")
        return train, test
    return split_by_slide(manifest, test_fraction, seed)
