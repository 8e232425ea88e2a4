"""CNN model files: a JSON document with CRC-checked base64 float32 blobs."""

from __future__ import annotations

import base64
import json
import zlib
from pathlib import Path

import numpy as np

from .layers import ShapeError
from .network import Arch, CnnModel, Network

FORMAT_VERSION = 1


class ModelFileError(ValueError):
    pass


def _blob(name, role, arr):
    raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return {
        "name": name,
        "role": role,
        "shape": list(arr.shape),
        "crc32": zlib.crc32(raw),
        "data": base64.b64encode(raw).decode("ascii"),
    }


def save_model(model: CnnModel, path) -> None:
    net = model.net
    blobs = [_blob(n, "param", a) for n, a in net.parameters().items()]
    blobs += [_blob(n, "buffer", a) for n, a in net.buffers().items()]
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "cnn",
        "arch": net.arch.to_json(),
        "metadata": model.metadata,
        "seed": model.metadata.get("seed"),
        "blobs": blobs,
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def _decode(blob) -> np.ndarray:
    try:
        raw = base64.b64decode(blob["data"], validate=True)
    except (ValueError, KeyError) as exc:
        raise ModelFileError(f"checksum failure: blob {blob.get('name')!r} is not valid base64") from exc
    if zlib.crc32(raw) != blob["crc32"]:
        raise ModelFileError(f"checksum failure in blob {blob['name']!r}")
    shape = tuple(blob["shape"])
    if len(raw) != 4 * int(np.prod(shape, dtype=np.int64)):
        raise ModelFileError(f"blob {blob['name']!r}: size does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def read_model_file(path) -> dict:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"checksum failure: {path} is truncated or corrupt ({exc.msg})") from exc
    if not isinstance(doc, dict) or doc.get("kind") != "cnn":
        raise ModelFileError(f"{path}: not a CNN model file")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported format_version {doc.get('format_version')}")
    return doc


def load_model(path) -> CnnModel:
    doc = read_model_file(path)
    net = Network(Arch.from_json(doc["arch"]), dtype=np.float32)
    net.init(0)
    state = net.state()
    seen = set()
    for blob in doc["blobs"]:
        name = blob["name"]
        if name not in state:
            raise ModelFileError(f"{path}: unexpected parameter {name!r} for this architecture")
        arr = _decode(blob)
        if arr.shape != state[name].shape:
            raise ModelFileError(f"{path}: parameter {name!r} has shape {arr.shape}, expected {state[name].shape}")
        net.set_parameter(name, arr)
        seen.add(name)
    missing = set(state) - seen
    if missing:
        raise ModelFileError(f"{path}: missing parameters {sorted(missing)}")
    return CnnModel(net, dict(doc.get("metadata") or {}))


def load_matching(net: Network, source: CnnModel | str | Path) -> list[str]:
    """Copy every same-named parameter/buffer from ``source``; shapes must agree."""
    src = load_model(source) if isinstance(source, (str, Path)) else source
    target = net.state()
    copied = []
    for name, arr in src.net.state().items():
        if name not in target:
            continue
        if arr.shape != target[name].shape:
            layer = name.rsplit(".", 1)[0]
            raise ShapeError(
                f"cannot initialize layer {layer!r}: parameter {name!r} has shape {arr.shape} "
                f"in the source model but {target[name].shape} in the target architecture"
            )
        net.set_parameter(name, arr)
        copied.append(name)
    return copied
