"""Directory container: ``manifest.json`` plus one raw float32 blob per tensor.

Blobs are little-endian, row-major, with no header; shapes live in the
manifest.  The same layout stores models, volume sets and Hessians.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from ..errors import CorruptFileError
from .spec import LayerSpec, NetworkSpec

FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


def dump_json(obj, path) -> None:
    """Write JSON deterministically (sorted keys, trailing newline)."""
    text = json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def write_container(path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=_LE_F32)
        fname = f"{name}.bin"
        (path / fname).write_bytes(arr.tobytes(order="C"))
        entries.append({"name": name, "file": fname, "shape": list(arr.shape)})
    manifest = {"format_version": FORMAT_VERSION, "kind": kind, "dtype": "float32",
                "tensors": entries, **meta}
    dump_json(manifest, path / "manifest.json")
    return path


def read_container(path, kind: str | None = None):
    """Return ``(manifest, tensors)``; tensors are float32 arrays."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CorruptFileError(f"{path}: missing manifest.json") from None
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{path}: malformed manifest ({exc})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CorruptFileError(f"{path}: unsupported format version {manifest.get('format_version')}")
    if kind is not None and manifest.get("kind") != kind:
        raise CorruptFileError(f"{path}: expected a {kind} container, found {manifest.get('kind')}")
    tensors = {}
    for entry in manifest["tensors"]:
        blob = path / entry["file"]
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape)) * 4
        if not blob.exists() or os.path.getsize(blob) != expected:
            raise CorruptFileError(f"{blob}: expected {expected} bytes for shape {shape}")
        tensors[entry["name"]] = np.fromfile(blob, dtype=_LE_F32).reshape(shape).astype(np.float32)
    return manifest, tensors


def save_model(net: NetworkSpec, path) -> Path:
    tensors = {f"{lid}.{role}": arr for lid, p in net.params.items() for role, arr in p.items()}
    meta = {
        "input_shape": list(net.input_shape),
        "layers": [layer.to_dict() for layer in net.layers],
        "blocks": net.blocks,
    }
    return write_container(path, "model", meta, tensors)


def load_model(path, dtype=np.float32) -> NetworkSpec:
    manifest, tensors = read_container(path, "model")
    layers = [LayerSpec.from_dict(d) for d in manifest["layers"]]
    params: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in tensors.items():
        lid, role = name.rsplit(".", 1)
        params.setdefault(lid, {})[role] = arr.astype(dtype)
    net = NetworkSpec(layers, params, tuple(manifest["input_shape"]), manifest.get("blocks", []))
    net.validate()
    return net
