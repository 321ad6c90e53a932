"""Sample input volumes and reference outputs of one conv layer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .netcore.container import read_container, write_container
from .netcore.engine import forward
from .netcore.spec import NetworkSpec

MAX_VOLUMES = 100_000


@dataclass
class VolumeSet:
    volumes: np.ndarray       # N×(C·k·k), float64
    ref_outputs: np.ndarray   # N×F pre-activation outputs, float64
    layer_id: str
    provenance: np.ndarray    # N×3 (image index, out_y, out_x)

    def __len__(self) -> int:
        return self.volumes.shape[0]


def extract_patches(feature: np.ndarray, ys, xs, k: int, stride: int, padding: int) -> np.ndarray:
    """Flattened C×k×k windows of one padded C×H×W map at output coordinates."""
    if padding:
        feature = np.pad(feature, ((0, 0), (padding, padding), (padding, padding)))
    out = np.empty((len(ys), feature.shape[0] * k * k), dtype=feature.dtype)
    for row, (y, x) in enumerate(zip(ys, xs)):
        y0, x0 = y * stride, x * stride
        out[row] = feature[:, y0 : y0 + k, x0 : x0 + k].reshape(-1)
    return out


def sample_volumes(net: NetworkSpec, data, layer_id: str, image_fraction: float = 0.01,
                   volumes_per_image: int = 10, rng=None, *, max_volumes: int = MAX_VOLUMES,
                   batch_size: int = 128) -> VolumeSet:
    """Draw ``ceil(fraction·|data|)`` images, then ``volumes_per_image`` distinct
    output positions per image, and record the input patch and the layer's
    output at each position.  Rows beyond ``max_volumes`` are dropped.
    """
    layer = net.layer(layer_id)
    if layer.kind != "conv2d":
        raise ShapeError(f"{layer_id} is a {layer.kind} layer, volumes need a conv layer")
    if not 0.0 < image_fraction <= 1.0:
        raise ValueError("image_fraction must lie in (0, 1]")
    if volumes_per_image < 1:
        raise ValueError("volumes_per_image must be positive")
    rng = np.random.default_rng(0) if rng is None else rng

    n_data = len(data.labels)
    n_images = min(n_data, math.ceil(image_fraction * n_data))
    n_images = min(n_images, math.ceil(max_volumes / volumes_per_image))
    chosen = np.sort(rng.choice(n_data, n_images, replace=False))

    src = net.source_of(layer_id)
    _, ho, wo = net.shapes()[layer_id]
    per_image = volumes_per_image
    if per_image > ho * wo:
        raise ValueError(f"{layer_id} has only {ho * wo} output positions, asked for {per_image}")
    positions = np.stack([rng.choice(ho * wo, per_image, replace=False) for _ in chosen])

    k, s, p = layer.kernel_size, layer.stride, layer.padding
    vols, refs, prov = [], [], []
    for start in range(0, n_images, batch_size):
        idx = chosen[start : start + batch_size]
        _, trace = forward(net, data.images[idx], capture=[src, layer_id])
        feats, outs = trace[src], trace[layer_id]
        for j, img in enumerate(idx):
            pos = positions[start + j]
            ys, xs = pos // wo, pos % wo
            vols.append(extract_patches(feats[j].astype(np.float64), ys, xs, k, s, p))
            refs.append(outs[j][:, ys, xs].T.astype(np.float64))
            prov.append(np.stack([np.full(per_image, img), ys, xs], axis=1))

    vs = VolumeSet(np.concatenate(vols)[:max_volumes], np.concatenate(refs)[:max_volumes],
                   layer_id, np.concatenate(prov)[:max_volumes].astype(np.int64))
    check_consistency(vs, net.params[layer_id]["weight"], net.params[layer_id].get("bias"))
    return vs


def check_consistency(vs: VolumeSet, weight, bias, rtol: float = 1e-5) -> None:
    """Recompute ``W·X + b`` in float64 and compare with the captured outputs."""
    w = np.asarray(weight, dtype=np.float64).reshape(np.shape(weight)[0], -1)
    rec = vs.volumes @ w.T
    if bias is not None:
        rec += np.asarray(bias, dtype=np.float64)
    scale = np.linalg.norm(rec)
    if np.linalg.norm(rec - vs.ref_outputs) > rtol * max(scale, 1e-30):
        raise NumericError(f"{vs.layer_id}: captured outputs disagree with W·X + b")


def save_volume_set(vs: VolumeSet, path):
    tensors = {"volumes": vs.volumes, "ref_outputs": vs.ref_outputs,
               "provenance": vs.provenance.astype(np.float32)}
    return write_container(path, "volumes", {"layer_id": vs.layer_id}, tensors)


def load_volume_set(path) -> VolumeSet:
    manifest, t = read_container(path, "volumes")
    return VolumeSet(t["volumes"].astype(np.float64), t["ref_outputs"].astype(np.float64),
                     manifest["layer_id"], t["provenance"].astype(np.int64))
