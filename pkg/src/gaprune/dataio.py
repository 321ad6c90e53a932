"""Dataset loading (IDX, CIFAR binary, synthetic), normalisation and augmentation."""

from __future__ import annotations

import gzip
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptFileError

CIFAR_RECORD = 1 + 3 * 32 * 32

_IDX_DTYPES = {0x08: np.dtype("u1"), 0x09: np.dtype("i1"), 0x0B: np.dtype(">i2"),
               0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str
    mean: np.ndarray
    std: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.labels) == 0 or len(self.images) != len(self.labels):
            raise ValueError("dataset needs N > 0 images with one label each")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels outside [0, num_classes)")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("non-finite pixel values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def normalization(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean, self.std

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.split, self.mean, self.std,
                       self.num_classes)

    def denormalize(self, x: np.ndarray | None = None) -> np.ndarray:
        x = self.images if x is None else x
        return denormalize(x, self.mean, self.std)


def normalize(x: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return (x - mean) / std


def denormalize(x: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return x * std + mean


def _finish(raw01: np.ndarray, labels: np.ndarray, split: str, num_classes: int, normalization,
            dtype) -> Dataset:
    """Scale-[0,1] images → normalised :class:`Dataset`."""
    if normalization is None:
        mean = raw01.mean(axis=(0, 2, 3))
        std = raw01.std(axis=(0, 2, 3))
        std = np.where(std > 0, std, 1.0)
    else:
        mean, std = (np.asarray(v, dtype=np.float64) for v in normalization)
    images = normalize(raw01, mean, std).astype(dtype)
    return Dataset(images, labels.astype(np.int64), split, np.asarray(mean, np.float64),
                   np.asarray(std, np.float64), num_classes)


# ---------------------------------------------------------------------------
# IDX


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (big-endian magic, dims, payload)."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0 or data[2] not in _IDX_DTYPES:
        raise CorruptFileError(f"{path}: bad IDX magic number")
    dtype = _IDX_DTYPES[data[2]]
    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise CorruptFileError(f"{path}: truncated IDX header")
    dims = tuple(int.from_bytes(data[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim))
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(data) - header != expected:
        raise CorruptFileError(
            f"{path}: payload is {len(data) - header} bytes, header promises {expected}")
    return np.frombuffer(data, dtype=dtype, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = {np.dtype("u1"): 0x08, np.dtype("i1"): 0x09}.get(array.dtype)
    if code is None:
        raise ValueError("write_idx supports uint8/int8 arrays")
    header = bytes([0, 0, code, array.ndim]) + b"".join(
        int(d).to_bytes(4, "big") for d in array.shape)
    Path(path).write_bytes(header + array.tobytes())


_IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{directory}: no {stem}[.gz]")


def _load_idx(source, split):
    if isinstance(source, dict):
        img_path, lbl_path = source["images"], source["labels"]
    else:
        directory = Path(source)
        img_path, lbl_path = (_find(directory, s) for s in _IDX_NAMES[split])
    images = read_idx(img_path)
    labels = read_idx(lbl_path)
    if images.ndim == 3:
        images = images[:, None, :, :]
    if images.ndim != 4 or labels.ndim != 1 or len(images) != len(labels):
        raise CorruptFileError(f"{img_path}: image/label counts or ranks disagree")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# CIFAR binary


def read_cifar_binary(path):
    """Parse a CIFAR-10 binary batch: records of 1 label byte + 3072 pixels."""
    size = os.path.getsize(path)
    if size == 0 or size % CIFAR_RECORD:
        raise CorruptFileError(f"{path}: size {size} is not a multiple of {CIFAR_RECORD}")
    raw = np.fromfile(path, dtype=np.uint8).reshape(size // CIFAR_RECORD, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise CorruptFileError(f"{path}: label byte outside 0..9")
    return raw[:, 1:].reshape(-1, 3, 32, 32), labels


def _load_cifar(source, split):
    path = Path(source)
    if path.is_dir():
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        files = [path / n for n in names if (path / n).exists()]
        if not files:
            raise FileNotFoundError(f"{path}: no CIFAR {split} batches")
    else:
        files = [path]
    parts = [read_cifar_binary(f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return images.astype(np.float64) / 255.0, labels


# ---------------------------------------------------------------------------
# synthetic generators


def _split_rng(seed: int, split: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), 0 if split == "train" else 1])


def _blobs(spec, split):
    """Class prototypes (smoothed noise) plus per-sample noise, in [0, 1]."""
    n, classes = int(spec["n"]), int(spec.get("classes", 2))
    shape = tuple(spec.get("shape", (1, 8, 8)))
    proto_rng = np.random.default_rng([int(spec["seed"]), 2])
    protos = proto_rng.random((classes, *shape))
    rng = _split_rng(spec["seed"], split)
    labels = rng.integers(0, classes, n)
    noise = float(spec.get("noise", 0.15))
    images = np.clip(protos[labels] + noise * rng.standard_normal((n, *shape)), 0.0, 1.0)
    return images, labels


def _ellipse(cx, cy, rx, ry, a0=0.0, a1=2 * math.pi, steps=20):
    t = np.linspace(a0, a1, steps)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _poly(*pts):
    return np.asarray(pts, dtype=np.float64)


DIGIT_STROKES = {
    0: [_ellipse(0.5, 0.5, 0.28, 0.4, steps=24)],
    1: [_poly((0.35, 0.25), (0.52, 0.1), (0.52, 0.9))],
    2: [_poly((0.25, 0.3), (0.35, 0.14), (0.55, 0.1), (0.72, 0.2), (0.72, 0.38), (0.5, 0.6),
              (0.25, 0.9), (0.8, 0.9))],
    3: [_poly((0.25, 0.15), (0.6, 0.1), (0.75, 0.25), (0.6, 0.45), (0.4, 0.48)),
        _poly((0.6, 0.48), (0.78, 0.65), (0.7, 0.85), (0.45, 0.92), (0.22, 0.82))],
    4: [_poly((0.65, 0.9), (0.65, 0.1), (0.2, 0.65), (0.82, 0.65))],
    5: [_poly((0.75, 0.1), (0.32, 0.1), (0.28, 0.45), (0.55, 0.4), (0.75, 0.55), (0.75, 0.78),
              (0.55, 0.92), (0.25, 0.85))],
    6: [_poly((0.7, 0.12), (0.45, 0.2), (0.3, 0.45), (0.28, 0.7)),
        _ellipse(0.5, 0.69, 0.22, 0.21, steps=20)],
    7: [_poly((0.2, 0.1), (0.8, 0.1), (0.45, 0.9))],
    8: [_ellipse(0.5, 0.29, 0.2, 0.19, steps=18), _ellipse(0.5, 0.7, 0.25, 0.21, steps=20)],
    9: [_ellipse(0.5, 0.31, 0.22, 0.2, steps=18), _poly((0.72, 0.31), (0.68, 0.6), (0.55, 0.9))],
}


def _segment_distance(pix, a, b):
    ab = b - a
    denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
    ap = pix[:, None, :] - a[None, :, :]
    t = np.clip((ap * ab[None]).sum(axis=2) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.sqrt(((pix[:, None, :] - closest) ** 2).sum(axis=2)).min(axis=1)


def render_digit(label: int, rng: np.random.Generator, size: int = 28, *,
                 jitter: float = 0.04, clutter: float = 0.3) -> np.ndarray:
    """Draw one handwriting-like digit as a size×size image in [0, 1].

    ``jitter`` perturbs stroke control points; with probability ``clutter``
    a short stray stroke is added.
    """
    angle = rng.normal(0.0, 0.22)
    shear = rng.normal(0.0, 0.2)
    sx, sy = rng.uniform(0.7, 1.1), rng.uniform(0.8, 1.1)
    shift = rng.normal(0.0, 0.05, size=2)
    c, s = math.cos(angle), math.sin(angle)
    affine = np.array([[c, -s], [s, c]]) @ np.array([[sx, shear], [0.0, sy]])
    segs_a, segs_b = [], []
    strokes = list(DIGIT_STROKES[label])
    if rng.random() < clutter:
        start = rng.uniform(0.0, 1.0, size=2)
        strokes.append(np.stack([start, start + rng.normal(0.0, 0.2, size=2)]))
    for stroke in strokes:
        pts = stroke + rng.normal(0.0, jitter, size=stroke.shape)
        pts = (pts - 0.5) @ affine.T + 0.5 + shift
        segs_a.append(pts[:-1])
        segs_b.append(pts[1:])
    a, b = np.concatenate(segs_a), np.concatenate(segs_b)
    # unit square maps onto the central 20×20 pixels, as in MNIST
    margin = (size - 20) / 2
    coords = (np.arange(size) + 0.5 - margin) / 20.0
    gx, gy = np.meshgrid(coords, coords)
    pix = np.stack([gx.ravel(), gy.ravel()], axis=1)
    dist = _segment_distance(pix, a, b) * 20.0
    width = rng.uniform(0.8, 1.8)
    img = np.clip(width - dist + 0.5, 0.0, 1.0).reshape(size, size)
    return img


def _digits(spec, split):
    n = int(spec["n"])
    size = int(spec.get("size", 28))
    rng = _split_rng(spec["seed"], split)
    labels = rng.integers(0, 10, n)
    jitter, clutter = float(spec.get("jitter", 0.04)), float(spec.get("clutter", 0.3))
    images = np.stack([render_digit(int(y), rng, size, jitter=jitter, clutter=clutter)
                       for y in labels])[:, None]
    noise = float(spec.get("noise", 0.08))
    if noise:
        images = np.clip(images + noise * rng.standard_normal(images.shape), 0.0, 1.0)
    return images, labels


SYNTHETIC_KINDS = {"blobs": _blobs, "digits": _digits}


def synthesize_digits_idx(directory, seed: int, n_train: int, n_test: int) -> Path:
    """Write a stroke-drawn digits set as MNIST-named IDX files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", n_train), ("test", n_test)):
        images, labels = _digits({"seed": seed, "n": n}, split)
        img_name, lbl_name = _IDX_NAMES[split]
        write_idx(directory / img_name, np.round(images[:, 0] * 255).astype(np.uint8))
        write_idx(directory / lbl_name, labels.astype(np.uint8))
    return directory


# ---------------------------------------------------------------------------


def load_dataset(fmt: str, source, split: str = "train", *, normalization=None, limit=None,
                 num_classes=None, dtype=np.float32) -> Dataset:
    """Load ``split`` from an ``idx`` directory, a ``cifar-binary`` path or a
    ``synthetic`` spec dict.

    Pixels are scaled to [0, 1] and normalised per channel, with statistics
    of this split unless ``normalization=(mean, std)`` is given.  ``limit``
    keeps the first ``limit`` samples.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', not {split!r}")
    if fmt == "idx":
        raw, labels = _load_idx(source, split)
        classes = num_classes or 10
    elif fmt == "cifar-binary":
        raw, labels = _load_cifar(source, split)
        classes = num_classes or 10
    elif fmt == "synthetic":
        kind = source.get("kind", "blobs")
        if kind not in SYNTHETIC_KINDS:
            raise ValueError(f"unknown synthetic kind {kind!r}")
        raw, labels = SYNTHETIC_KINDS[kind](source, split)
        classes = num_classes or (10 if kind == "digits" else int(source.get("classes", 2)))
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    if limit is not None:
        raw, labels = raw[:limit], labels[:limit]
    return _finish(raw, labels, split, classes, normalization, dtype)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentPolicy:
    pad_crop: int = 0
    flip_prob: float = 0.0
    enabled: bool = True
    fill: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if self.pad_crop < 0:
            raise ValueError("pad_crop must be nonnegative")

    @property
    def active(self) -> bool:
        return self.enabled and (self.pad_crop > 0 or self.flip_prob > 0)


def augment(batch: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Pad-and-random-crop then random horizontal flip, per image."""
    if not policy.active:
        return batch
    out = batch
    n, _, h, w = batch.shape
    if policy.pad_crop:
        p = policy.pad_crop
        padded = np.pad(batch, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=policy.fill)
        dy = rng.integers(0, 2 * p + 1, n)
        dx = rng.integers(0, 2 * p + 1, n)
        out = np.empty_like(batch)
        for i in range(n):
            out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    if policy.flip_prob:
        flip = rng.random(n) < policy.flip_prob
        if flip.any():
            out = out.copy() if out is batch else out
            out[flip] = out[flip][..., ::-1]
    return out
