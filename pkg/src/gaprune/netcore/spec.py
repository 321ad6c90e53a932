"""Network description types: layers, parameter storage and shape inference."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields

import numpy as np

from ..errors import ShapeError

LAYER_KINDS = (
    "conv2d",
    "batchnorm",
    "relu",
    "maxpool",
    "avgpool",
    "global-avg-pool",
    "linear",
    "flatten",
    "residual-add",
)

INPUT = "input"


@dataclass
class LayerSpec:
    """One node of the layer graph.

    ``source`` names the layer whose output feeds this one (``None`` means the
    previous layer in list order, ``"input"`` the network input).  A
    ``residual-add`` layer adds the output of ``operand`` to its source.
    Linear layers reuse ``in_channels``/``out_channels`` for their feature
    counts; pooling layers use ``kernel_size``/``stride``.
    """

    id: str
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 1
    stride: int = 1
    padding: int = 0
    bias: bool = True
    eps: float = 1e-5
    momentum: float = 0.1
    source: str | None = None
    operand: str | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")

    def to_dict(self) -> dict:
        out = {"id": self.id, "kind": self.kind}
        for f in fields(self):
            if f.name in ("id", "kind"):
                continue
            value = getattr(self, f.name)
            if value != f.default:
                out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def param_shapes(layer: LayerSpec) -> dict[str, tuple[int, ...]]:
    """Shapes of the parameter tensors a layer owns (learnable and buffers)."""
    if layer.kind == "conv2d":
        k = layer.kernel_size
        shapes = {"weight": (layer.out_channels, layer.in_channels, k, k)}
        if layer.bias:
            shapes["bias"] = (layer.out_channels,)
        return shapes
    if layer.kind == "linear":
        shapes = {"weight": (layer.out_channels, layer.in_channels)}
        if layer.bias:
            shapes["bias"] = (layer.out_channels,)
        return shapes
    if layer.kind == "batchnorm":
        c = (layer.out_channels,)
        return {"gamma": c, "beta": c, "running_mean": c, "running_var": c}
    return {}


LEARNABLE = ("weight", "bias", "gamma", "beta")


@dataclass
class NetworkSpec:
    layers: list[LayerSpec]
    params: dict[str, dict[str, np.ndarray]]
    input_shape: tuple[int, int, int]
    blocks: list[list[str]] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self._index = {layer.id: i for i, layer in enumerate(self.layers)}
        if len(self._index) != len(self.layers):
            raise ShapeError("duplicate layer ids")
        if INPUT in self._index:
            raise ShapeError(f"layer id {INPUT!r} is reserved")

    # lookup -----------------------------------------------------------------

    def layer(self, layer_id: str) -> LayerSpec:
        try:
            return self.layers[self._index[layer_id]]
        except KeyError:
            raise KeyError(f"no layer {layer_id!r}") from None

    def index(self, layer_id: str) -> int:
        return self._index[layer_id]

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self._index

    @property
    def layer_ids(self) -> list[str]:
        return [layer.id for layer in self.layers]

    @property
    def conv_ids(self) -> list[str]:
        return [layer.id for layer in self.layers if layer.kind == "conv2d"]

    @property
    def dtype(self) -> np.dtype:
        for p in self.params.values():
            for arr in p.values():
                return arr.dtype
        return np.dtype(np.float64)

    @property
    def num_classes(self) -> int:
        return self.output_shape()[0]

    def source_of(self, layer_id: str) -> str:
        """Id of the layer (or ``"input"``) producing this layer's input."""
        i = self._index[layer_id]
        layer = self.layers[i]
        if layer.source is not None:
            return layer.source
        return INPUT if i == 0 else self.layers[i - 1].id

    def consumers(self) -> dict[str, list[str]]:
        """Map from each id (including ``"input"``) to the layers reading it."""
        out: dict[str, list[str]] = {INPUT: []}
        for layer in self.layers:
            out.setdefault(layer.id, [])
        for layer in self.layers:
            out[self.source_of(layer.id)].append(layer.id)
            if layer.operand is not None:
                out[layer.operand].append(layer.id)
        return out

    def block_of(self, layer_id: str) -> list[str] | None:
        for block in self.blocks:
            if layer_id in block:
                return block
        return None

    # shapes -----------------------------------------------------------------

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Per-sample output shape of every layer; validates consistency."""
        shapes: dict[str, tuple[int, ...]] = {INPUT: self.input_shape}
        for layer in self.layers:
            src = self.source_of(layer.id)
            if src not in shapes:
                raise ShapeError(f"{layer.id}: source {src!r} is not an earlier layer")
            shapes[layer.id] = _infer(layer, shapes[src], shapes)
        return shapes

    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[self.layers[-1].id]

    def validate(self) -> None:
        self.shapes()
        for layer in self.layers:
            want = param_shapes(layer)
            have = self.params.get(layer.id, {})
            if set(want) != set(have):
                raise ShapeError(f"{layer.id}: expected params {sorted(want)}, got {sorted(have)}")
            for name, shape in want.items():
                if tuple(have[name].shape) != shape:
                    raise ShapeError(
                        f"{layer.id}.{name}: shape {tuple(have[name].shape)} != {shape}"
                    )

    # copying ----------------------------------------------------------------

    def copy(self) -> "NetworkSpec":
        return NetworkSpec(
            layers=copy.deepcopy(self.layers),
            params={lid: {k: v.copy() for k, v in p.items()} for lid, p in self.params.items()},
            input_shape=self.input_shape,
            blocks=copy.deepcopy(self.blocks),
        )

    def astype(self, dtype) -> "NetworkSpec":
        net = self.copy()
        for p in net.params.values():
            for k in p:
                p[k] = p[k].astype(dtype)
        return net

    def learnable(self):
        """Yield ``(layer_id, name, array)`` for every learnable tensor."""
        for layer in self.layers:
            for name, arr in self.params.get(layer.id, {}).items():
                if name in LEARNABLE:
                    yield layer.id, name, arr


def _infer(layer: LayerSpec, shape: tuple[int, ...], known: dict) -> tuple[int, ...]:
    kind = layer.kind
    if kind == "conv2d":
        if len(shape) != 3:
            raise ShapeError(f"{layer.id}: conv2d expects C×H×W input, got {shape}")
        c, h, w = shape
        if c != layer.in_channels:
            raise ShapeError(f"{layer.id}: in_channels {layer.in_channels} != producer channels {c}")
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{layer.id}: kernel larger than padded input")
        return (layer.out_channels, ho, wo)
    if kind == "batchnorm":
        if shape[0] != layer.out_channels:
            raise ShapeError(f"{layer.id}: batchnorm features {layer.out_channels} != {shape[0]}")
        return shape
    if kind == "relu":
        return shape
    if kind in ("maxpool", "avgpool"):
        if len(shape) != 3:
            raise ShapeError(f"{layer.id}: pooling expects C×H×W input")
        c, h, w = shape
        k, s = layer.kernel_size, layer.stride
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{layer.id}: pooling window larger than input")
        return (c, ho, wo)
    if kind == "global-avg-pool":
        if len(shape) != 3:
            raise ShapeError(f"{layer.id}: global-avg-pool expects C×H×W input")
        return (shape[0],)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "linear":
        if len(shape) != 1 or shape[0] != layer.in_channels:
            raise ShapeError(f"{layer.id}: linear expects ({layer.in_channels},), got {shape}")
        return (layer.out_channels,)
    if kind == "residual-add":
        other = known.get(layer.operand)
        if other is None:
            raise ShapeError(f"{layer.id}: operand {layer.operand!r} is not an earlier layer")
        if tuple(other) != tuple(shape):
            raise ShapeError(f"{layer.id}: residual operands differ {shape} vs {other}")
        return shape
    raise ShapeError(f"unknown layer kind {kind!r}")


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    lr_schedule: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.lr_schedule = [(int(e), float(m)) for e, m in self.lr_schedule]
        epochs = [e for e, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("lr_schedule epochs must be strictly increasing")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for ``epoch``: base rate times the last multiplier reached."""
        mult = 1.0
        for e, m in self.lr_schedule:
            if epoch >= e:
                mult = m
        return self.learning_rate * mult
