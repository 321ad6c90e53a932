"""Builders for the architectures used by the toolkit."""

from __future__ import annotations

import numpy as np

from .spec import LayerSpec, NetworkSpec, param_shapes

VGG16_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]


class _Builder:
    def __init__(self, input_shape, rng, dtype):
        self.layers: list[LayerSpec] = []
        self.params: dict[str, dict[str, np.ndarray]] = {}
        self.input_shape = tuple(input_shape)
        self.channels = input_shape[0]
        self.rng = rng
        self.dtype = dtype

    def add(self, layer: LayerSpec) -> str:
        self.layers.append(layer)
        shapes = param_shapes(layer)
        if shapes:
            self.params[layer.id] = {n: self._init(layer, n, s) for n, s in shapes.items()}
        return layer.id

    def _init(self, layer, name, shape):
        if name == "weight":
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in) if layer.kind == "conv2d" else np.sqrt(1.0 / fan_in)
            return (self.rng.standard_normal(shape) * std).astype(self.dtype)
        if name in ("gamma", "running_var"):
            return np.ones(shape, dtype=self.dtype)
        return np.zeros(shape, dtype=self.dtype)

    def conv_bn_relu(self, name, out, k=3, stride=1, padding=1, source=None, relu=True):
        self.add(LayerSpec(f"conv{name}", "conv2d", in_channels=self.channels, out_channels=out,
                           kernel_size=k, stride=stride, padding=padding, source=source))
        last = self.add(LayerSpec(f"bn{name}", "batchnorm", out_channels=out))
        if relu:
            last = self.add(LayerSpec(f"relu{name}", "relu"))
        self.channels = out
        return last

    def build(self, blocks=None) -> NetworkSpec:
        net = NetworkSpec(self.layers, self.params, self.input_shape, blocks or [])
        net.validate()
        return net


def vgg16(num_classes=10, input_shape=(3, 32, 32), seed=0, dtype=np.float32) -> NetworkSpec:
    """VGG-16 with batchnorm, a global-average-pool head and one linear layer."""
    b = _Builder(input_shape, np.random.default_rng(seed), dtype)
    conv, pool = 0, 0
    for v in VGG16_CFG:
        if v == "M":
            pool += 1
            b.add(LayerSpec(f"pool{pool}", "maxpool", kernel_size=2, stride=2))
        else:
            conv += 1
            b.conv_bn_relu(conv, v)
    b.add(LayerSpec("gap", "global-avg-pool"))
    b.add(LayerSpec("fc", "linear", in_channels=b.channels, out_channels=num_classes))
    return b.build()


def small_cnn(num_classes=10, input_shape=(1, 28, 28), widths=(16, 32, 32, 64), seed=0,
              dtype=np.float32) -> NetworkSpec:
    """Four conv-BN-ReLU stages with two 2×2 max-pools, GAP and a linear head.

    Pools follow conv1 and conv3, so the middle pair conv2/conv3 runs at half
    resolution and conv4 at quarter resolution.
    """
    b = _Builder(input_shape, np.random.default_rng(seed), dtype)
    for i, w in enumerate(widths, start=1):
        b.conv_bn_relu(i, w)
        if i in (1, 3):
            b.add(LayerSpec(f"pool{i}", "maxpool", kernel_size=2, stride=2))
    b.add(LayerSpec("gap", "global-avg-pool"))
    b.add(LayerSpec("fc", "linear", in_channels=b.channels, out_channels=num_classes))
    return b.build()


def resnet_bottleneck(stages=((16, 1), (32, 1)), num_classes=10, input_shape=(3, 32, 32),
                      stem=16, expansion=4, seed=0, dtype=np.float32) -> NetworkSpec:
    """Bottleneck ResNet: stem conv, then per stage ``(width, blocks)``.

    Each block is 1×1 → 3×3 → 1×1 convs with a residual add; the first block
    of a stage uses a strided 1×1 projection shortcut when shapes change.
    ``blocks`` on the result lists every block's layer ids.
    """
    b = _Builder(input_shape, np.random.default_rng(seed), dtype)
    prev = b.conv_bn_relu("0", stem)
    blocks = []
    n = 0
    for s, (width, count) in enumerate(stages):
        for j in range(count):
            n += 1
            stride = 2 if (s > 0 and j == 0) else 1
            start = len(b.layers)
            in_ch = b.channels
            b.conv_bn_relu(f"{n}a", width, k=1, padding=0)
            b.conv_bn_relu(f"{n}b", width, k=3, stride=stride, padding=1)
            main = b.conv_bn_relu(f"{n}c", width * expansion, k=1, padding=0, relu=False)
            shortcut = prev
            if stride != 1 or in_ch != width * expansion:
                b.channels = in_ch
                shortcut = b.conv_bn_relu(f"{n}s", width * expansion, k=1, stride=stride,
                                          padding=0, source=prev, relu=False)
                source = main
            else:
                source = None
            b.add(LayerSpec(f"add{n}", "residual-add", source=source, operand=shortcut))
            prev = b.add(LayerSpec(f"relu{n}", "relu"))
            b.channels = width * expansion
            blocks.append([layer.id for layer in b.layers[start:]])
    b.add(LayerSpec("gap", "global-avg-pool"))
    b.add(LayerSpec("fc", "linear", in_channels=b.channels, out_channels=num_classes))
    return b.build(blocks)


def resnet50(num_classes=10, input_shape=(3, 32, 32), seed=0, dtype=np.float32) -> NetworkSpec:
    """ResNet-50 bottleneck layout (3-4-6-3 blocks) with a 3×3 CIFAR stem."""
    return resnet_bottleneck(((64, 3), (128, 4), (256, 6), (512, 3)), num_classes, input_shape,
                             stem=64, seed=seed, dtype=dtype)


ARCHITECTURES = {
    "vgg16": vgg16,
    "small_cnn": small_cnn,
    "resnet_bottleneck": resnet_bottleneck,
    "resnet50": resnet50,
}


def build(arch: str, **kwargs) -> NetworkSpec:
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    return ARCHITECTURES[arch](**kwargs)
