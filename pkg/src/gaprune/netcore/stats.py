"""Parameter and FLOP accounting."""

from __future__ import annotations

import numpy as np

from .spec import NetworkSpec, param_shapes

_LEARNABLE = ("weight", "bias", "gamma", "beta")


def model_stats(net: NetworkSpec, input_shape=None) -> tuple[int, int]:
    """Return ``(params, flops)`` for one input sample.

    Params counts learnable tensors only (BN running statistics excluded).
    FLOPs count two operations per multiply-accumulate in conv and linear
    layers; pooling, normalisation and activations are free.
    """
    if input_shape is not None and tuple(input_shape) != net.input_shape:
        net = type(net)(net.layers, net.params, tuple(input_shape), net.blocks)
    shapes = net.shapes()
    params = 0
    macs = 0
    for layer in net.layers:
        for name, shape in param_shapes(layer).items():
            if name in _LEARNABLE:
                params += int(np.prod(shape))
        if layer.kind == "conv2d":
            _, ho, wo = shapes[layer.id]
            k = layer.kernel_size
            macs += layer.out_channels * ho * wo * layer.in_channels * k * k
        elif layer.kind == "linear":
            macs += layer.out_channels * layer.in_channels
    return params, 2 * macs
