"""Forward and backward passes over a :class:`NetworkSpec`.

Every layer kind has a forward function returning ``(output, cache)`` and a
backward function mapping ``(cache, dout)`` to ``(dinput, grads)`` (plus the
operand gradient for ``residual-add``).  Convolutions use im2col so that the
reductions are plain matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NumericError, ShapeError
from .spec import INPUT, LayerSpec, NetworkSpec


# ---------------------------------------------------------------------------
# convolution helpers


def im2col(x: np.ndarray, k: int, stride: int = 1, padding: int = 0):
    """Unfold ``x`` (N×C×H×W) into rows of flattened C×k×k patches.

    Rows are ordered (n, out_y, out_x); columns follow the row-major layout of
    a C×k×k filter, so ``cols @ W.reshape(F, -1).T`` is the convolution.
    """
    n, c, _, _ = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def col2im(dcols, x_shape, k, stride, padding, ho, wo):
    n, c, h, w = x_shape
    d = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[..., i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def _conv_fwd(layer, p, x, train):
    k = layer.kernel_size
    cols, ho, wo = im2col(x, k, layer.stride, layer.padding)
    wmat = p["weight"].reshape(layer.out_channels, -1)
    out = cols @ wmat.T
    if "bias" in p:
        out += p["bias"]
    out = out.reshape(x.shape[0], ho, wo, layer.out_channels).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, x.shape, ho, wo)


def _conv_bwd(layer, p, cache, dout):
    cols, x_shape, ho, wo = cache
    f = layer.out_channels
    dy = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    grads = {"weight": (dy.T @ cols).reshape(p["weight"].shape)}
    if "bias" in p:
        grads["bias"] = dy.sum(axis=0)
    dcols = dy @ p["weight"].reshape(f, -1)
    dx = col2im(dcols, x_shape, layer.kernel_size, layer.stride, layer.padding, ho, wo)
    return dx, grads


# ---------------------------------------------------------------------------
# batch normalisation


def _bn_axes(x):
    return (0, 2, 3) if x.ndim == 4 else (0,)


def _bn_view(v, x):
    return v.reshape(1, -1, 1, 1) if x.ndim == 4 else v.reshape(1, -1)


def _bn_fwd(layer, p, x, train):
    axes = _bn_axes(x)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = x.size // x.shape[1]
        mom = layer.momentum
        unbiased = var * m / max(m - 1, 1)
        p["running_mean"][...] = (1 - mom) * p["running_mean"] + mom * mean
        p["running_var"][...] = (1 - mom) * p["running_var"] + mom * unbiased
    else:
        mean, var = p["running_mean"], p["running_var"]
    inv = 1.0 / np.sqrt(var + layer.eps)
    xhat = (x - _bn_view(mean, x)) * _bn_view(inv, x)
    out = xhat * _bn_view(p["gamma"], x) + _bn_view(p["beta"], x)
    return out.astype(x.dtype, copy=False), (xhat, inv, train)


def _bn_bwd(layer, p, cache, dout):
    xhat, inv, train = cache
    axes = _bn_axes(dout)
    grads = {"gamma": (dout * xhat).sum(axis=axes), "beta": dout.sum(axis=axes)}
    dxhat = dout * _bn_view(p["gamma"], dout)
    if train:
        m = dout.size // dout.shape[1]
        s1 = dxhat.sum(axis=axes)
        s2 = (dxhat * xhat).sum(axis=axes)
        dx = (dxhat - (_bn_view(s1, dout) + xhat * _bn_view(s2, dout)) / m) * _bn_view(inv, dout)
    else:
        dx = dxhat * _bn_view(inv, dout)
    return dx, grads


# ---------------------------------------------------------------------------
# elementwise, pooling, dense


def _relu_fwd(layer, p, x, train):
    mask = x > 0
    return x * mask, mask


def _relu_bwd(layer, p, mask, dout):
    return dout * mask, {}


def _pool_windows(layer, x):
    k, s = layer.kernel_size, layer.stride
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    return win.reshape(*win.shape[:4], k * k)


def _maxpool_fwd(layer, p, x, train):
    win = _pool_windows(layer, x)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def _maxpool_bwd(layer, p, cache, dout):
    arg, x_shape = cache
    k, s = layer.kernel_size, layer.stride
    ho, wo = dout.shape[2], dout.shape[3]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += dout * (arg == i * k + j)
    return dx, {}


def _avgpool_fwd(layer, p, x, train):
    return _pool_windows(layer, x).mean(axis=-1), x.shape


def _avgpool_bwd(layer, p, x_shape, dout):
    k, s = layer.kernel_size, layer.stride
    ho, wo = dout.shape[2], dout.shape[3]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    share = dout / (k * k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += share
    return dx, {}


def _gap_fwd(layer, p, x, train):
    return x.mean(axis=(2, 3)), x.shape


def _gap_bwd(layer, p, x_shape, dout):
    h, w = x_shape[2], x_shape[3]
    dx = np.broadcast_to((dout / (h * w))[:, :, None, None], x_shape)
    return np.array(dx), {}


def _flatten_fwd(layer, p, x, train):
    return x.reshape(x.shape[0], -1), x.shape


def _flatten_bwd(layer, p, x_shape, dout):
    return dout.reshape(x_shape), {}


def _linear_fwd(layer, p, x, train):
    out = x @ p["weight"].T
    if "bias" in p:
        out = out + p["bias"]
    return out, x


def _linear_bwd(layer, p, x, dout):
    grads = {"weight": dout.T @ x}
    if "bias" in p:
        grads["bias"] = dout.sum(axis=0)
    return dout @ p["weight"], grads


def _add_fwd(layer, p, x, train, other=None):
    return x + other, None


def _add_bwd(layer, p, cache, dout):
    return dout, {}


_FORWARD = {
    "conv2d": _conv_fwd,
    "batchnorm": _bn_fwd,
    "relu": _relu_fwd,
    "maxpool": _maxpool_fwd,
    "avgpool": _avgpool_fwd,
    "global-avg-pool": _gap_fwd,
    "flatten": _flatten_fwd,
    "linear": _linear_fwd,
}

_BACKWARD = {
    "conv2d": _conv_bwd,
    "batchnorm": _bn_bwd,
    "relu": _relu_bwd,
    "maxpool": _maxpool_bwd,
    "avgpool": _avgpool_bwd,
    "global-avg-pool": _gap_bwd,
    "flatten": _flatten_bwd,
    "linear": _linear_bwd,
    "residual-add": _add_bwd,
}


def layer_forward(layer: LayerSpec, params: dict, x: np.ndarray, train: bool = False, other=None):
    """Apply one layer; returns ``(output, cache)``."""
    if layer.kind == "residual-add":
        return _add_fwd(layer, params, x, train, other)
    return _FORWARD[layer.kind](layer, params, x, train)


def layer_backward(layer: LayerSpec, params: dict, cache, dout):
    """Return ``(dinput, param_grads)`` for one layer."""
    return _BACKWARD[layer.kind](layer, params, cache, dout)


# ---------------------------------------------------------------------------
# whole-network passes


@dataclass
class Tape:
    """State recorded by a training-mode forward pass for :func:`backward`."""

    caches: dict
    outputs: dict


def _check_batch(net: NetworkSpec, batch: np.ndarray):
    if batch.ndim != 4 or tuple(batch.shape[1:]) != net.input_shape:
        raise ShapeError(f"batch shape {batch.shape} does not match input {net.input_shape}")


def run(net: NetworkSpec, batch: np.ndarray, *, train: bool = False, record: bool = False,
        check_finite: bool = True):
    """Evaluate every layer; returns ``(outputs, tape)`` with outputs keyed by id."""
    _check_batch(net, batch)
    x0 = np.asarray(batch, dtype=net.dtype)
    outputs = {INPUT: x0}
    caches = {}
    for layer in net.layers:
        x = outputs[net.source_of(layer.id)]
        other = outputs[layer.operand] if layer.operand is not None else None
        y, cache = layer_forward(layer, net.params.get(layer.id, {}), x, train, other)
        if check_finite and not np.all(np.isfinite(y)):
            raise NumericError(f"non-finite activation at layer {layer.id!r}")
        outputs[layer.id] = y
        if record:
            caches[layer.id] = cache
    return outputs, (Tape(caches, outputs) if record else None)


def forward(net: NetworkSpec, batch: np.ndarray, capture=(), *, train: bool = False):
    """Run the network and return ``(logits, trace)``.

    ``trace`` maps each requested id (``"input"`` is allowed) to its output.
    With ``train=False`` batchnorm uses running statistics, so the pass is
    deterministic and leaves the network untouched.
    """
    capture = list(capture)
    for lid in capture:
        if lid != INPUT and lid not in net:
            raise KeyError(f"cannot capture unknown layer {lid!r}")
    outputs, _ = run(net, batch, train=train)
    return outputs[net.layers[-1].id], {lid: outputs[lid] for lid in capture}


def backward(net: NetworkSpec, tape: Tape, dlogits: np.ndarray, inject=None, want=()):
    """Backpropagate ``dlogits`` through a recorded pass.

    ``inject`` adds extra gradients onto layer outputs (used by distillation
    terms).  Returns ``(param_grads, activation_grads)`` where the latter holds
    d(loss)/d(output) for every id in ``want``.
    """
    inject = inject or {}
    last = net.layers[-1].id
    pending: dict[str, np.ndarray] = {last: dlogits}
    for lid, g in inject.items():
        pending[lid] = pending[lid] + g if lid in pending else g
    grads: dict[str, dict[str, np.ndarray]] = {}
    act_grads = {}
    for layer in reversed(net.layers):
        dout = pending.pop(layer.id, None)
        if layer.id in want:
            act_grads[layer.id] = dout if dout is not None else np.zeros_like(tape.outputs[layer.id])
        if dout is None:
            continue
        p = net.params.get(layer.id, {})
        dx, g = layer_backward(layer, p, tape.caches[layer.id], dout)
        if g:
            grads[layer.id] = g
        targets = [net.source_of(layer.id)]
        if layer.operand is not None:
            targets.append(layer.operand)
        for t in targets:
            pending[t] = pending[t] + dx if t in pending else dx
    if INPUT in want:
        act_grads[INPUT] = pending.get(INPUT, np.zeros_like(tape.outputs[INPUT]))
    return grads, act_grads


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    probs = np.exp(z - logsum[:, None])
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n
