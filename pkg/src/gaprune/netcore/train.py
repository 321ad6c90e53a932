"""SGD training loop and evaluation."""

from __future__ import annotations

import numpy as np

from ..errors import DivergenceError, GapruneError
from .engine import backward, forward, run, softmax_cross_entropy
from .spec import NetworkSpec, OptimizerConfig


class SGD:
    """Momentum SGD with coupled L2 weight decay.

    Update per tensor: ``v = momentum * v + (g + wd * w)``; ``w -= lr * v``.
    Velocity buffers live on the instance so they persist across epochs.
    """

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.velocity: dict[tuple[str, str], np.ndarray] = {}

    def step(self, net: NetworkSpec, grads: dict, lr: float) -> None:
        cfg = self.config
        for lid, name, w in net.learnable():
            g = grads.get(lid, {}).get(name)
            if g is None:
                g = np.zeros_like(w)
            d = g + cfg.weight_decay * w if cfg.weight_decay else g
            if cfg.momentum:
                key = (lid, name)
                v = self.velocity.get(key)
                v = d.copy() if v is None else cfg.momentum * v + d
                self.velocity[key] = v
                d = v
            w -= (lr * d).astype(w.dtype, copy=False)


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield start // batch_size, order[start : start + batch_size]


def train_epoch(net: NetworkSpec, data, opt: OptimizerConfig | SGD, rng: np.random.Generator,
                *, epoch: int = 0, augment=None, loss_fn=None) -> float:
    """One pass of minibatch SGD over ``data``; returns the mean batch loss.

    ``augment`` is an optional ``(batch, rng) -> batch`` callable.  ``loss_fn``
    replaces plain cross-entropy: it receives ``(net, tape, outputs, labels)``
    and returns ``(loss, dlogits, inject)`` for :func:`backward`.
    """
    if len(data.labels) == 0:
        raise GapruneError("cannot train on an empty dataset")
    sgd = opt if isinstance(opt, SGD) else SGD(opt)
    cfg = sgd.config
    lr = cfg.lr_at(epoch)
    total, batches = 0.0, 0
    for b, idx in iterate_batches(len(data.labels), cfg.batch_size, rng):
        x = data.images[idx]
        if augment is not None:
            x = augment(x, rng)
        y = data.labels[idx]
        outputs, tape = run(net, x, train=True, record=True, check_finite=False)
        logits = outputs[net.layers[-1].id]
        if loss_fn is None:
            loss, dlogits = softmax_cross_entropy(logits, y)
            inject = None
        else:
            loss, dlogits, inject = loss_fn(net, tape, outputs, y)
        if not np.isfinite(loss):
            raise DivergenceError(b, loss)
        grads, _ = backward(net, tape, dlogits, inject=inject)
        sgd.step(net, grads, lr)
        total += loss
        batches += 1
    return total / batches


def predict(net: NetworkSpec, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    preds = []
    for start in range(0, len(images), batch_size):
        logits, _ = forward(net, images[start : start + batch_size])
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds)


def evaluate(net: NetworkSpec, data, batch_size: int = 256) -> float:
    """Top-1 accuracy of ``net`` on ``data`` (batchnorm in inference mode)."""
    if len(data.labels) == 0:
        raise GapruneError("cannot evaluate on an empty dataset")
    preds = predict(net, data.images, batch_size)
    return float(np.mean(preds == data.labels))
