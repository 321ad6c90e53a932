"""Layer-wise reconstruction error and its second-order approximation.

For a conv layer with filters ``W`` (F×D, D = C·k·k) and sampled input
volumes ``X_i`` the pruning error of a channel mask is

    E = 1/N Σ_i ||W̃ X_i − W X_i||²

where ``W̃`` zeroes the pruned channels.  Writing ``δW_f = −W_f`` on pruned
positions, the quadratic term ``δE = ½ Σ_f δW_fᵀ H δW_f`` with
``H = 1/N Σ_i X_i X_iᵀ`` satisfies ``E = 2 δE`` exactly, which the tests
exploit as a cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .netcore.container import read_container, write_container


@dataclass(frozen=True)
class HessianCache:
    matrix: np.ndarray
    layer_id: str
    sample_count: int

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def compute_hessian(vs, *, expected_dim: int | None = None) -> HessianCache:
    """H = (1/N) Σ X_i X_iᵀ over the rows of ``vs.volumes`` (float64)."""
    x = np.asarray(vs.volumes, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError("volume set must be a non-empty N×D matrix")
    if expected_dim is not None and x.shape[1] != expected_dim:
        raise ShapeError(f"volumes have {x.shape[1]} columns, layer expects {expected_dim}")
    h = (x.T @ x) / x.shape[0]
    # mirror the upper triangle so the result is symmetric bit for bit
    h = np.triu(h) + np.triu(h, 1).T
    return HessianCache(h, getattr(vs, "layer_id", ""), x.shape[0])


def _weights2d(W) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    return W.reshape(W.shape[0], -1)


def _pruned_positions(mask, dim: int) -> np.ndarray:
    """Boolean vector over the D weight positions belonging to pruned channels."""
    mask = np.asarray(mask).astype(bool)
    c = mask.size
    if dim % c:
        raise ShapeError(f"mask length {c} does not divide weight width {dim}")
    return np.repeat(~mask, dim // c)


def taylor_error(H: HessianCache | np.ndarray, W, mask) -> float:
    """δE = Σ_f ½ δW_fᵀ H δW_f with δW_f = −W_f on pruned channels."""
    h = H.matrix if isinstance(H, HessianCache) else np.asarray(H, dtype=np.float64)
    w = _weights2d(W)
    if h.shape != (w.shape[1], w.shape[1]):
        raise ShapeError(f"Hessian {h.shape} does not match weight width {w.shape[1]}")
    pruned = _pruned_positions(mask, w.shape[1])
    delta = np.where(pruned[None, :], -w, 0.0)
    return float(0.5 * np.einsum("fd,de,fe->", delta, h, delta))


def direct_error(vs, W, bias, mask) -> float:
    """Exact mean squared pre-activation error over the volume set."""
    x = np.asarray(vs.volumes, dtype=np.float64)
    w = _weights2d(W)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"volumes have {x.shape[1]} columns, weights {w.shape[1]}")
    keep = ~_pruned_positions(mask, w.shape[1])
    b = np.zeros(w.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    y_pruned = x[:, keep] @ w[:, keep].T + b
    y_ref = np.asarray(vs.ref_outputs, dtype=np.float64)
    return float(np.mean(np.sum((y_pruned - y_ref) ** 2, axis=1)))


def channel_quadratic(H: HessianCache | np.ndarray, W) -> np.ndarray:
    """C×C matrix Q with ``taylor_error(H, W, m) == ½ zᵀ Q z`` for ``z = 1 − m``.

    Q[a, b] sums ``H ∘ (WᵀW)`` over the k×k blocks of channels a and b, so a
    whole population can be scored with one small quadratic form each.
    """
    if np.ndim(W) != 4:
        raise ShapeError("channel_quadratic needs F×C×k×k weights")
    h = H.matrix if isinstance(H, HessianCache) else np.asarray(H, dtype=np.float64)
    w = _weights2d(W)
    d = w.shape[1]
    if h.shape != (d, d):
        raise ShapeError(f"Hessian {h.shape} does not match weight width {d}")
    c = np.shape(W)[1]
    kk = d // c
    return (h * (w.T @ w)).reshape(c, kk, c, kk).sum(axis=(1, 3))


def batch_taylor_error(Q: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """δE for each row of ``masks`` (P×C) given :func:`channel_quadratic` output."""
    z = 1.0 - np.asarray(masks, dtype=np.float64)
    return 0.5 * np.einsum("pa,ab,pb->p", z, Q, z)


def population_fitness(errors) -> np.ndarray:
    """Turn errors (lower is better) into nonnegative roulette weights.

    fitness = (E_max − E) + 0.01·(E_max − E_min); equal errors give a uniform
    vector of ones.
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.size < 1 or not np.all(np.isfinite(e)):
        raise ValueError("errors must be a non-empty finite vector")
    spread = e.max() - e.min()
    if spread == 0:
        return np.ones_like(e)
    return (e.max() - e) + 0.01 * spread


def save_hessian(cache: HessianCache, path):
    meta = {"layer_id": cache.layer_id, "sample_count": cache.sample_count}
    return write_container(path, "hessian", meta, {"matrix": cache.matrix})


def load_hessian(path) -> HessianCache:
    manifest, t = read_container(path, "hessian")
    h = t["matrix"].astype(np.float64)
    h = np.triu(h) + np.triu(h, 1).T
    return HessianCache(h, manifest["layer_id"], int(manifest["sample_count"]))
