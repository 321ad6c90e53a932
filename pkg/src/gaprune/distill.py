"""Attention-map knowledge distillation for fine-tuning pruned networks.

The student minimises cross-entropy plus ``beta`` times the summed distance
between teacher and student attention maps at paired layers.  An attention
map is the channel mean of a feature map, so teacher and student may have
different channel counts.  Maps are L2-normalised per sample before taking
the Euclidean distance.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .netcore.engine import forward, softmax_cross_entropy
from .netcore.spec import INPUT, NetworkSpec, OptimizerConfig
from .netcore.train import SGD, train_epoch

NORM_EPS = 1e-8


@dataclass
class AttentionMap:
    map: np.ndarray
    layer_id: str = ""


@dataclass
class DistillConfig:
    beta: float = 1e3
    pairs: list[tuple[str, str]] | None = None
    epochs: int = 1
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(learning_rate=1e-3, momentum=0.9,
                                                weight_decay=5e-4, batch_size=64))
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.pairs is not None:
            self.pairs = [tuple(p) for p in self.pairs]


def attention_map(feature: np.ndarray, layer_id: str = "") -> AttentionMap:
    """Mean over the channel axis of a C×H×W (or N×C×H×W) feature map."""
    feature = np.asarray(feature)
    if feature.ndim not in (3, 4) or feature.shape[-3] < 1:
        raise ShapeError("attention maps need C×H×W or N×C×H×W features with C ≥ 1")
    return AttentionMap(feature.mean(axis=-3), layer_id)


def _normalised(a: np.ndarray):
    flat = a.reshape(a.shape[0], -1).astype(np.float64)
    norm = np.sqrt((flat * flat).sum(axis=1))
    return flat / (norm + NORM_EPS)[:, None], flat, norm


def map_distance(student: np.ndarray, teacher: np.ndarray) -> np.ndarray:
    """Per-sample ``||t/|t| − s/|s|||`` for N×H×W attention maps."""
    if student.shape != teacher.shape:
        raise ShapeError(f"attention maps differ in shape: {student.shape} vs {teacher.shape}")
    us, _, _ = _normalised(student)
    ut, _, _ = _normalised(teacher)
    return np.sqrt(((ut - us) ** 2).sum(axis=1))


def _as_batch(m) -> np.ndarray:
    m = m.map if isinstance(m, AttentionMap) else np.asarray(m)
    # a lone map (flat vector or H×W) becomes a batch of one
    return m[None] if m.ndim in (1, 2) else m


def attention_term(student_maps, teacher_maps) -> float:
    """Σ_j mean_n distance over aligned lists of student and teacher maps."""
    student_maps, teacher_maps = list(student_maps), list(teacher_maps)
    if len(student_maps) != len(teacher_maps):
        raise ShapeError("student and teacher map lists differ in length")
    return sum(float(map_distance(_as_batch(s), _as_batch(t)).mean())
               for s, t in zip(student_maps, teacher_maps))


def at_loss(student_maps, teacher_maps, beta: float, ce_loss: float) -> float:
    """``ce_loss + beta · Σ_j ||F_T^j − F_S^j||`` on normalised maps."""
    return float(ce_loss) + beta * attention_term(student_maps, teacher_maps)


def attention_grad(student_feature: np.ndarray, teacher_map: np.ndarray, weight: float):
    """Value and gradient of ``weight · mean_n distance`` w.r.t. the student
    N×C×H×W feature map (teacher map held fixed)."""
    n, c = student_feature.shape[:2]
    a = student_feature.mean(axis=1)
    us, flat, norm = _normalised(a)
    ut, _, _ = _normalised(teacher_map)
    diff = ut - us
    dist = np.sqrt((diff * diff).sum(axis=1))
    value = weight * float(dist.mean())
    safe = np.where(dist > 0, dist, 1.0)
    g_u = np.where(dist[:, None] > 0, -diff / safe[:, None], 0.0) * (weight / n)
    denom = norm + NORM_EPS
    proj = (flat * g_u).sum(axis=1)
    safe_norm = np.where(norm > 0, norm, 1.0)
    g_a = g_u / denom[:, None] - np.where(norm[:, None] > 0,
                                          flat * (proj / (safe_norm * denom ** 2))[:, None], 0.0)
    g_feature = np.broadcast_to((g_a / c).reshape(n, 1, *a.shape[1:]), student_feature.shape)
    return value, np.array(g_feature, dtype=student_feature.dtype)


def default_pairs(net: NetworkSpec) -> list[tuple[str, str]]:
    """Pair the activation after the last conv of every resolution stage."""
    shapes = net.shapes()
    consumers = net.consumers()
    ends: dict[tuple[int, int], str] = {}
    for layer in net.layers:
        if layer.kind != "conv2d":
            continue
        end = layer.id
        while len(consumers[end]) == 1:
            nxt = net.layer(consumers[end][0])
            if nxt.kind not in ("batchnorm", "relu"):
                break
            end = nxt.id
        ends[shapes[layer.id][1:]] = end
    return [(lid, lid) for lid in ends.values()]


def params_checksum(net: NetworkSpec) -> str:
    h = hashlib.sha256()
    for lid in sorted(net.params):
        for name in sorted(net.params[lid]):
            h.update(f"{lid}.{name}".encode())
            h.update(np.ascontiguousarray(net.params[lid][name]).tobytes())
    return h.hexdigest()


class _KDLoss:
    """Loss callback for :func:`train_epoch` that adds attention transfer."""

    def __init__(self, teacher: NetworkSpec, pairs, beta: float):
        # The teacher sees the same batch statistics as the student, so an
        # unpruned copy has a zero attention term.  Running statistics go to
        # private buffers; the teacher's own arrays are only read.
        self.teacher = NetworkSpec(
            layers=teacher.layers,
            params={lid: {k: (v.copy() if k.startswith("running_") else v) for k, v in p.items()}
                    for lid, p in teacher.params.items()},
            input_shape=teacher.input_shape,
            blocks=teacher.blocks,
        )
        self.pairs = pairs
        self.beta = beta
        self.reset()

    def reset(self):
        self.ce = 0.0
        self.at = 0.0
        self.batches = 0

    def __call__(self, net, tape, outputs, labels):
        logits = outputs[net.layers[-1].id]
        ce, dlogits = softmax_cross_entropy(logits, labels)
        inject = {}
        at = 0.0
        if self.beta > 0 and self.pairs:
            _, trace = forward(self.teacher, outputs[INPUT], capture=[t for t, _ in self.pairs],
                               train=True)
            for t_id, s_id in self.pairs:
                t_map = trace[t_id].mean(axis=1)
                value, g = attention_grad(outputs[s_id], t_map, self.beta)
                at += value
                inject[s_id] = inject[s_id] + g if s_id in inject else g
        self.ce += ce
        self.at += at
        self.batches += 1
        return ce + at, dlogits, inject


def check_pairs(student: NetworkSpec, teacher: NetworkSpec, pairs) -> None:
    s_shapes, t_shapes = student.shapes(), teacher.shapes()
    for t_id, s_id in pairs:
        if t_id not in t_shapes or s_id not in s_shapes:
            raise ShapeError(f"attention pair ({t_id}, {s_id}) names an unknown layer")
        if len(t_shapes[t_id]) != 3 or t_shapes[t_id][1:] != s_shapes[s_id][1:]:
            raise ShapeError(f"attention pair ({t_id}, {s_id}) has mismatched spatial shapes")


def finetune_kd(student: NetworkSpec, teacher: NetworkSpec, data, cfg: DistillConfig,
                rng=None, *, augment=None, epoch_offset: int = 0):
    """Train ``student`` in place for ``cfg.epochs``; returns ``(student, trajectory)``.

    The trajectory holds one ``{"epoch", "ce", "at", "total"}`` row per epoch.
    The teacher only runs inference, so its parameters are never touched.
    """
    pairs = default_pairs(teacher) if cfg.pairs is None else cfg.pairs
    check_pairs(student, teacher, pairs)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    sgd = SGD(cfg.optimizer)
    loss = _KDLoss(teacher, pairs, cfg.beta)
    trajectory = []
    for e in range(cfg.epochs):
        loss.reset()
        total = train_epoch(student, data, sgd, rng, epoch=epoch_offset + e, augment=augment,
                            loss_fn=loss)
        trajectory.append({"epoch": epoch_offset + e, "ce": loss.ce / loss.batches,
                           "at": loss.at / loss.batches, "total": total})
    return student, trajectory


def write_trajectory(path, trajectory) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "ce", "at_term", "total"])
        for row in trajectory:
            w.writerow([row["epoch"], repr(row["ce"]), repr(row["at"]), repr(row["total"])])
