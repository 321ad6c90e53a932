"""Whole-model channel pruning.

Layer ids in plans and sensitivity profiles name the conv whose *filters*
are removed (the producer).  Channel selection runs on the next conv (the
consumer), whose input channels are exactly those filters' outputs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fitness, genetic
from .distill import DistillConfig, finetune_kd, params_checksum
from .errors import GapruneError, SurgeryError
from .netcore.engine import backward, run, softmax_cross_entropy
from .netcore.spec import INPUT, NetworkSpec, OptimizerConfig
from .netcore.stats import model_stats
from .netcore.train import evaluate
from .sampler import sample_volumes

PASS_THROUGH = ("batchnorm", "relu", "maxpool", "avgpool")


# ---------------------------------------------------------------------------
# graph queries


def producer_chain(net: NetworkSpec, consumer_id: str) -> tuple[str, list[str]]:
    """Walk back from a conv to the conv producing its input channels.

    Returns ``(producer_id, intermediate_ids)``.  Every tensor on the way must
    feed exactly one layer; branch points such as residual block boundaries
    are rejected.
    """
    if net.layer(consumer_id).kind != "conv2d":
        raise SurgeryError(f"{consumer_id} is not a conv layer")
    consumers = net.consumers()
    chain: list[str] = []
    cur = net.source_of(consumer_id)
    while True:
        if cur == INPUT:
            raise SurgeryError(f"{consumer_id} reads the network input; no filters to remove")
        if len(consumers[cur]) != 1:
            raise SurgeryError(f"{cur} feeds {len(consumers[cur])} layers (block boundary)")
        layer = net.layer(cur)
        if layer.kind == "conv2d":
            return cur, chain[::-1]
        if layer.kind not in PASS_THROUGH:
            raise SurgeryError(f"cannot prune across {layer.kind} layer {cur}")
        chain.append(cur)
        cur = net.source_of(cur)


def consumer_of(net: NetworkSpec, producer_id: str) -> str:
    """The conv whose input channels are ``producer_id``'s filters."""
    if net.layer(producer_id).kind != "conv2d":
        raise SurgeryError(f"{producer_id} is not a conv layer")
    consumers = net.consumers()
    cur = producer_id
    while True:
        nxt = consumers[cur]
        if len(nxt) != 1:
            raise SurgeryError(f"{producer_id}: output of {cur} branches; not prunable")
        layer = net.layer(nxt[0])
        if layer.kind == "conv2d":
            producer_chain(net, layer.id)
            return layer.id
        if layer.kind not in PASS_THROUGH:
            raise SurgeryError(f"{producer_id} feeds a {layer.kind} layer; not prunable")
        cur = layer.id


def prunable_layers(net: NetworkSpec) -> list[str]:
    out = []
    for lid in net.conv_ids:
        try:
            consumer_of(net, lid)
        except SurgeryError:
            continue
        out.append(lid)
    return out


# ---------------------------------------------------------------------------
# surgery


def surgery(net: NetworkSpec, consumer_id: str, mask) -> NetworkSpec:
    """Remove the input channels of ``consumer_id`` where ``mask`` is 0, along
    with the producing filters, biases and batchnorm entries.  Returns a new
    network; ``net`` is left unchanged."""
    producer, chain = producer_chain(net, consumer_id)
    consumer = net.layer(consumer_id)
    keep = np.asarray(mask).astype(bool)
    if keep.ndim != 1 or keep.size != consumer.in_channels:
        raise SurgeryError(f"mask length {keep.size} != {consumer_id} in_channels {consumer.in_channels}")
    if not keep.any():
        raise SurgeryError("mask removes every channel")
    out = net.copy()
    k = int(keep.sum())
    prod = out.layer(producer)
    prod.out_channels = k
    p = out.params[producer]
    for name in ("weight", "bias"):
        if name in p:
            p[name] = np.ascontiguousarray(p[name][keep])
    for lid in chain:
        layer = out.layer(lid)
        if layer.kind == "batchnorm":
            layer.out_channels = k
            out.params[lid] = {n: np.ascontiguousarray(v[keep]) for n, v in out.params[lid].items()}
    cons = out.layer(consumer_id)
    cons.in_channels = k
    out.params[consumer_id]["weight"] = np.ascontiguousarray(out.params[consumer_id]["weight"][:, keep])
    out.validate()
    return out


# ---------------------------------------------------------------------------
# sensitivity and plans


@dataclass
class SensitivityProfile:
    table: dict[tuple[str, float], float] = field(default_factory=dict)
    baseline: float | None = None

    @property
    def layers(self) -> list[str]:
        return list(dict.fromkeys(lid for lid, _ in self.table))

    @property
    def rates(self) -> list[float]:
        return sorted({r for _, r in self.table})

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "rate", "accuracy"])
            for (lid, rate), acc in self.table.items():
                w.writerow([lid, repr(rate), repr(acc)])

    @classmethod
    def from_csv(cls, path) -> "SensitivityProfile":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls({(r["layer"], float(r["rate"])): float(r["accuracy"]) for r in rows})


@dataclass
class SamplingConfig:
    image_fraction: float = 0.01
    volumes_per_image: int = 10

    def __post_init__(self):
        if not 0.0 < self.image_fraction <= 1.0:
            raise ValueError("image_fraction must lie in (0, 1]")
        if self.volumes_per_image < 1:
            raise ValueError("volumes_per_image must be positive")


def layer_problem(net, data, producer_id, sampling: SamplingConfig, rng):
    """Sample volumes at the consumer of ``producer_id`` and build its Hessian."""
    consumer = consumer_of(net, producer_id)
    vs = sample_volumes(net, data, consumer, sampling.image_fraction,
                        sampling.volumes_per_image, rng)
    return consumer, vs, fitness.compute_hessian(vs)


def sensitivity_scan(net: NetworkSpec, data, rates, ga_cfg: genetic.GAConfig, *, eval_data=None,
                     layers=None, sampling: SamplingConfig | None = None) -> SensitivityProfile:
    """Prune each layer alone at each rate (no fine-tuning) and record accuracy."""
    rates = list(rates)
    if not rates:
        raise ValueError("sensitivity scan needs at least one rate")
    sampling = sampling or SamplingConfig()
    eval_data = eval_data if eval_data is not None else data
    rng = np.random.default_rng(ga_cfg.seed)
    profile = SensitivityProfile(baseline=evaluate(net, eval_data))
    for lid in layers or prunable_layers(net):
        consumer, _, H = layer_problem(net, data, lid, sampling, rng)
        weight = net.params[consumer]["weight"]
        q = fitness.channel_quadratic(H, weight)
        for rate in rates:
            if genetic.kept_channels(weight.shape[1], rate) == weight.shape[1]:
                profile.table[(lid, float(rate))] = profile.baseline
                continue
            res = genetic.evolve(H, weight, rate, ga_cfg, rng, quadratic=q)
            profile.table[(lid, float(rate))] = evaluate(surgery(net, consumer, res.mask), eval_data)
    return profile


@dataclass
class PruningPlan:
    groups: list[tuple[list[str], float]] = field(default_factory=list)
    skip: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.groups = [(list(ids), float(rate)) for ids, rate in self.groups]
        seen: set[str] = set()
        for ids, rate in self.groups:
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"group rate {rate} outside [0, 1)")
            overlap = seen.intersection(ids)
            if overlap or len(set(ids)) != len(ids):
                raise ValueError(f"layers in more than one group: {sorted(overlap) or ids}")
            seen.update(ids)
        if seen.intersection(self.skip):
            raise ValueError(f"layers both grouped and skipped: {sorted(seen.intersection(self.skip))}")

    def layer_rates(self, net: NetworkSpec) -> list[tuple[str, float]]:
        """(layer, rate) pairs in forward order."""
        rates = {lid: r for ids, r in self.groups for lid in ids}
        return [(lid, rates[lid]) for lid in net.layer_ids if lid in rates]

    def validate(self, net: NetworkSpec) -> None:
        prunable = set(prunable_layers(net))
        for ids, _ in self.groups:
            for lid in ids:
                if lid not in prunable:
                    raise SurgeryError(f"plan names {lid}, which is not a prunable conv layer")

    def to_dict(self) -> dict:
        return {"groups": [{"layers": ids, "rate": r} for ids, r in self.groups],
                "skip": list(self.skip)}

    @classmethod
    def from_dict(cls, d: dict) -> "PruningPlan":
        unknown = set(d) - {"groups", "skip"}
        if unknown:
            raise ValueError(f"unknown plan keys {sorted(unknown)}")
        return cls([(g["layers"], g["rate"]) for g in d.get("groups", [])], d.get("skip", []))


def make_plan(profile: SensitivityProfile | None, groups, rates=None, *, skip=None,
              max_drop: float = 0.01, net: NetworkSpec | None = None) -> PruningPlan:
    """Build a plan from layer groups.

    With explicit ``rates`` (one per group) they are used as given.  With
    ``rates=None`` each group gets the largest scanned rate whose mean accuracy
    drop over the group's layers stays within ``max_drop``.  When ``net`` is
    given, prunable layers outside every group join the skip set.
    """
    groups = [list(g) for g in groups]
    if rates is None:
        if profile is None or profile.baseline is None:
            raise ValueError("choosing rates needs a sensitivity profile with a baseline")
        rates = []
        for g in groups:
            ok = [r for r in profile.rates
                  if np.mean([profile.baseline - profile.table[(lid, r)] for lid in g]) <= max_drop]
            rates.append(max(ok, default=0.0))
    rates = list(rates)
    if not rates:
        raise ValueError("plan needs at least one rate")
    if len(rates) != len(groups):
        raise ValueError(f"{len(groups)} groups but {len(rates)} rates")
    skip = list(skip or [])
    if net is not None:
        grouped = {lid for g in groups for lid in g}
        skip += [lid for lid in prunable_layers(net) if lid not in grouped and lid not in skip]
    plan = PruningPlan(list(zip(groups, rates)), skip)
    if net is not None:
        plan.validate(net)
    return plan


# ---------------------------------------------------------------------------
# baselines


@dataclass
class BaselineContext:
    filter_weights: np.ndarray | None = None  # producer filters, F×C×k×k
    volumes: object | None = None              # VolumeSet at the consumer
    consumer_weight: np.ndarray | None = None
    consumer_bias: np.ndarray | None = None
    activations: np.ndarray | None = None      # N×C×H×W consumer input
    gradients: np.ndarray | None = None        # d loss / d activations


def _top_k(scores, k) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.argsort(-scores, kind="stable")[:k]
    mask = np.zeros(scores.size, dtype=np.int8)
    mask[keep] = 1
    return mask


def _need(ctx, *names):
    missing = [n for n in names if getattr(ctx, n) is None]
    if missing:
        raise GapruneError(f"baseline context lacks {', '.join(missing)}")


def select_baseline(criterion: str, ctx: BaselineContext, k: int, rng=None, channels=None) -> np.ndarray:
    """Keep-mask with ``k`` ones chosen by a reference criterion.

    ``random`` draws a uniform k-subset; ``weight-sum`` keeps the filters with
    the largest L1 norm; ``taylor1`` keeps channels with the largest
    |mean(activation × gradient)|; ``greedy`` removes one channel at a time,
    each time the one whose removal gives the smallest exact layer error.
    """
    if criterion == "random":
        c = channels
        if c is None:
            for arr in (ctx.filter_weights, ctx.consumer_weight, ctx.activations):
                if arr is not None:
                    c = arr.shape[0] if arr is ctx.filter_weights else arr.shape[1]
                    break
        if c is None:
            raise GapruneError("random baseline needs a channel count")
        rng = np.random.default_rng() if rng is None else rng
        mask = np.zeros(c, dtype=np.int8)
        mask[rng.choice(c, k, replace=False)] = 1
        return mask
    if criterion == "weight-sum":
        _need(ctx, "filter_weights")
        w = np.asarray(ctx.filter_weights, dtype=np.float64)
        return _top_k(np.abs(w).reshape(w.shape[0], -1).sum(axis=1), k)
    if criterion == "taylor1":
        _need(ctx, "activations", "gradients")
        prod = np.asarray(ctx.activations, np.float64) * np.asarray(ctx.gradients, np.float64)
        axes = (0,) + tuple(range(2, prod.ndim))
        return _top_k(np.abs(prod.mean(axis=axes)), k)
    if criterion == "greedy":
        _need(ctx, "volumes", "consumer_weight")
        c = ctx.consumer_weight.shape[1]
        mask = np.ones(c, dtype=np.int8)
        while mask.sum() > k:
            best, best_err = None, np.inf
            for ch in np.flatnonzero(mask):
                trial = mask.copy()
                trial[ch] = 0
                err = fitness.direct_error(ctx.volumes, ctx.consumer_weight, ctx.consumer_bias, trial)
                if err < best_err:
                    best, best_err = ch, err
            mask[best] = 0
        return mask
    raise ValueError(f"unknown baseline criterion {criterion!r}")


def baseline_context(net: NetworkSpec, data, producer_id: str, *, volumes=None,
                     n_gradient_samples: int = 256, rng=None) -> BaselineContext:
    """Collect what every baseline criterion needs for one layer."""
    consumer = consumer_of(net, producer_id)
    rng = np.random.default_rng(0) if rng is None else rng
    src = net.source_of(consumer)
    idx = np.sort(rng.choice(len(data.labels), min(n_gradient_samples, len(data.labels)), replace=False))
    outputs, tape = run(net, data.images[idx], train=False, record=True)
    _, dlogits = softmax_cross_entropy(outputs[net.layers[-1].id], data.labels[idx])
    _, act_grads = backward(net, tape, dlogits, want=(src,))
    return BaselineContext(
        filter_weights=net.params[producer_id]["weight"],
        volumes=volumes,
        consumer_weight=net.params[consumer]["weight"],
        consumer_bias=net.params[consumer].get("bias"),
        activations=outputs[src],
        gradients=act_grads[src],
    )


# ---------------------------------------------------------------------------
# whole-model pipeline


@dataclass
class FineTuneConfig:
    inter_epochs: int = 1
    inter_lr: float = 1e-3
    final_epochs: int = 20
    final_lr: float = 1e-3
    final_lr_end: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    beta: float = 1e3
    pairs: list | None = None
    seed: int = 0

    def __post_init__(self):
        if self.inter_epochs < 0 or self.final_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.inter_lr < 0 or self.final_lr < 0 or self.final_lr_end < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")

    def _optimizer(self, lr, schedule=()):
        return OptimizerConfig(learning_rate=lr, momentum=self.momentum,
                               weight_decay=self.weight_decay, batch_size=self.batch_size,
                               lr_schedule=list(schedule))

    def inter(self) -> DistillConfig:
        return DistillConfig(self.beta, self.pairs, self.inter_epochs,
                             self._optimizer(self.inter_lr), self.seed)

    def final(self) -> DistillConfig:
        """Learning rate decays geometrically from ``final_lr`` to ``final_lr_end``."""
        e = self.final_epochs
        schedule = []
        if e > 1 and self.final_lr > 0:
            ratio = self.final_lr_end / self.final_lr
            schedule = [(i, ratio ** (i / (e - 1))) for i in range(e)]
        return DistillConfig(self.beta, self.pairs, e, self._optimizer(self.final_lr, schedule),
                             self.seed)


@dataclass
class LayerReport:
    layer: str
    consumer: str
    channels: int
    kept: int
    rate: float
    taylor_error: float
    direct_error: float
    accuracy_pruned: float | None
    accuracy_finetuned: float | None
    params: int
    flops: int
    mask: list[int]


@dataclass
class PruneReport:
    params_before: int
    flops_before: int
    params_after: int = 0
    flops_after: int = 0
    accuracy_before: float | None = None
    accuracy_after: float | None = None
    layers: list[LayerReport] = field(default_factory=list)
    trajectory: list[dict] = field(default_factory=list)
    failed_layer: str | None = None
    ga_results: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        del d["ga_results"]
        return d

    def write(self, directory) -> None:
        directory = Path(directory)
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        (directory / "report.json").write_text(text + "\n", encoding="utf-8")
        with open(directory / "report.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "consumer", "channels", "kept", "rate", "taylor_error",
                        "direct_error", "accuracy_pruned", "accuracy_finetuned", "params", "flops"])
            for r in self.layers:
                w.writerow([r.layer, r.consumer, r.channels, r.kept, r.rate, repr(r.taylor_error),
                            repr(r.direct_error), r.accuracy_pruned, r.accuracy_finetuned,
                            r.params, r.flops])


class PruningFailed(GapruneError):
    def __init__(self, layer: str, cause: Exception, report: PruneReport):
        super().__init__(f"pruning failed at layer {layer}: {cause}")
        self.layer = layer
        self.report = report


def prune_model(net: NetworkSpec, plan: PruningPlan, data, ga_cfg: genetic.GAConfig,
                ft_cfg: FineTuneConfig, teacher: NetworkSpec | None = None, *, eval_data=None,
                sampling: SamplingConfig | None = None, selector: str = "ga", augment=None,
                on_layer=None):
    """Prune layer by layer in forward order, fine-tuning with distillation
    after each layer and once more at the end.

    ``selector`` swaps the genetic search for a baseline criterion.  Returns
    ``(pruned_net, report)``; the input network and the teacher are untouched.
    """
    plan.validate(net)
    sampling = sampling or SamplingConfig()
    teacher = net.copy() if teacher is None else teacher
    teacher_sum = params_checksum(teacher)
    rng = np.random.default_rng(ga_cfg.seed)
    params0, flops0 = model_stats(net)
    report = PruneReport(params0, flops0)
    if eval_data is not None:
        report.accuracy_before = evaluate(net, eval_data)
    current = net.copy()
    steps = plan.layer_rates(net)
    epoch = 0
    for lid, rate in steps:
        try:
            consumer, vs, H = layer_problem(current, data, lid, sampling, rng)
            weight = current.params[consumer]["weight"]
            bias = current.params[consumer].get("bias")
            k = genetic.kept_channels(weight.shape[1], rate)
            if selector == "ga":
                res = genetic.evolve(H, weight, rate, ga_cfg, rng)
                report.ga_results[lid] = res
                mask = res.mask
            else:
                ctx = baseline_context(current, data, lid, volumes=vs, rng=rng)
                mask = select_baseline(selector, ctx, k, rng)
            t_err = fitness.taylor_error(H, weight, mask)
            d_err = fitness.direct_error(vs, weight, bias, mask)
            current = surgery(current, consumer, mask)
            acc_pruned = evaluate(current, eval_data) if eval_data is not None else None
            cfg = ft_cfg.inter()
            if cfg.epochs:
                _, traj = finetune_kd(current, teacher, data, cfg, rng, augment=augment,
                                      epoch_offset=epoch)
                epoch += cfg.epochs
                report.trajectory += [{"layer": lid, **row} for row in traj]
            acc_ft = evaluate(current, eval_data) if eval_data is not None else None
        except Exception as exc:
            report.failed_layer = lid
            raise PruningFailed(lid, exc, report) from exc
        p, f = model_stats(current)
        report.layers.append(LayerReport(lid, consumer, int(weight.shape[1]), k, rate, t_err, d_err,
                                         acc_pruned, acc_ft, p, f, [int(b) for b in mask]))
        if on_layer is not None:
            on_layer(report.layers[-1])
    if steps and ft_cfg.final_epochs:
        _, traj = finetune_kd(current, teacher, data, ft_cfg.final(), rng, augment=augment)
        report.trajectory += [{"layer": "final", **row} for row in traj]
    if params_checksum(teacher) != teacher_sum:
        raise GapruneError("teacher parameters changed during pruning")
    report.params_after, report.flops_after = model_stats(current)
    if eval_data is not None:
        report.accuracy_after = evaluate(current, eval_data)
    return current, report
