"""Command-line front end.

Each run is described by one JSON file; only ``--config``, ``--seed`` and
``--out`` exist as flags.  Exit status is 0 on success, 1 for invalid
configuration and 2 for errors raised while running.

    gaprune --config run.json [--seed N] [--out DIR]
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import shutil
import sys
import traceback
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__, genetic, pruner
from .dataio import AugmentPolicy, augment, load_dataset
from .distill import DistillConfig, finetune_kd, write_trajectory
from .errors import ConfigError, GapruneError
from .netcore import build, evaluate, load_model, model_stats, save_model
from .netcore.container import dump_json
from .netcore.spec import OptimizerConfig
from .netcore.train import SGD, train_epoch
from .netcore.zoo import ARCHITECTURES

COMMANDS = ("train", "sensitivity", "prune", "finetune", "eval", "stats")
DATA_FORMATS = ("idx", "cifar-binary", "synthetic")
METADATA_FILE = "metadata.json"


# ---------------------------------------------------------------------------
# configuration sections


@dataclass
class DatasetSection:
    format: str = "synthetic"
    source: Any = field(default_factory=lambda: {"kind": "digits", "n": 10000, "seed": 0})
    test_source: Any = None
    limit: int | None = None
    test_limit: int | None = None
    num_classes: int | None = None

    def __post_init__(self):
        if self.format not in DATA_FORMATS:
            raise ValueError(f"format must be one of {DATA_FORMATS}")
        want = dict if self.format == "synthetic" else str
        if not isinstance(self.source, want):
            raise ValueError(f"source for {self.format} data must be a {want.__name__}")


@dataclass
class TrainSection:
    epochs: int = 4
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    lr_schedule: list = field(default_factory=list)
    pad_crop: int = 0
    flip_prob: float = 0.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        self.lr_schedule = [list(step) for step in self.lr_schedule]
        self.optimizer()
        self.augment()

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.learning_rate, self.momentum, self.weight_decay,
                               self.batch_size, [tuple(s) for s in self.lr_schedule])

    def augment(self):
        """``(batch, rng) -> batch`` callable, or None when nothing is enabled."""
        policy = AugmentPolicy(pad_crop=self.pad_crop, flip_prob=self.flip_prob)
        if not policy.active:
            return None
        return lambda batch, rng: augment(batch, policy, rng)


@dataclass
class GASection:
    population_size: int = 20
    crossover_prob: float = 0.1
    mutation_prob: float = 0.1
    max_iterations: int | None = None
    elitism: int = 1
    min_iterations: int = 50

    def __post_init__(self):
        self.config(0)

    def config(self, seed: int) -> genetic.GAConfig:
        return genetic.GAConfig(seed=seed, **asdict(self))


@dataclass
class SamplingSection:
    image_fraction: float = 0.01
    volumes_per_image: int = 10

    def __post_init__(self):
        self.config()

    def config(self) -> pruner.SamplingConfig:
        return pruner.SamplingConfig(**asdict(self))


@dataclass
class SensitivitySection:
    rates: list = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8])
    layers: list | None = None

    def __post_init__(self):
        if not self.rates:
            raise ValueError("rates must be nonempty")
        for r in self.rates:
            if not 0.0 <= r < 1.0:
                raise ValueError(f"rate {r} outside [0, 1)")


@dataclass
class FineTuneSection:
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

    def __post_init__(self):
        if self.pairs is not None:
            self.pairs = [list(p) for p in self.pairs]
            if any(len(p) != 2 for p in self.pairs):
                raise ValueError("pairs must be [teacher_layer, student_layer] lists")
        self.config(0)

    def config(self, seed: int) -> pruner.FineTuneConfig:
        d = asdict(self)
        if d["pairs"] is not None:
            d["pairs"] = [tuple(p) for p in d["pairs"]]
        return pruner.FineTuneConfig(seed=seed, **d)


SECTIONS = {
    "dataset": DatasetSection,
    "train": TrainSection,
    "ga": GASection,
    "sampling": SamplingSection,
    "sensitivity": SensitivitySection,
    "finetune": FineTuneSection,
}


@dataclass
class RunConfig:
    command: str
    seed: int
    output: str = "out"
    model: Any = field(default_factory=lambda: {"arch": "small_cnn"})
    teacher: str | None = None
    plan: Any = None
    selector: str = "ga"
    max_workers: int = 1
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainSection = field(default_factory=TrainSection)
    ga: GASection = field(default_factory=GASection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    sensitivity: SensitivitySection = field(default_factory=SensitivitySection)
    finetune: FineTuneSection = field(default_factory=FineTuneSection)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def resolve(self, path) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.base_dir / path

    def to_dict(self) -> dict:
        d = asdict(self)
        del d["base_dir"]
        return d


def _check_value(name: str, value, default) -> None:
    if default is None or default is MISSING:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        return
    if not ok:
        raise ConfigError(f"{name}: expected {type(default).__name__}, got {value!r}")


def _defaults(cls) -> dict:
    out = {}
    for f in fields(cls):
        if f.default is not MISSING:
            out[f.name] = f.default
        elif f.default_factory is not MISSING:
            out[f.name] = f.default_factory()
        else:
            out[f.name] = MISSING
    return out


def _section(cls, raw, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    defaults = _defaults(cls)
    unknown = set(raw) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    for name, value in raw.items():
        _check_value(f"{where}.{name}", value, defaults[name])
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict, *, base_dir=".", seed: int | None = None,
                     out: str | None = None) -> RunConfig:
    """Validate a decoded config and fill defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output"] = out
    allowed = {f.name for f in fields(RunConfig)} - {"base_dir"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    if "command" not in raw or raw["command"] not in COMMANDS:
        raise ConfigError(f"command must be one of {COMMANDS}")
    if "seed" not in raw:
        raise ConfigError("seed is required")
    top_defaults = _defaults(RunConfig)
    for name in ("seed", "output", "selector", "max_workers"):
        if name in raw:
            _check_value(name, raw[name], top_defaults[name] if name != "seed" else 0)
    if raw["seed"] < 0:
        raise ConfigError("seed must be nonnegative")
    if raw.get("max_workers", 1) < 1:
        raise ConfigError("max_workers must be at least 1")
    selectors = ("ga", "random", "weight-sum", "taylor1", "greedy")
    if raw.get("selector", "ga") not in selectors:
        raise ConfigError(f"selector must be one of {selectors}")
    model = raw.get("model", top_defaults["model"])
    if isinstance(model, dict):
        if model.get("arch") not in ARCHITECTURES:
            raise ConfigError(f"model.arch must be one of {sorted(ARCHITECTURES)}")
    elif not isinstance(model, str):
        raise ConfigError("model must be a path or an {\"arch\": ...} object")
    plan = raw.get("plan")
    if plan is not None and not isinstance(plan, (str, dict)):
        raise ConfigError("plan must be a path or a plan object")
    if isinstance(plan, dict):
        try:
            pruner.PruningPlan.from_dict(plan)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"plan: {exc}") from exc
    kw = {name: _section(cls, raw.get(name), name) for name, cls in SECTIONS.items()}
    top = {k: v for k, v in raw.items() if k not in SECTIONS}
    return RunConfig(**top, **kw, base_dir=Path(base_dir))


def parse_config(path, *, seed: int | None = None, out: str | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw, base_dir=path.parent, seed=seed, out=out)


def serialize_config(cfg: RunConfig) -> str:
    """Canonical JSON: every key present, sorted, two-space indent."""
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# helpers shared by commands


def _load_net(cfg: RunConfig, spec, seed: int):
    if isinstance(spec, dict):
        kwargs = {k: v for k, v in spec.items() if k != "arch"}
        kwargs.setdefault("seed", seed)
        for key in ("input_shape", "widths"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if "stages" in kwargs:
            kwargs["stages"] = tuple(tuple(s) for s in kwargs["stages"])
        return build(spec["arch"], **kwargs)
    return load_model(cfg.resolve(spec))


def _source(cfg: RunConfig, src):
    return src if isinstance(src, dict) else cfg.resolve(src)


def _load_data(cfg: RunConfig):
    ds = cfg.dataset
    train = load_dataset(ds.format, _source(cfg, ds.source), "train", limit=ds.limit,
                         num_classes=ds.num_classes)
    test_src = ds.source if ds.test_source is None else ds.test_source
    test = load_dataset(ds.format, _source(cfg, test_src), "test", limit=ds.test_limit,
                        num_classes=ds.num_classes, normalization=train.normalization)
    return train, test


def _load_plan(cfg: RunConfig) -> pruner.PruningPlan:
    if cfg.plan is None:
        return pruner.PruningPlan()
    if isinstance(cfg.plan, dict):
        return pruner.PruningPlan.from_dict(cfg.plan)
    path = cfg.resolve(cfg.plan)
    try:
        return pruner.PruningPlan.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid plan file {path}: {exc}") from exc


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# commands; each returns a JSON-able summary written to report.json


def cmd_stats(cfg: RunConfig, out: Path) -> dict:
    net = _load_net(cfg, cfg.model, cfg.seed)
    params, flops = model_stats(net)
    print(f"params {params} ({params / 1e6:.2f}M)  flops {flops} ({flops:.3e})")
    return {"params": params, "flops": flops, "input_shape": list(net.input_shape)}


def cmd_eval(cfg: RunConfig, out: Path) -> dict:
    net = _load_net(cfg, cfg.model, cfg.seed)
    _, test = _load_data(cfg)
    acc = evaluate(net, test)
    print(f"accuracy {acc:.6f} on {len(test.labels)} images")
    return {"accuracy": acc, "images": len(test.labels)}


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    net = _load_net(cfg, cfg.model, cfg.seed)
    train, test = _load_data(cfg)
    rng = np.random.default_rng(cfg.seed)
    sgd = SGD(cfg.train.optimizer())
    aug = cfg.train.augment()
    rows = []
    for epoch in range(cfg.train.epochs):
        loss = train_epoch(net, train, sgd, rng, epoch=epoch, augment=aug)
        acc = evaluate(net, test)
        rows.append([epoch, repr(loss), repr(acc)])
        print(f"epoch {epoch}  loss {loss:.4f}  test accuracy {acc:.4f}")
    _write_rows(out / "train_log.csv", ["epoch", "loss", "test_accuracy"], rows)
    save_model(net, out / "model")
    params, flops = model_stats(net)
    return {"accuracy": evaluate(net, test), "epochs": cfg.train.epochs, "params": params,
            "flops": flops}


def cmd_sensitivity(cfg: RunConfig, out: Path) -> dict:
    net = _load_net(cfg, cfg.model, cfg.seed)
    train, test = _load_data(cfg)
    profile = pruner.sensitivity_scan(net, train, cfg.sensitivity.rates, cfg.ga.config(cfg.seed),
                                      eval_data=test, layers=cfg.sensitivity.layers,
                                      sampling=cfg.sampling.config())
    profile.to_csv(out / "sensitivity.csv")
    return {"baseline": profile.baseline, "layers": profile.layers, "rates": profile.rates}


def cmd_prune(cfg: RunConfig, out: Path) -> dict:
    net = _load_net(cfg, cfg.model, cfg.seed)
    plan = _load_plan(cfg)
    teacher = _load_net(cfg, cfg.teacher, cfg.seed) if cfg.teacher else net.copy()
    dump_json(plan.to_dict(), out / "plan.json")
    if not plan.groups:
        if isinstance(cfg.model, str):
            shutil.copytree(cfg.resolve(cfg.model), out / "model", dirs_exist_ok=True)
        else:
            save_model(net, out / "model")
        params, flops = model_stats(net)
        report = pruner.PruneReport(params, flops, params, flops)
        report.write(out)
        return {"layers_pruned": 0}
    train, test = _load_data(cfg)
    pruned, report = pruner.prune_model(net, plan, train, cfg.ga.config(cfg.seed),
                                        cfg.finetune.config(cfg.seed), teacher, eval_data=test,
                                        sampling=cfg.sampling.config(), selector=cfg.selector)
    save_model(pruned, out / "model")
    report.write(out)
    (out / "masks").mkdir(exist_ok=True)
    for layer in report.layers:
        genetic.write_mask(out / "masks" / f"{layer.consumer}.json", layer.consumer, layer.mask)
    if report.ga_results:
        (out / "ga").mkdir(exist_ok=True)
        for lid, res in report.ga_results.items():
            genetic.write_run_log(out / "ga" / f"{lid}.csv", res)
    _write_rows(out / "trajectory.csv", ["stage", "epoch", "ce", "at_term", "total"],
                [[r["layer"], r["epoch"], repr(r["ce"]), repr(r["at"]), repr(r["total"])]
                 for r in report.trajectory])
    return {"layers_pruned": len(report.layers), "accuracy_before": report.accuracy_before,
            "accuracy_after": report.accuracy_after}


def cmd_finetune(cfg: RunConfig, out: Path) -> dict:
    student = _load_net(cfg, cfg.model, cfg.seed)
    teacher = _load_net(cfg, cfg.teacher, cfg.seed) if cfg.teacher else student.copy()
    train, test = _load_data(cfg)
    ft = cfg.finetune.config(cfg.seed)
    dcfg = DistillConfig(ft.beta, ft.pairs, cfg.train.epochs, cfg.train.optimizer(), cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    before = evaluate(student, test)
    student, traj = finetune_kd(student, teacher, train, dcfg, rng, augment=cfg.train.augment())
    after = evaluate(student, test)
    save_model(student, out / "model")
    write_trajectory(out / "trajectory.csv", traj)
    print(f"accuracy {before:.4f} -> {after:.4f}")
    return {"accuracy_before": before, "accuracy_after": after, "epochs": dcfg.epochs}


HANDLERS = {
    "train": cmd_train,
    "sensitivity": cmd_sensitivity,
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "stats": cmd_stats,
}


def _origin(exc: BaseException) -> str:
    """Innermost package module in the traceback."""
    module = "gaprune"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        name = frame.f_globals.get("__name__", "")
        if name.startswith("gaprune") and name != __name__:
            module = name
    return module


def run(cfg: RunConfig) -> int:
    """Execute one configured command; returns the process exit status."""
    out = cfg.resolve(cfg.output)
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(serialize_config(cfg), encoding="utf-8")
        summary = HANDLERS[cfg.command](cfg, out)
        dump_json({"command": cfg.command, "seed": cfg.seed, **summary}, out / "report.json"
                  if cfg.command != "prune" else out / "summary.json")
        status = 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        status = 1
    except (GapruneError, ArithmeticError, ValueError, OSError, KeyError) as exc:
        where = _origin(exc)
        layer = getattr(exc, "layer", None)
        ctx = f"{where}, layer {layer}" if layer else where
        print(f"error [{ctx}]: {exc}", file=sys.stderr)
        if isinstance(exc, pruner.PruningFailed):
            exc.report.write(out)
        status = 2
    finished = datetime.datetime.now(datetime.timezone.utc).isoformat()
    if out.is_dir():
        dump_json({"command": cfg.command, "started": started, "finished": finished,
                   "status": status, "version": __version__}, out / METADATA_FILE)
    return status


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="gaprune", description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--out", default=None, help="override the output directory")
    args = ap.parse_args(argv)
    try:
        out = None if args.out is None else str(Path(args.out).resolve())
        cfg = parse_config(args.config, seed=args.seed, out=out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
