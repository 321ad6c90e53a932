"""Genetic search over binary channel masks for a single layer.

A chromosome is a 0/1 vector over the layer's input channels (1 = keep).
Individuals are scored with the second-order error from :mod:`gaprune.fitness`;
selection is roulette-wheel with elitism, followed by single-point crossover
or single-bit mutation, and every offspring is repaired back to exactly ``K``
kept channels.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fitness import batch_taylor_error, channel_quadratic, population_fitness


@dataclass
class GAConfig:
    population_size: int = 20
    crossover_prob: float = 0.1
    mutation_prob: float = 0.1
    max_iterations: int | None = None
    elitism: int = 1
    seed: int = 0
    min_iterations: int = 50

    def __post_init__(self):
        for name in ("crossover_prob", "mutation_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.population_size < 2:
            raise ValueError("population_size must be at least 2")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not 1 <= self.elitism < self.population_size:
            raise ValueError("elitism must be at least 1 and smaller than the population")

    def iterations_for(self, channels: int) -> int:
        if self.max_iterations is not None:
            return self.max_iterations
        return max(10 * channels, self.min_iterations)


@dataclass
class Population:
    individuals: np.ndarray  # P×C of {0, 1}
    generation: int = 0

    @property
    def size(self) -> int:
        return self.individuals.shape[0]


def kept_channels(channels: int, rate: float) -> int:
    """K = round((1 − r)·C), half rounding up."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"compression rate must lie in [0, 1), got {rate}")
    k = int(np.floor((1.0 - rate) * channels + 0.5))
    if k < 1:
        raise ValueError(f"rate {rate} would remove every one of {channels} channels")
    return min(k, channels)


def bernoulli_population(channels: int, p: float, size: int, rng) -> np.ndarray:
    if not 0.0 < p <= 1.0:
        raise ValueError(f"keep probability must lie in (0, 1], got {p}")
    if channels < 1:
        raise ValueError("need at least one channel")
    return (rng.random((size, channels)) < p).astype(np.int8)


def init_population(channels: int, p: float, size: int, rng) -> Population:
    """Bernoulli(p) bits, each individual repaired to K = round(p·C) ones."""
    bits = bernoulli_population(channels, p, size, rng)
    k = max(1, int(np.floor(p * channels + 0.5)))
    return Population(np.stack([repair(row, k, rng) for row in bits]))


def repair(chrom, k: int, rng) -> np.ndarray:
    """Flip the fewest bits, chosen uniformly, so that exactly ``k`` are set."""
    chrom = np.array(chrom, dtype=np.int8)
    if not 1 <= k <= chrom.size:
        raise ValueError(f"cannot repair to {k} ones with {chrom.size} bits")
    ones = int(chrom.sum())
    if ones > k:
        idx = np.flatnonzero(chrom == 1)
        chrom[rng.choice(idx, ones - k, replace=False)] = 0
    elif ones < k:
        idx = np.flatnonzero(chrom == 0)
        chrom[rng.choice(idx, k - ones, replace=False)] = 1
    return chrom


def roulette_select(fitness, rng) -> int:
    """Draw an index with probability proportional to ``fitness``."""
    f = np.asarray(fitness, dtype=np.float64)
    total = f.sum()
    if total <= 0:
        return int(rng.integers(f.size))
    cum = np.cumsum(f)
    return int(min(np.searchsorted(cum, rng.random() * total, side="right"), f.size - 1))


def splice(a, b, cut: int) -> np.ndarray:
    return np.concatenate([np.asarray(a)[:cut], np.asarray(b)[cut:]]).astype(np.int8)


def crossover(a, b, p_c: float, rng, cut: int | None = None) -> np.ndarray:
    """Single-point crossover: with probability ``p_c`` the child takes
    ``a[:cut] + b[cut:]`` for a uniform cut, otherwise it copies ``a``."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("parents must have equal length")
    if rng.random() < p_c:
        if cut is None:
            cut = int(rng.integers(a.size))
        return splice(a, b, cut)
    return a.astype(np.int8, copy=True)


def mutate(chrom, p_m: float, rng, bit: int | None = None) -> np.ndarray:
    """Pick one bit uniformly and invert it with probability ``p_m``."""
    chrom = np.array(chrom, dtype=np.int8)
    if bit is None:
        bit = int(rng.integers(chrom.size))
    if rng.random() < p_m:
        chrom[bit] ^= 1
    return chrom


def mask_to_hex(mask) -> str:
    bits = "".join(str(int(b)) for b in mask)
    bits += "0" * (-len(bits) % 4)
    return "".join(f"{int(bits[i:i + 4], 2):x}" for i in range(0, len(bits), 4))


def hex_to_mask(text: str, length: int) -> np.ndarray:
    bits = "".join(f"{int(ch, 16):04b}" for ch in text)[:length]
    return np.array([int(b) for b in bits], dtype=np.int8)


@dataclass
class GenerationLog:
    generation: int
    best_error: float
    mean_error: float
    best_mask: str


@dataclass
class GAResult:
    mask: np.ndarray
    error: float
    log: list[GenerationLog] = field(default_factory=list)
    kept: int = 0

    @property
    def best_curve(self) -> np.ndarray:
        return np.array([g.best_error for g in self.log])


def evolve(hessian, weights, rate: float, cfg: GAConfig | None = None, rng=None,
           quadratic: np.ndarray | None = None) -> GAResult:
    """Search a keep-mask for the input channels of one conv layer.

    ``weights`` is the layer's F×C×k×k kernel and ``hessian`` the matching
    D×D matrix.  Each generation copies the ``cfg.elitism`` best individuals,
    then fills the rest by roulette: with probability p_C a second parent is
    drawn for crossover, otherwise the parent is mutated (probability p_M).
    Offspring are repaired to K ones.  Returns the lowest-error mask seen.
    """
    cfg = cfg or GAConfig()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    channels = np.shape(weights)[1]
    k = kept_channels(channels, rate)
    q = channel_quadratic(hessian, weights) if quadratic is None else quadratic
    if k == channels:
        mask = np.ones(channels, dtype=np.int8)
        return GAResult(mask, 0.0, [GenerationLog(0, 0.0, 0.0, mask_to_hex(mask))], k)

    iterations = cfg.iterations_for(channels)
    pop = init_population(channels, k / channels, cfg.population_size, rng).individuals
    best_mask, best_err = None, np.inf
    log = []
    for t in range(iterations):
        errors = batch_taylor_error(q, pop)
        order = np.argsort(errors, kind="stable")
        if errors[order[0]] < best_err:
            best_err = float(errors[order[0]])
            best_mask = pop[order[0]].copy()
        log.append(GenerationLog(t, float(errors[order[0]]), float(errors.mean()),
                                 mask_to_hex(pop[order[0]])))
        if t == iterations - 1:
            break
        fit = population_fitness(errors)
        children = [pop[i].copy() for i in order[: cfg.elitism]]
        while len(children) < cfg.population_size:
            parent = pop[roulette_select(fit, rng)]
            if rng.random() < cfg.crossover_prob:
                mate = pop[roulette_select(fit, rng)]
                child = splice(parent, mate, int(rng.integers(channels)))
            else:
                child = mutate(parent, cfg.mutation_prob, rng)
            children.append(repair(child, k, rng))
        pop = np.stack(children)
    return GAResult(best_mask, best_err, log, k)


def write_run_log(path, result: GAResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["generation", "best_error", "mean_error", "best_mask"])
        for g in result.log:
            w.writerow([g.generation, repr(g.best_error), repr(g.mean_error), g.best_mask])


def write_mask(path, layer_id: str, mask) -> None:
    mask = [int(b) for b in mask]
    payload = {"layer_id": layer_id, "k": sum(mask), "mask": mask}
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


def read_mask(path) -> tuple[str, np.ndarray]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    mask = np.array(payload["mask"], dtype=np.int8)
    if int(mask.sum()) != payload["k"]:
        raise ValueError(f"{path}: popcount disagrees with k")
    return payload["layer_id"], mask
