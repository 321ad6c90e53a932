import itertools

import numpy as np
import pytest

from gaprune import genetic
from gaprune.dataio import load_dataset
from gaprune.fitness import compute_hessian
from gaprune.netcore import small_cnn
from gaprune.sampler import VolumeSet


# Every GA run anywhere in the suite is audited for a non-increasing best-error
# curve; the acceptance suite reports the tally.
EVOLVE_AUDIT = {"runs": 0, "violations": 0}
_evolve = genetic.evolve


def _audited_evolve(*args, **kwargs):
    res = _evolve(*args, **kwargs)
    EVOLVE_AUDIT["runs"] += 1
    if np.any(np.diff(res.best_curve) > 0):
        EVOLVE_AUDIT["violations"] += 1
        raise AssertionError("best error increased between generations")
    return res


genetic.evolve = _audited_evolve

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
    terminalreporter.write_line(
        f"GA runs audited for monotone best error: {EVOLVE_AUDIT['runs']}, "
        f"violations: {EVOLVE_AUDIT['violations']}")


def numeric_grad(f, x, eps=1e-4):
    """Central differences of scalar ``f`` with respect to array ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    for _ in it:
        i = it.multi_index
        orig = x[i].copy()
        x[i] = orig + eps
        fp = f()
        x[i] = orig - eps
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_net():
    return small_cnn(num_classes=10, input_shape=(1, 12, 12), widths=(4, 6, 6, 8), seed=3)


@pytest.fixture(scope="session")
def tiny_data():
    return load_dataset("synthetic", {"kind": "blobs", "n": 120, "seed": 5, "shape": [1, 12, 12],
                                      "classes": 10}, "train")


def ga_fixture(seed, c=10, f=8, k=3, n=500):
    """Random conv layer with per-channel input scales, as (H, W, VolumeSet)."""
    r = np.random.default_rng(1000 + seed)
    w = r.standard_normal((f, c, k, k))
    x = r.standard_normal((n, c * k * k)) * r.uniform(0.2, 2.0, size=c).repeat(k * k)
    b = r.standard_normal(f)
    vs = VolumeSet(x, x @ w.reshape(f, -1).T + b, "fixture", np.zeros((n, 3), np.int64))
    return compute_hessian(vs), w, vs


def all_masks(c, k):
    return np.array([[1 if i in s else 0 for i in range(c)]
                     for s in itertools.combinations(range(c), k)], dtype=np.int8)


def within_3_sigma(count, trials, p):
    sigma = np.sqrt(trials * p * (1 - p))
    return abs(count - trials * p) <= 3 * sigma
