"""Sampling poisoned training runs and labeling their terminal parameters.

One trajectory = fresh initialization, (possibly poisoned) training for the
configured horizon, one extra full-batch update of the terminal state, and
evaluation of the degradation gap against the clean baseline.
"""

from __future__ import annotations

import csv
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median
from typing import Optional, Sequence

import numpy as np

from . import attacks
from .data import LabeledDataset, load_idx, make_blobs, make_moons, split, subsample
from .nn import (Classifier, DivergenceError, MlpSpec, OptimizerConfig, OptimizerState, accuracy,
                 successor, train)

log = logging.getLogger(__name__)

TRAIN_TIME = "train"
TEST_TIME = "test"

# Seed streams. A seed is master_seed * 2**40 + stream * 2**32 + index, so
# streams never overlap for indices below 2**32.
STREAM_BASELINE = 1
STREAM_TRAIN = 2
STREAM_SCENARIO = 3
STREAM_HOLDOUT = 4
STREAM_BARRIER = 5
STREAM_SURROGATE = 6
STREAM_DATA = 7
STREAM_INITIAL = 8
STREAM_NAMES = {
    STREAM_BASELINE: "baseline", STREAM_TRAIN: "nnbc_training", STREAM_SCENARIO: "scenarios",
    STREAM_HOLDOUT: "holdout", STREAM_BARRIER: "barrier_init", STREAM_SURROGATE: "surrogate",
    STREAM_DATA: "data", STREAM_INITIAL: "extra_initial",
}
_INDEX_SPAN = 2 ** 32


def seed_for(master_seed: int, stream: int, index: int = 0) -> int:
    if not 0 <= index < _INDEX_SPAN:
        raise ValueError("seed index out of range")
    return (int(master_seed) << 40) + (stream << 32) + int(index)


def stream_range(master_seed: int, stream: int) -> tuple[int, int]:
    lo = seed_for(master_seed, stream, 0)
    return lo, lo + _INDEX_SPAN


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"
    n_train: int = 400
    n_test: int = 200
    m: int = 2
    k: int = 2
    separation: float = 3.0
    noise: float = 0.1
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None

    def materialize(self, seed) -> tuple[LabeledDataset, LabeledDataset]:
        split_seed = [int(seed), 1]
        if self.kind == "blobs":
            full = make_blobs(seed, self.n_train + self.n_test, self.m, self.k, self.separation)
            return split(full, split_seed, self.n_test)
        if self.kind == "moons":
            n = self.n_train + self.n_test
            full = make_moons(seed, n + (n % 2), self.noise)
            if n % 2:
                full = full.take(np.arange(n))
            return split(full, split_seed, self.n_test)
        if self.kind == "idx":
            if not (self.train_images and self.train_labels):
                raise ValueError("idx datasets need train_images and train_labels")
            train_set = load_idx(self.train_images, self.train_labels)
            if self.test_images and self.test_labels:
                test_set = load_idx(self.test_images, self.test_labels)
                train_set = subsample(train_set, split_seed, min(self.n_train, train_set.n))
                test_set = subsample(test_set, [int(seed), 2], min(self.n_test, test_set.n))
                return train_set, test_set
            keep = subsample(train_set, split_seed, min(self.n_train + self.n_test, train_set.n))
            return split(keep, [int(seed), 2], self.n_test)
        raise ValueError(f"unknown dataset kind {self.kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec
    hidden: tuple[int, ...] = (16, 16)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    horizon: int = 200
    mode: str = TRAIN_TIME
    budget_grid: tuple[float, ...] = (0.0,)
    p: str = "linf"
    rho: float = 1.0
    attack: str = "pgd"
    alpha: float = 0.05
    clean_runs: int = 5
    master_seed: int = 0
    pgd_steps: int = attacks.DEFAULT_PGD_STEPS
    pgd_step_size: Optional[float] = None
    trigger: Optional[attacks.TriggerSpec] = None
    clip: Optional[tuple[float, float]] = None
    paired: bool = False
    g_c_override: Optional[float] = None

    def __post_init__(self):
        grid = tuple(float(d) for d in self.budget_grid)
        if not grid or grid[0] != 0.0 or any(b < a for a, b in zip(grid, grid[1:])):
            raise ValueError("budget grid must be sorted ascending and start at 0")
        object.__setattr__(self, "budget_grid", grid)
        object.__setattr__(self, "p", attacks.parse_norm(self.p))
        if self.mode not in (TRAIN_TIME, TEST_TIME):
            raise ValueError(f"mode must be {TRAIN_TIME!r} or {TEST_TIME!r}")
        if self.attack not in ("pgd", "bda"):
            raise ValueError("attack must be 'pgd' or 'bda'")
        if self.horizon < 1 or self.clean_runs < 1:
            raise ValueError("horizon and clean_runs must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")


@dataclass
class TrajectorySample:
    index: int
    seed: int
    mode: str
    delta: float
    theta0: np.ndarray
    theta_final: np.ndarray
    theta_final_succ: np.ndarray
    theta0_succ: np.ndarray
    g_p: float
    gap: float
    safe: bool
    diverged: bool = False


@dataclass
class LabeledParamSets:
    """Initial, safe and unsafe parameter sets; every member carries its successor."""

    initial: np.ndarray
    initial_succ: np.ndarray
    safe: np.ndarray
    safe_succ: np.ndarray
    unsafe: np.ndarray
    unsafe_succ: np.ndarray
    conditions: list[str] = field(default_factory=list)

    @property
    def vartheta(self) -> tuple[np.ndarray, np.ndarray]:
        """All members of the union with their successors, stacked."""
        pts = np.vstack([self.initial, self.safe, self.unsafe])
        succ = np.vstack([self.initial_succ, self.safe_succ, self.unsafe_succ])
        return pts, succ

    def with_extra_initial(self, thetas: np.ndarray, succs: np.ndarray) -> "LabeledParamSets":
        if len(thetas) == 0:
            return self
        return LabeledParamSets(np.vstack([self.initial, thetas]),
                                np.vstack([self.initial_succ, succs]), self.safe, self.safe_succ,
                                self.unsafe, self.unsafe_succ, list(self.conditions))

    @property
    def safe_empty(self) -> bool:
        return len(self.safe) == 0

    @property
    def unsafe_empty(self) -> bool:
        return len(self.unsafe) == 0


@dataclass
class Baseline:
    g_c: float
    accuracies: list[float]
    seeds: list[int]
    source: str


class BaselineError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# the per-experiment simulation context


class Pipeline:
    """Materialized datasets, the attack surrogate and memoized attack crafting."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.train_set, self.test_set = config.dataset.materialize(
            seed_for(config.master_seed, STREAM_DATA))
        k = max(self.train_set.k, self.test_set.k)
        self.spec = MlpSpec((self.train_set.m, *config.hidden, k))
        self.trigger = config.trigger or attacks.default_trigger(self.train_set.m)
        self._surrogate: Optional[Classifier] = None
        self._pgd_cache: dict[float, np.ndarray] = {}
        self._clean_cache: dict[tuple[int, int], tuple] = {}

    # -- helpers
    def optimizer_for(self, seed: int) -> OptimizerConfig:
        cfg = self.config.optimizer
        return OptimizerConfig(cfg.kind, cfg.learning_rate, cfg.batch_size, cfg.adam_beta1,
                               cfg.adam_beta2, cfg.adam_epsilon, seed)

    def budget(self, delta: float) -> attacks.PerturbationBudget:
        return attacks.PerturbationBudget(self.config.p, delta, self.config.rho)

    @property
    def surrogate(self) -> Classifier:
        """Clean-trained model used to craft train-time PGD poisons."""
        if self._surrogate is None:
            seed = seed_for(self.config.master_seed, STREAM_SURROGATE)
            clf = Classifier.init(self.spec, [1, seed])
            rec = train(clf, self.train_set.features, self.train_set.labels,
                        self.optimizer_for(seed), self.config.horizon)
            self._surrogate = clf.with_params(rec.theta_final)
        return self._surrogate

    def pgd_rows(self, delta: float) -> np.ndarray:
        if delta not in self._pgd_cache:
            self._pgd_cache[delta] = attacks.pgd_perturbation(
                self.surrogate, self.train_set.features, self.train_set.labels, self.config.p,
                delta, self.config.pgd_steps, self.config.pgd_step_size, self.config.clip)
        return self._pgd_cache[delta]

    def warm(self, deltas: Sequence[float]) -> None:
        """Precompute every attack artifact shared by trajectories (before fan-out)."""
        if self.config.mode == TRAIN_TIME and self.config.attack == "pgd":
            for d in sorted(set(deltas)):
                if d > 0:
                    self.pgd_rows(d)

    def poisoned_train(self, delta: float, seed: int) -> LabeledDataset:
        budget = self.budget(delta)
        rng_seed = [2, seed]
        if self.config.attack == "bda":
            out, _ = attacks.backdoor_poison(self.train_set, self.trigger, budget, rng_seed,
                                             self.config.clip)
            return out
        if budget.delta == 0 or budget.rho == 0:
            return self.train_set
        out, _ = attacks.pgd_poison(self.train_set, self.surrogate, budget, seed=rng_seed,
                                    precomputed=self.pgd_rows(delta))
        return out

    def perturbed_test(self, victim: Classifier, delta: float, seed: int) -> LabeledDataset:
        budget = self.budget(delta)
        rng_seed = [2, seed]
        if self.config.attack == "bda":
            out, _ = attacks.backdoor_poison(self.test_set, self.trigger, budget, rng_seed,
                                             self.config.clip)
            return out
        out, _ = attacks.pgd_evade(self.test_set, victim, budget, self.config.pgd_steps,
                                   self.config.pgd_step_size, rng_seed, self.config.clip)
        return out

    # -- simulation
    def train_once(self, init_seed: int, seed: int, dataset: LabeledDataset):
        # paired trajectories share the whole training stream, not only theta(0)
        clf = Classifier.init(self.spec, [1, init_seed])
        opt = self.optimizer_for(init_seed)
        theta0_succ = _full_batch_successor(clf, opt, dataset)
        try:
            rec = train(clf, dataset.features, dataset.labels, opt, self.config.horizon)
        except DivergenceError as err:
            log.warning("trajectory seed %d diverged at iteration %d", seed, err.iteration)
            last = err.last_params
            return clf.params.copy(), theta0_succ, last, last.copy(), True
        return rec.theta0, theta0_succ, rec.theta_final, rec.succ_of_final, False

    def clean_run(self, init_seed: int, seed: int):
        key = (init_seed, seed)
        if key not in self._clean_cache:
            self._clean_cache[key] = self.train_once(init_seed, seed, self.train_set)
        return self._clean_cache[key]

    def simulate(self, index: int, seed: int, init_seed: int, delta: float,
                 g_c: float) -> TrajectorySample:
        cfg = self.config
        if cfg.mode == TRAIN_TIME:
            dataset = self.poisoned_train(delta, seed)
            theta0, theta0_succ, final, succ, diverged = (
                self.clean_run(init_seed, seed) if dataset is self.train_set
                else self.train_once(init_seed, seed, dataset))
            eval_set = self.test_set
            victim = Classifier(self.spec, final)
        else:
            theta0, theta0_succ, final, succ, diverged = self.clean_run(init_seed, seed)
            victim = Classifier(self.spec, final)
            eval_set = self.perturbed_test(victim, delta, seed) if not diverged else self.test_set
        g_p = 0.0 if diverged else accuracy(victim, eval_set.features, eval_set.labels)
        gap = g_c - g_p
        return TrajectorySample(index, seed, cfg.mode, float(delta), theta0, final, succ,
                                theta0_succ, g_p, gap, (gap <= cfg.alpha) and not diverged,
                                diverged)


def _full_batch_successor(clf: Classifier, opt: OptimizerConfig, dataset: LabeledDataset):
    return successor(clf, OptimizerState(), opt, dataset.features, dataset.labels)


# ---------------------------------------------------------------------------
# fan-out

_WORKER_PIPELINE: Optional[Pipeline] = None


def _init_worker(pipeline: Pipeline) -> None:
    global _WORKER_PIPELINE
    _WORKER_PIPELINE = pipeline


def _run_task(task):
    return _WORKER_PIPELINE.simulate(*task)


def _run_tasks(pipeline: Pipeline, tasks: list[tuple], jobs: int) -> list[TrajectorySample]:
    if jobs <= 1 or len(tasks) < 2:
        return [pipeline.simulate(*t) for t in tasks]
    pipeline.warm([t[3] for t in tasks])
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                             initargs=(pipeline,)) as pool:
        # map preserves task order, so the merge is scheduling-independent
        return list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


# ---------------------------------------------------------------------------
# operations


def clean_baseline(pipeline: Pipeline, k: Optional[int] = None,
                   override: Optional[float] = None, jobs: int = 1) -> Baseline:
    """Median clean test accuracy over ``k`` independently seeded runs."""
    cfg = pipeline.config
    override = cfg.g_c_override if override is None else override
    if override is not None:
        if not 0.0 <= override <= 1.0:
            raise ValueError("g_c override must lie in [0, 1]")
        return Baseline(float(override), [], [], "user-set")
    k = cfg.clean_runs if k is None else k
    if k < 1:
        raise ValueError("clean_runs must be at least 1")
    accs, seeds = [], []
    for i in range(k):
        seed = seed_for(cfg.master_seed, STREAM_BASELINE, i)
        _, _, final, _, diverged = pipeline.clean_run(seed, seed)
        if diverged:
            continue
        clf = Classifier(pipeline.spec, final)
        accs.append(accuracy(clf, pipeline.test_set.features, pipeline.test_set.labels))
        seeds.append(seed)
    if not accs:
        raise BaselineError("every clean baseline run diverged")
    return Baseline(float(median(accs)), accs, seeds, "median")


def sample_initial(pipeline: Pipeline, n: int, offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Extra draws from the initialization distribution with clean-data successors."""
    d = pipeline.spec.n_params
    thetas, succs = np.zeros((n, d)), np.zeros((n, d))
    for i in range(n):
        seed = seed_for(pipeline.config.master_seed, STREAM_INITIAL, offset + i)
        clf = Classifier.init(pipeline.spec, [1, seed])
        thetas[i] = clf.params
        succs[i] = _full_batch_successor(clf, pipeline.optimizer_for(seed), pipeline.train_set)
    return thetas, succs


def cyclic_budgets(grid: Sequence[float], n: int) -> list[float]:
    return [float(grid[i % len(grid)]) for i in range(n)]


def generate(pipeline: Pipeline, n: int, g_c: float, stream: int = STREAM_TRAIN,
             budgets: Optional[Sequence[float]] = None, offset: int = 0,
             jobs: int = 1) -> list[TrajectorySample]:
    """Run ``n`` trajectories; budgets default to cycling through the grid."""
    budgets = cyclic_budgets(pipeline.config.budget_grid, n) if budgets is None else list(budgets)
    if len(budgets) != n:
        raise ValueError("need exactly one budget per trajectory")
    return generate_at(pipeline, [(offset + i, d) for i, d in enumerate(budgets)], g_c,
                       stream, jobs)


def generate_at(pipeline: Pipeline, items: Sequence[tuple[int, float]], g_c: float,
                stream: int = STREAM_TRAIN, jobs: int = 1) -> list[TrajectorySample]:
    """Trajectories for explicit ``(index, budget)`` pairs of one seed stream."""
    cfg = pipeline.config
    G = len(cfg.budget_grid)
    tasks = []
    for index, delta in items:
        seed = seed_for(cfg.master_seed, stream, index)
        init_seed = (seed_for(cfg.master_seed, stream, index // G)
                     if cfg.paired and stream == STREAM_TRAIN else seed)
        tasks.append((index, seed, init_seed, float(delta), g_c))
    return _run_tasks(pipeline, tasks, jobs)


def relabel(samples: Sequence[TrajectorySample], alpha: float,
            g_c: Optional[float] = None) -> list[tuple[float, bool]]:
    """(gap, safe) pairs under threshold ``alpha`` and optional new baseline."""
    out = []
    for s in samples:
        gap = s.gap if g_c is None else g_c - s.g_p
        out.append((gap, (not s.diverged) and gap <= alpha))
    return out


def label(samples: Sequence[TrajectorySample], alpha: float, g_c: Optional[float] = None,
          invariance_radius: Optional[float] = None) -> LabeledParamSets:
    """Partition terminal parameters by ``gap <= alpha``; initial states go to the initial set.

    With ``invariance_radius`` set, only trajectories whose budget is within it
    contribute safe members (their successors follow dynamics inside the
    radius). Initial states and unsafe terminals are kept regardless of budget:
    neither depends on the perturbation.
    """
    if not samples:
        raise ValueError("no samples to label")
    d = samples[0].theta0.shape[0]
    init, init_s, safe, safe_s, uns, uns_s = [], [], [], [], [], []
    for s, (_, ok) in zip(samples, relabel(samples, alpha, g_c)):
        inside = invariance_radius is None or s.delta <= invariance_radius + 1e-12
        init.append(s.theta0)
        init_s.append(s.theta0_succ)
        if not ok:
            uns.append(s.theta_final)
            uns_s.append(s.theta_final_succ)
        elif inside:
            safe.append(s.theta_final)
            safe_s.append(s.theta_final_succ)

    def stack(rows):
        return np.vstack(rows) if rows else np.zeros((0, d))

    sets = LabeledParamSets(stack(init), stack(init_s), stack(safe), stack(safe_s),
                            stack(uns), stack(uns_s))
    if sets.safe_empty:
        sets.conditions.append("safe set empty")
    if sets.unsafe_empty:
        sets.conditions.append("unsafe set empty")
    for c in sets.conditions:
        log.info("labeling at alpha=%g: %s", alpha, c)
    return sets


def _radius(samples, alpha, g_c, prefix: bool) -> float:
    by_budget: dict[float, bool] = {}
    for s, (_, ok) in zip(samples, relabel(samples, alpha, g_c)):
        by_budget[s.delta] = by_budget.get(s.delta, True) and ok
    radius = 0.0
    for delta in sorted(by_budget):
        if by_budget[delta]:
            radius = delta
        elif prefix:
            break
    return radius


def empirical_radius(samples: Sequence[TrajectorySample], alpha: float,
                     g_c: Optional[float] = None) -> float:
    """Largest grid budget such that every sample at or below it is safe."""
    return _radius(samples, alpha, g_c, prefix=True)


def max_rule_radius(samples: Sequence[TrajectorySample], alpha: float,
                    g_c: Optional[float] = None) -> float:
    """Largest budget whose samples are all safe, ignoring smaller unsafe budgets."""
    return _radius(samples, alpha, g_c, prefix=False)


# ---------------------------------------------------------------------------
# trajectory log: CSV rows plus a binary sidecar of parameter vectors

LOG_COLUMNS = ["index", "seed", "mode", "delta", "g_p", "gap", "safe", "diverged"]
SIDECAR_MAGIC = b"BCTRAJ01"
ROLES = {"theta0": 0, "final": 1, "succ": 2, "theta0_succ": 3}


def write_log(samples: Sequence[TrajectorySample], csv_path, sidecar_path=None) -> None:
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for s in samples:
            w.writerow([s.index, s.seed, s.mode, repr(s.delta), repr(s.g_p), repr(s.gap),
                        int(s.safe), int(s.diverged)])
    if sidecar_path is None:
        return
    with open(sidecar_path, "wb") as f:
        f.write(SIDECAR_MAGIC)
        for s in samples:
            for role, vec in (("theta0", s.theta0), ("final", s.theta_final),
                              ("succ", s.theta_final_succ), ("theta0_succ", s.theta0_succ)):
                v = np.ascontiguousarray(vec, dtype="<f8")
                f.write(struct.pack("<IBI", s.index, ROLES[role], v.size))
                f.write(v.tobytes())


def read_log(csv_path) -> list[dict]:
    rows = []
    with open(csv_path, newline="") as f:
        for r in csv.DictReader(f):
            rows.append({
                "index": int(r["index"]), "seed": int(r["seed"]), "mode": r["mode"],
                "delta": float(r["delta"]), "g_p": float(r["g_p"]), "gap": float(r["gap"]),
                "safe": r["safe"] == "1", "diverged": r["diverged"] == "1",
            })
    return rows


def read_sidecar(path) -> dict[tuple[int, str], np.ndarray]:
    names = {v: k for k, v in ROLES.items()}
    raw = Path(path).read_bytes()
    if raw[:8] != SIDECAR_MAGIC:
        raise ValueError(f"{path}: not a trajectory sidecar file")
    out = {}
    pos = 8
    header = struct.calcsize("<IBI")
    while pos < len(raw):
        index, role, length = struct.unpack_from("<IBI", raw, pos)
        pos += header
        end = pos + 8 * length
        if end > len(raw):
            raise OSError(f"{path}: truncated parameter record for index {index}")
        out[(index, names[role])] = np.frombuffer(raw[pos:end], dtype="<f8").astype(np.float64)
        pos = end
    return out


def load_samples(csv_path, sidecar_path) -> list[TrajectorySample]:
    vectors = read_sidecar(sidecar_path)
    samples = []
    for r in read_log(csv_path):
        i = r["index"]
        samples.append(TrajectorySample(
            i, r["seed"], r["mode"], r["delta"], vectors[(i, "theta0")], vectors[(i, "final")],
            vectors[(i, "succ")], vectors[(i, "theta0_succ")], r["g_p"], r["gap"], r["safe"],
            r["diverged"]))
    return samples


__all__ = [
    "ExperimentConfig", "DatasetSpec", "Pipeline", "TrajectorySample", "LabeledParamSets",
    "Baseline", "BaselineError", "clean_baseline", "generate", "generate_at", "label", "relabel",
    "empirical_radius", "max_rule_radius", "cyclic_budgets", "seed_for", "stream_range",
    "write_log", "read_log", "read_sidecar", "load_samples", "TRAIN_TIME", "TEST_TIME",
    "STREAM_BASELINE", "STREAM_TRAIN", "STREAM_SCENARIO", "STREAM_HOLDOUT", "STREAM_BARRIER",
    "STREAM_SURROGATE", "STREAM_DATA", "STREAM_INITIAL", "STREAM_NAMES", "sample_initial",
]
