"""Feature-space perturbations under row-wise l2 / l-inf budgets.

Train-time poisoning and test-time evasion share one PGD core: each selected
row ascends its own cross-entropy under a fixed model and is projected back
onto the budget ball after every step. Labels are never modified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import LabeledDataset
from .nn import Classifier, per_sample_input_grad

NORMS = ("l2", "linf")
DEFAULT_PGD_STEPS = 40


def parse_norm(p) -> str:
    key = str(p).lower().replace("ℓ", "l").replace("_", "")
    aliases = {"2": "l2", "l2": "l2", "inf": "linf", "linf": "linf", "infinity": "linf"}
    if key not in aliases:
        raise ValueError(f"unsupported norm {p!r}; use l2 or linf")
    return aliases[key]


@dataclass(frozen=True)
class PerturbationBudget:
    p: str
    delta: float
    rho: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "p", parse_norm(self.p))
        if not self.delta >= 0:
            raise ValueError("delta must be non-negative")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")

    def n_perturbed(self, n: int) -> int:
        # rounding first keeps e.g. 0.3 * 10 from ceiling to 4
        return min(n, math.ceil(round(self.rho * n, 9)))


@dataclass(frozen=True)
class PoisonPlan:
    indices: np.ndarray
    delta_matrix: np.ndarray

    @classmethod
    def empty(cls, m: int) -> "PoisonPlan":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, m)))

    def full_matrix(self, n: int) -> np.ndarray:
        out = np.zeros((n, self.delta_matrix.shape[1]))
        out[self.indices] = self.delta_matrix
        return out

    def max_row_norm(self, p: str) -> float:
        if len(self.indices) == 0:
            return 0.0
        return float(row_norms(self.delta_matrix, p).max())


@dataclass(frozen=True)
class TriggerSpec:
    patch_coords: tuple[int, ...]
    direction: Optional[tuple[float, ...]] = None
    target_label: Optional[int] = None

    def pattern(self, m: int, p: str) -> np.ndarray:
        """Full-width trigger direction with unit ``p``-norm."""
        coords = np.asarray(self.patch_coords, dtype=np.int64)
        if coords.size == 0 or coords.min() < 0 or coords.max() >= m:
            raise ValueError(f"trigger coordinates must lie in [0, {m})")
        d = np.ones(coords.size) if self.direction is None else np.asarray(self.direction, float)
        if d.shape != coords.shape:
            raise ValueError("trigger direction must match the patch coordinates")
        full = np.zeros(m)
        full[coords] = d
        norm = row_norms(full[None, :], p)[0]
        if norm == 0:
            raise ValueError("trigger direction must be non-zero")
        return full / norm


def row_norms(v: np.ndarray, p: str) -> np.ndarray:
    if parse_norm(p) == "linf":
        return np.abs(v).max(axis=-1)
    return np.sqrt((v * v).sum(axis=-1))


def project_lp(v, p: str, delta: float) -> np.ndarray:
    """Project ``v`` (a vector, or rows of a matrix) onto the ``delta``-ball."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    v = np.asarray(v, dtype=np.float64)
    if parse_norm(p) == "linf":
        return np.clip(v, -delta, delta)
    norms = row_norms(v, "l2")
    scale = np.where(norms > delta, delta / np.where(norms > 0, norms, 1.0), 1.0)
    return v * (scale[..., None] if v.ndim > 1 else scale)


def select_indices(n: int, budget: PerturbationBudget, seed) -> np.ndarray:
    r = budget.n_perturbed(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=r, replace=False))


def pgd_perturbation(model: Classifier, x: np.ndarray, y: np.ndarray, p: str, delta: float,
                     steps: int = DEFAULT_PGD_STEPS,
                     step_size: Optional[float] = None,
                     clip: Optional[tuple[float, float]] = None) -> np.ndarray:
    """Per-row PGD ascent on each sample's cross-entropy, starting from zero.

    Rows are independent, so crafting all rows at once equals crafting each
    alone. Returns the perturbation matrix (same shape as ``x``).
    """
    p = parse_norm(p)
    if delta == 0 or x.shape[0] == 0:
        return np.zeros_like(x)
    if steps < 1:
        raise ValueError("steps must be positive")
    step_size = 2.5 * delta / steps if step_size is None else step_size
    pert = np.zeros_like(x)
    for _ in range(steps):
        g = per_sample_input_grad(model, x + pert, y)
        if p == "linf":
            direction = np.sign(g)
        else:
            norms = row_norms(g, "l2")
            direction = g / np.where(norms > 0, norms, 1.0)[:, None]
        pert = project_lp(pert + step_size * direction, p, delta)
        if clip is not None:
            # x already lies in the box, so clipping only shrinks |pert|
            pert = np.clip(x + pert, clip[0], clip[1]) - x
    return pert


def _apply(dataset: LabeledDataset, indices: np.ndarray, rows: np.ndarray):
    plan = PoisonPlan(indices, rows)
    features = dataset.features.copy()
    features[indices] += rows
    return dataset.with_features(features), plan


def pgd_poison(dataset: LabeledDataset, surrogate: Classifier, budget: PerturbationBudget,
               steps: int = DEFAULT_PGD_STEPS, step_size: Optional[float] = None, seed=0,
               clip=None, precomputed: Optional[np.ndarray] = None):
    """Train-time PGD poisoning of ``ceil(rho * n)`` seeded rows.

    ``precomputed`` may hold the PGD perturbation of every row at this budget
    (rows are crafted independently, so selecting from it is exact).
    """
    if budget.delta == 0 or budget.rho == 0:
        return dataset, PoisonPlan.empty(dataset.m)
    if surrogate.spec.n_inputs != dataset.m:
        raise ValueError("surrogate input width does not match the dataset")
    idx = select_indices(dataset.n, budget, seed)
    if precomputed is not None:
        rows = precomputed[idx]
    else:
        rows = pgd_perturbation(surrogate, dataset.features[idx], dataset.labels[idx],
                                budget.p, budget.delta, steps, step_size, clip)
    return _apply(dataset, idx, rows)


def pgd_evade(test_set: LabeledDataset, victim: Classifier, budget: PerturbationBudget,
              steps: int = DEFAULT_PGD_STEPS, step_size: Optional[float] = None, seed=0,
              clip=None):
    """Test-time PGD evasion against the trained victim."""
    return pgd_poison(test_set, victim, budget, steps, step_size, seed, clip)


def backdoor_poison(dataset: LabeledDataset, trigger: TriggerSpec, budget: PerturbationBudget,
                    seed=0, clip=None):
    """Clean-label trigger: add ``delta`` times the unit trigger pattern to seeded rows."""
    if budget.delta == 0 or budget.rho == 0:
        return dataset, PoisonPlan.empty(dataset.m)
    idx = select_indices(dataset.n, budget, seed)
    pattern = trigger.pattern(dataset.m, budget.p)
    rows = project_lp(np.tile(budget.delta * pattern, (idx.size, 1)), budget.p, budget.delta)
    if clip is not None:
        rows = np.clip(dataset.features[idx] + rows, clip[0], clip[1]) - dataset.features[idx]
    return _apply(dataset, idx, rows)


def default_trigger(m: int, width: int = 4) -> TriggerSpec:
    """Patch over the last ``width`` feature coordinates, all-positive direction."""
    width = max(1, min(width, m))
    return TriggerSpec(tuple(range(m - width, m)))


__all__ = [
    "PerturbationBudget", "PoisonPlan", "TriggerSpec", "project_lp", "row_norms",
    "pgd_perturbation", "pgd_poison", "pgd_evade", "backdoor_poison", "select_indices",
    "default_trigger", "parse_norm",
]
