"""Scenario constraints on a fixed barrier, the one-variable scenario program and PAC arithmetic."""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import Decimal, localcontext
from typing import Optional, Sequence

import numpy as np

from .barrier import BarrierNet, eval_barrier_batch
from .trajectories import TrajectorySample, relabel

KINDS = ("z1", "z2", "z3")


class DegenerateScenarioError(ValueError):
    pass


@dataclass
class ScenarioSet:
    """Scenario constraints drawn from ``n_hat`` i.i.d. trajectories.

    ``z1`` holds initial parameters, ``z2`` unsafe terminals and ``z3`` every
    recorded state with its successor. The ``*_owner`` arrays map each row to
    the trajectory (scenario) that produced it.
    """

    z1: np.ndarray
    z2: np.ndarray
    z3: np.ndarray
    z3_succ: np.ndarray
    n_hat: int
    z1_owner: Optional[np.ndarray] = None
    z2_owner: Optional[np.ndarray] = None
    z3_owner: Optional[np.ndarray] = None

    def __post_init__(self):
        d = None
        for name in ("z1", "z2", "z3", "z3_succ"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.ndim == 1 and a.size == 0:
                a = a.reshape(0, d or 0)
            if a.ndim != 2:
                raise ValueError(f"{name} must be a 2-D array of parameter rows")
            if a.shape[0] and d is not None and a.shape[1] != d:
                raise ValueError("all scenario rows must share one dimension")
            if a.shape[0]:
                d = a.shape[1]
            setattr(self, name, a)
        if self.z3_succ.shape != self.z3.shape:
            raise ValueError("every z3 candidate needs a successor")
        if self.n_hat < 1:
            raise ValueError("n_hat must be positive")
        for name, arr in (("z1_owner", self.z1), ("z2_owner", self.z2), ("z3_owner", self.z3)):
            owner = getattr(self, name)
            owner = np.arange(len(arr)) if owner is None else np.asarray(owner, dtype=np.int64)
            if owner.shape != (len(arr),):
                raise ValueError(f"{name} must have one entry per row")
            setattr(self, name, owner)

    @classmethod
    def from_samples(cls, samples: Sequence[TrajectorySample], alpha: float,
                     g_c: Optional[float] = None) -> "ScenarioSet":
        if not samples:
            raise DegenerateScenarioError("no scenario trajectories")
        z1, z2, z3, z3s, o1, o2, o3 = [], [], [], [], [], [], []
        for j, (s, (_, ok)) in enumerate(zip(samples, relabel(samples, alpha, g_c))):
            z1.append(s.theta0)
            o1.append(j)
            if not ok:
                z2.append(s.theta_final)
                o2.append(j)
            z3 += [s.theta0, s.theta_final]
            z3s += [s.theta0_succ, s.theta_final_succ]
            o3 += [j, j]
        d = samples[0].theta0.shape[0]

        def stack(rows):
            return np.vstack(rows) if rows else np.zeros((0, d))

        return cls(stack(z1), stack(z2), stack(z3), stack(z3s), len(samples),
                   np.array(o1), np.array(o2, dtype=np.int64), np.array(o3))


@dataclass
class QParts:
    values: np.ndarray
    kinds: np.ndarray
    positions: np.ndarray
    owners: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


def q_parts(barrier: BarrierNet, scenarios: ScenarioSet) -> QParts:
    """Margin-free constraint parts with their origin."""
    b1 = eval_barrier_batch(barrier, scenarios.z1) if len(scenarios.z1) else np.zeros(0)
    b2 = eval_barrier_batch(barrier, scenarios.z2) if len(scenarios.z2) else np.zeros(0)
    b3 = eval_barrier_batch(barrier, scenarios.z3) if len(scenarios.z3) else np.zeros(0)
    members = np.flatnonzero(b3 <= 0.0)
    b3_next = (eval_barrier_batch(barrier, scenarios.z3_succ[members]) if members.size
               else np.zeros(0))
    values = np.concatenate([b1, -b2, b3_next])
    kinds = np.array(["z1"] * len(b1) + ["z2"] * len(b2) + ["z3"] * len(members))
    positions = np.concatenate([np.arange(len(b1)), np.arange(len(b2)), members]).astype(np.int64)
    owners = np.concatenate([scenarios.z1_owner, scenarios.z2_owner,
                             scenarios.z3_owner[members]]).astype(np.int64)
    return QParts(values, kinds, positions, owners)


def q_values(barrier: BarrierNet, scenarios: ScenarioSet) -> list[float]:
    return [float(v) for v in q_parts(barrier, scenarios).values]


@dataclass(frozen=True)
class BindingConstraint:
    kind: str
    position: int
    scenario: int
    value: float


@dataclass(frozen=True)
class Margin:
    eta_s: float
    feasible: bool
    binding_constraint: Optional[BindingConstraint] = None


def solve_parts(values: Sequence[float]) -> tuple[float, int]:
    """Optimum and argmax of min eta subject to eta >= v for every part."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DegenerateScenarioError("the scenario program has no constraints")
    k = int(np.argmax(v))
    return float(v[k]), k


def solve_scp(barrier: BarrierNet, scenarios: ScenarioSet) -> Margin:
    parts = q_parts(barrier, scenarios)
    eta, k = solve_parts(parts.values)
    binding = BindingConstraint(str(parts.kinds[k]), int(parts.positions[k]),
                                int(parts.owners[k]), eta)
    return Margin(eta, eta <= 0.0, binding)


def scenario_maxima(barrier: BarrierNet, scenarios: ScenarioSet) -> np.ndarray:
    """Per-scenario maximum constraint part (-inf for scenarios with no part)."""
    parts = q_parts(barrier, scenarios)
    out = np.full(scenarios.n_hat, -np.inf)
    np.maximum.at(out, parts.owners, parts.values)
    return out


def held_out_violation_rate(barrier: BarrierNet, margin: Margin, fresh: ScenarioSet) -> float:
    """Fraction of fresh scenarios with some constraint part above ``margin.eta_s``."""
    if fresh.n_hat < 1:
        raise ValueError("need at least one fresh scenario")
    return float(np.mean(scenario_maxima(barrier, fresh) > margin.eta_s))


# ---------------------------------------------------------------------------
# PAC arithmetic


def _check_unit(name: str, v: float) -> None:
    if not 0.0 < v < 1.0:
        raise ValueError(f"{name} must lie strictly between 0 and 1, got {v}")


def _satisfies(n: int, epsilon: float, beta: float) -> bool:
    """Exact-enough test of (1 - epsilon)^n <= beta in 60-digit decimal logs."""
    with localcontext() as ctx:
        ctx.prec = 60
        return n * (1 - Decimal(epsilon)).ln() <= Decimal(beta).ln()


def required_scenarios(epsilon: float, beta: float) -> int:
    """Smallest n with (1 - epsilon)^n <= beta."""
    _check_unit("epsilon", epsilon)
    _check_unit("beta", beta)
    n = max(1, math.ceil(math.log(beta) / math.log1p(-epsilon)))
    # the float estimate can be off by one either way near integer ratios
    while n > 1 and _satisfies(n - 1, epsilon, beta):
        n -= 1
    while not _satisfies(n, epsilon, beta):
        n += 1
    return n


def achieved_epsilon(n_hat: int, beta: float) -> float:
    """1 - beta^(1/n_hat), the violation level certified by ``n_hat`` scenarios."""
    if int(n_hat) != n_hat or n_hat < 1:
        raise ValueError("n_hat must be a positive integer")
    _check_unit("beta", beta)
    return -math.expm1(math.log(beta) / n_hat)


@dataclass(frozen=True)
class PacParams:
    beta: float
    epsilon: float
    n_hat: int

    @classmethod
    def from_n_hat(cls, beta: float, n_hat: int) -> "PacParams":
        return cls(beta, achieved_epsilon(n_hat, beta), n_hat)

    @classmethod
    def from_epsilon(cls, beta: float, epsilon: float) -> "PacParams":
        return cls(beta, epsilon, required_scenarios(epsilon, beta))

    @property
    def consistent(self) -> bool:
        return self.n_hat * math.log1p(-self.epsilon) <= math.log(self.beta) + 1e-12


__all__ = [
    "ScenarioSet", "QParts", "Margin", "BindingConstraint", "PacParams",
    "DegenerateScenarioError", "q_parts", "q_values", "solve_parts", "solve_scp",
    "scenario_maxima", "held_out_violation_rate", "required_scenarios", "achieved_epsilon",
]
