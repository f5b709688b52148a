"""Radius search: barrier training on the corpus, scenario validation, certificate assembly."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .barrier import BarrierNet, BarrierTrainConfig, train_barrier
from .trajectories import (STREAM_BARRIER, STREAM_HOLDOUT, STREAM_NAMES, STREAM_SCENARIO,
                           STREAM_TRAIN, TEST_TIME, TRAIN_TIME, Baseline,
                           ExperimentConfig, Pipeline, TrajectorySample, clean_baseline,
                           empirical_radius, generate, generate_at, label, max_rule_radius, relabel,
                           sample_initial, seed_for, stream_range)
from .verification import (Margin, ScenarioSet, achieved_epsilon, held_out_violation_rate,
                           required_scenarios, solve_scp)

log = logging.getLogger(__name__)

CERTIFIED = "Certified"
ZERO_RADIUS = "ZeroRadius"
NOT_CERTIFIABLE = "NotCertifiable"


class RequestError(ValueError):
    pass


@dataclass(frozen=True)
class CertRequest:
    experiment: ExperimentConfig
    barrier: BarrierTrainConfig = field(default_factory=BarrierTrainConfig)
    attempts: int = 5
    beta: float = 1e-3
    n_hat: Optional[int] = None
    epsilon: Optional[float] = None
    radius_step: Optional[float] = None
    n_train: int = 200
    extra_initial: int = 3000
    holdout: int = 0
    strict_scenarios: bool = False
    search: str = "linear"
    max_alpha_steps: int = 20

    def __post_init__(self):
        if (self.n_hat is None) == (self.epsilon is None):
            raise RequestError("give exactly one of n_hat and epsilon")
        if self.n_hat is not None and self.n_hat < 1:
            raise RequestError("n_hat must be positive")
        if not 0 < self.beta < 1:
            raise RequestError("beta must lie in (0, 1)")
        if self.attempts < 1 or self.n_train < 1:
            raise RequestError("attempts and n_train must be positive")
        if self.radius_step is not None and not self.radius_step > 0:
            raise RequestError("radius_step must be positive")
        if self.extra_initial < 0 or self.holdout < 0 or self.max_alpha_steps < 0:
            raise RequestError("extra_initial, holdout and max_alpha_steps must be >= 0")
        if self.search not in ("linear", "bisect"):
            raise RequestError("search must be 'linear' or 'bisect'")

    @property
    def scenario_count(self) -> int:
        if self.n_hat is not None:
            return self.n_hat
        return required_scenarios(self.epsilon, self.beta)

    @property
    def step(self) -> float:
        if self.radius_step is not None:
            return self.radius_step
        grid = self.experiment.budget_grid
        gaps = [b - a for a, b in zip(grid, grid[1:]) if b > a]
        return min(gaps) if gaps else 1.0


@dataclass(frozen=True)
class Certificate:
    mode: str
    status: str
    alpha: float
    alpha_effective: float
    g_c: float
    g_c_source: str
    certified_accuracy: float
    delta_emp: float
    delta_emp_max_rule: float
    delta_cert: float
    eta_s: Optional[float]
    epsilon: Optional[float]
    beta: float
    N: int
    N_hat: int
    p: str
    rho: float
    attack: str
    binding_constraint: Optional[dict] = None
    holdout_violation_rate: Optional[float] = None
    conditions: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()
    search_log: tuple[dict, ...] = ()
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["conditions"] = list(self.conditions)
        out["flags"] = list(self.flags)
        out["search_log"] = [dict(r) for r in self.search_log]
        return out

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Certificate":
        raw = json.loads(text)
        raw["conditions"] = tuple(raw["conditions"])
        raw["flags"] = tuple(raw["flags"])
        raw["search_log"] = tuple(raw["search_log"])
        return cls(**raw)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def config_hash(request: CertRequest) -> str:
    payload = json.dumps(_jsonable(dataclasses.asdict(request)), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


# ---------------------------------------------------------------------------
# one certification run over a fixed corpus


class CertificationRun:
    """Shared state for one request: pipeline, baseline, corpus and scenario memo."""

    def __init__(self, request: CertRequest, jobs: int = 1, pipeline: Optional[Pipeline] = None,
                 baseline: Optional[Baseline] = None):
        self.request = request
        self.jobs = jobs
        self.pipeline = pipeline or Pipeline(request.experiment)
        self.baseline = baseline or clean_baseline(self.pipeline, jobs=jobs)
        self.g_c = self.baseline.g_c
        self.corpus = generate(self.pipeline, request.n_train, self.g_c, STREAM_TRAIN, jobs=jobs)
        self._memo: dict[tuple[int, int, float], TrajectorySample] = {}
        self._extra = None
        self.last_barrier: Optional[BarrierNet] = None

    @property
    def extra_initial(self):
        if self._extra is None:
            self._extra = sample_initial(self.pipeline, self.request.extra_initial)
        return self._extra

    def _draws(self, stream: int, n: int, offset: int) -> list[tuple[int, float]]:
        master = self.request.experiment.master_seed
        out = []
        for j in range(offset, offset + n):
            seed = seed_for(master, stream, j)
            out.append((j, float(np.random.default_rng([seed, 3]).random())))
        return out

    def scenarios(self, stream: int, n: int, radius: float, offset: int = 0):
        """Trajectories at budgets drawn uniformly from the grid points <= radius."""
        grid = [d for d in self.request.experiment.budget_grid if d <= radius + 1e-12]
        keys = [(stream, j, grid[min(len(grid) - 1, int(u * len(grid)))])
                for j, u in self._draws(stream, n, offset)]
        missing = sorted({k for k in keys if k not in self._memo})
        done = generate_at(self.pipeline, [(j, d) for _, j, d in missing], self.g_c, stream,
                           self.jobs)
        self._memo.update(zip(missing, done))
        return [self._memo[key] for key in keys]


def _candidates(delta_emp: float, step: float) -> list[float]:
    out = []
    k = 0
    while True:
        c = round(delta_emp - k * step, 12)
        if c <= 0:
            return out
        out.append(c)
        k += 1


def _certify_alpha(run: CertificationRun, alpha: float, alpha_requested: float,
                   flags: Sequence[str] = ()) -> Certificate:
    req = run.request
    exp = req.experiment
    n_hat = req.scenario_count
    samples = run.corpus
    labels = relabel(samples, alpha)
    delta_emp = empirical_radius(samples, alpha)
    delta_max = max_rule_radius(samples, alpha)
    conditions = []
    if delta_max != delta_emp:
        conditions.append(f"non-monotone safety: prefix radius {delta_emp!r}, "
                          f"max-rule radius {delta_max!r}")

    def emit(status, delta_cert=0.0, margin: Optional[Margin] = None, holdout=None, log_=()):
        binding = dataclasses.asdict(margin.binding_constraint) if margin and \
            margin.binding_constraint else None
        return Certificate(
            mode=exp.mode, status=status, alpha=alpha_requested, alpha_effective=alpha,
            g_c=run.g_c, g_c_source=run.baseline.source, certified_accuracy=run.g_c - alpha,
            delta_emp=delta_emp, delta_emp_max_rule=delta_max, delta_cert=delta_cert,
            eta_s=None if margin is None else margin.eta_s,
            epsilon=achieved_epsilon(n_hat, req.beta) if status == CERTIFIED else None,
            beta=req.beta, N=req.n_train, N_hat=n_hat, p=exp.p, rho=exp.rho, attack=exp.attack,
            binding_constraint=binding, holdout_violation_rate=holdout,
            conditions=tuple(conditions), flags=tuple(flags), search_log=tuple(log_),
            provenance=_provenance(req))

    if not any(ok for _, ok in labels):
        conditions.append("safe set empty: radius set to zero")
        return emit(ZERO_RADIUS)
    if all(ok for _, ok in labels):
        conditions.append("unsafe set empty")
        return emit(NOT_CERTIFIABLE)

    candidates = _candidates(delta_emp, req.step)
    search_log: list[dict] = []
    trained_any = False

    def attempt(round_idx: int, radius: float):
        nonlocal trained_any
        sets = label(samples, alpha, invariance_radius=radius)
        if sets.safe_empty:
            search_log.append({"radius": radius, "outcome": "safe set empty"})
            return None
        sets = sets.with_extra_initial(*run.extra_initial)
        barrier, report = None, None
        for t in range(req.attempts):
            seed = seed_for(exp.master_seed, STREAM_BARRIER, round_idx * req.attempts + t)
            barrier, report = train_barrier(sets, req.barrier, seed=seed)
            if barrier is not None:
                break
        if barrier is None:
            search_log.append({"radius": radius, "outcome": "barrier failed",
                               "final_loss": report.final_loss})
            return None
        trained_any = True
        offset = round_idx * n_hat if req.strict_scenarios else 0
        scen = ScenarioSet.from_samples(run.scenarios(STREAM_SCENARIO, n_hat, radius, offset),
                                        alpha)
        margin = solve_scp(barrier, scen)
        search_log.append({"radius": radius, "outcome": "feasible" if margin.feasible
                           else "infeasible", "eta_s": margin.eta_s,
                           "binding": margin.binding_constraint.kind,
                           "iterations": report.iterations})
        return (barrier, margin) if margin.feasible else None

    found = None
    if req.search == "linear":
        for r, radius in enumerate(candidates):
            res = attempt(r, radius)
            if res is not None:
                found = (radius, *res)
                break
    else:
        lo, hi = 0, len(candidates) - 1
        r = 0
        while lo <= hi:
            mid = (lo + hi) // 2
            res = attempt(r, candidates[mid])
            r += 1
            if res is not None:
                found = (candidates[mid], *res)
                hi = mid - 1
            else:
                lo = mid + 1

    if found is None:
        status = ZERO_RADIUS if trained_any or not candidates else NOT_CERTIFIABLE
        return emit(status, log_=search_log)
    radius, barrier, margin = found
    holdout = None
    if req.holdout:
        fresh = ScenarioSet.from_samples(run.scenarios(STREAM_HOLDOUT, req.holdout, radius),
                                         alpha)
        holdout = held_out_violation_rate(barrier, margin, fresh)
    cert = emit(CERTIFIED, radius, margin, holdout, search_log)
    run.last_barrier = barrier
    return cert


def _certify_with_conventions(run: CertificationRun, alpha: float) -> Certificate:
    """Apply the empty-unsafe-set convention by tightening the gap threshold."""
    cert = _certify_alpha(run, alpha, alpha)
    if "unsafe set empty" not in cert.conditions:
        return cert
    gaps = sorted({gap for gap, _ in relabel(run.corpus, alpha)}, reverse=True)
    # a gap threshold just below the largest observed gap makes those runs unsafe;
    # in accuracy terms this raises the certified accuracy threshold g_c - alpha
    for alpha_eff in gaps[1:1 + run.request.max_alpha_steps]:
        cert = _certify_alpha(run, alpha_eff, alpha, flags=("alpha adjusted",))
        if cert.status == CERTIFIED or "safe set empty" in " ".join(cert.conditions):
            break
    if len(gaps) < 2:
        cert = dataclasses.replace(cert, conditions=cert.conditions + (
            "all observed gaps equal: no threshold separates the runs",))
    return cert


def _provenance(req: CertRequest) -> dict:
    master = req.experiment.master_seed
    ranges = {STREAM_NAMES[s]: list(stream_range(master, s)) for s in sorted(STREAM_NAMES)}
    return {
        "config_hash": config_hash(req),
        "tool_version": __version__,
        "master_seed": master,
        "seed_ranges": ranges,
        "scenario_mode": "strict" if req.strict_scenarios else "pooled",
        "radius_search": req.search,
        "radius_step": req.step,
        "extra_initial": req.extra_initial,
    }


# ---------------------------------------------------------------------------
# public operations


def run_certification(request: CertRequest,
                      jobs: int = 1) -> tuple[Certificate, CertificationRun]:
    """Certificate plus the run state (corpus, baseline, validated barrier)."""
    run = CertificationRun(request, jobs)
    return _certify_with_conventions(run, request.experiment.alpha), run


def certify(request: CertRequest, jobs: int = 1) -> Certificate:
    return run_certification(request, jobs)[0]


def certify_train(request: CertRequest, jobs: int = 1) -> Certificate:
    if request.experiment.mode != TRAIN_TIME:
        raise RequestError("certify_train needs a train-time experiment")
    return certify(request, jobs)


def certify_test(request: CertRequest, jobs: int = 1) -> Certificate:
    if request.experiment.mode != TEST_TIME:
        raise RequestError("certify_test needs a test-time experiment")
    return certify(request, jobs)


def monotone_alpha_sweep(request: CertRequest, alphas: Sequence[float], jobs: int = 1,
                         return_run: bool = False):
    """Certificates for descending thresholds over one corpus, radii made non-increasing."""
    alphas = [float(a) for a in alphas]
    if not alphas or any(b > a for a, b in zip(alphas, alphas[1:])):
        raise RequestError("alphas must be a non-empty descending sequence")
    run = CertificationRun(request, jobs)
    out: list[Certificate] = []
    for alpha in alphas:
        cert = _certify_with_conventions(run, alpha)
        prev = out[-1] if out else None
        if prev is not None and prev.status == CERTIFIED:
            if cert.status != CERTIFIED:
                cert = dataclasses.replace(
                    cert, delta_cert=prev.delta_cert, eta_s=prev.eta_s, epsilon=prev.epsilon,
                    flags=cert.flags + ("reused",))
            elif cert.delta_cert > prev.delta_cert:
                cert = dataclasses.replace(cert, delta_cert=prev.delta_cert,
                                           flags=cert.flags + ("clamped",))
        out.append(cert)
    return (out, run) if return_run else out


CURVE_COLUMNS = ["alpha", "g_p_star", "delta_emp", "delta_cert", "eta_s", "epsilon", "status",
                 "flags"]


def _cell(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_curve(certs: Sequence[Certificate], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for c in certs:
            w.writerow([_cell(c.alpha_effective), _cell(c.certified_accuracy),
                        _cell(c.delta_emp), _cell(c.delta_cert), _cell(c.eta_s),
                        _cell(c.epsilon), c.status, ";".join(c.flags)])


def read_curve(path) -> list[dict]:
    def num(s):
        return None if s == "" else float(s)
    rows = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            rows.append({
                "alpha": float(r["alpha"]), "g_p_star": float(r["g_p_star"]),
                "delta_emp": float(r["delta_emp"]), "delta_cert": float(r["delta_cert"]),
                "eta_s": num(r["eta_s"]), "epsilon": num(r["epsilon"]), "status": r["status"],
                "flags": [x for x in r["flags"].split(";") if x],
            })
    return rows


__all__ = [
    "CertRequest", "Certificate", "RequestError", "certify", "certify_train", "certify_test",
    "monotone_alpha_sweep", "config_hash", "write_curve", "read_curve", "CERTIFIED",
    "ZERO_RADIUS", "NOT_CERTIFIABLE", "CertificationRun", "run_certification",
]
