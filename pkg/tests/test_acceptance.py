"""One test per acceptance criterion; a PASS/FAIL line per test is printed at session end."""

import time

import mpmath
import numpy as np
import pytest

from barriercert import nn
from barriercert.barrier import (BarrierNet, BarrierTrainConfig, barrier_loss, check_conditions,
                                 train_barrier)
from barriercert.certifier import CERTIFIED, ZERO_RADIUS, certify
from barriercert.cli import main
from barriercert.config import RunConfig
from barriercert.nn import Classifier, MlpSpec
from barriercert.trajectories import (STREAM_TRAIN, TEST_TIME, DatasetSpec, LabeledParamSets,
                                      Pipeline, seed_for)
from barriercert.verification import (ScenarioSet, achieved_epsilon, q_values,
                                      required_scenarios, solve_parts, solve_scp)

from conftest import small_experiment
from test_certifier import fast_request

pytestmark = pytest.mark.slow

BLOBS_CONFIG = """\
mode = train
master_seed = {seed}
alpha = 0.05
budget_grid = linspace(0, 3.8, 20)
dataset = blobs
n_train_samples = 400
n_test_samples = 200
features = 2
classes = 2
hidden = 16, 16
optimizer = sgd
p = linf
rho = 1.0
attack = pgd
beta = 1e-3
n_train = 200
n_hat = 135
holdout = 500
"""

MOONS_CONFIG = """\
mode = test
master_seed = 0
alpha = 0.1
budget_grid = linspace(0, 0.38, 20)
dataset = moons
noise = 0.1
beta = 1e-3
n_train = 200
n_hat = 135
holdout = 200
"""


def report(n, ok, detail):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def central_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_criterion_1_achieved_epsilon_table():
    t = time.perf_counter()
    table = {1800: 0.005, 1500: 0.006, 700: 0.013, 600: 0.015}
    got = {n: round(achieved_epsilon(n, 1e-4), 3) for n in table}
    elapsed = time.perf_counter() - t
    ok = got == table and elapsed < 1
    report(1, ok, f"{got} in {elapsed:.3f}s")
    assert ok


def test_criterion_2_required_scenarios_inverse():
    rng = np.random.default_rng(2)
    eps = np.exp(rng.uniform(np.log(1e-3), np.log(0.5), 1000))
    beta = np.exp(rng.uniform(np.log(1e-9), np.log(0.5), 1000))
    t = time.perf_counter()
    ns = [required_scenarios(float(e), float(b)) for e, b in zip(eps, beta)]
    elapsed = time.perf_counter() - t
    mpmath.mp.dps = 60
    bad = 0
    for e, b, n in zip(eps, beta, ns):
        q, bm = 1 - mpmath.mpf(float(e)), mpmath.mpf(float(b))
        if not (q ** n <= bm < q ** (n - 1)):
            bad += 1
    ok = bad == 0 and elapsed < 1
    report(2, ok, f"{bad} violations of 1000, {elapsed:.3f}s")
    assert ok


def test_criterion_3_gradient_suite():
    t = time.perf_counter()
    worst_clf = worst_bar = 0.0
    for i in range(50):
        rng = np.random.default_rng(3000 + i)
        m, k = rng.integers(2, 6), rng.integers(2, 5)
        spec = MlpSpec((int(m), int(rng.integers(3, 8)), int(rng.integers(3, 8)), int(k)))
        clf = Classifier(spec, rng.normal(size=spec.n_params))
        x = rng.normal(size=(6, m))
        y = rng.integers(0, k, size=6)
        _, grad = nn.loss_and_grad(clf, x, y)
        fd = central_diff(lambda p: nn.loss_and_grad(clf.with_params(p), x, y)[0], clf.params)
        worst_clf = max(worst_clf, rel_err(grad, fd))
    for i in range(50):
        rng = np.random.default_rng(5000 + i)
        d = int(rng.integers(2, 6))
        sets = LabeledParamSets(*(rng.normal(size=(int(n), d)) for n in
                                  np.repeat(rng.integers(2, 6, size=3), 2)))
        spec = MlpSpec((d, int(rng.integers(3, 8)), int(rng.integers(3, 8)), 1))
        bar = BarrierNet(spec, rng.normal(size=spec.n_params))
        margin = float(rng.uniform(0, 0.5))
        ev = barrier_loss(bar, sets, margin=margin)
        fd = central_diff(lambda p: barrier_loss(bar.with_params(p), sets, margin=margin,
                                                 z_mask=ev.z_mask).loss, bar.params)
        worst_bar = max(worst_bar, rel_err(ev.grad, fd))
    elapsed = time.perf_counter() - t
    ok = worst_clf < 1e-4 and worst_bar < 1e-4 and elapsed < 30
    report(3, ok, f"worst classifier {worst_clf:.2e}, barrier {worst_bar:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_4_scp_oracle():
    t = time.perf_counter()
    mismatches = support_failures = 0
    for i in range(100):
        rng = np.random.default_rng(4000 + i)
        d = int(rng.integers(1, 5))
        n1, n2, n3 = (int(v) for v in rng.integers(1, 8, size=3))
        scen = ScenarioSet(rng.normal(size=(n1, d)), rng.normal(size=(n2, d)),
                           rng.normal(size=(n3, d)), rng.normal(size=(n3, d)), n_hat=n1)
        spec = MlpSpec((d, 6, 1))
        bar = BarrierNet(spec, rng.normal(size=spec.n_params))
        parts = q_values(bar, scen)
        brute = parts[0]
        for v in parts[1:]:
            if v > brute:
                brute = v
        margin = solve_scp(bar, scen)
        mismatches += margin.eta_s != brute
        _, k = solve_parts(parts)
        # removing any non-binding constraint leaves the optimum unchanged
        for j in range(len(parts)):
            if j != k and solve_parts(parts[:j] + parts[j + 1:])[0] != margin.eta_s:
                support_failures += 1
    elapsed = time.perf_counter() - t
    ok = mismatches == 0 and support_failures == 0 and elapsed < 10
    report(4, ok, f"{mismatches} mismatches, {support_failures} support failures, {elapsed:.2f}s")
    assert ok


def test_criterion_5_barrier_soundness():
    t = time.perf_counter()
    failures = []
    for i in range(20):
        rng = np.random.default_rng(500 + i)
        d = int(rng.integers(2, 7))
        n = int(rng.integers(20, 60))
        direction = rng.normal(size=d)
        direction /= np.linalg.norm(direction)
        init = rng.normal(size=(n, d)) * 0.5 - 1.5 * direction
        safe = rng.normal(size=(n // 2, d)) * 0.5 - 1.5 * direction
        unsafe = rng.normal(size=(n, d)) * 0.5 + 1.5 * direction
        # successors contract toward the initial cluster
        to_center = lambda z: z + 0.1 * (-1.5 * direction - z)
        sets = LabeledParamSets(init, to_center(init), safe, to_center(safe), unsafe,
                                to_center(unsafe))
        barrier, rep = train_barrier(sets, BarrierTrainConfig(), seed=i)
        check = check_conditions(barrier, sets) if barrier is not None else None
        if not (rep.converged and check is not None and check.ok):
            failures.append(i)
    elapsed = time.perf_counter() - t
    ok = not failures and elapsed < 300
    report(5, ok, f"failed instances {failures}, {elapsed:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def blobs_seeds():
    t = time.perf_counter()
    certs = [certify(RunConfig.from_text(BLOBS_CONFIG.format(seed=s)).request())
             for s in range(10)]
    return certs, time.perf_counter() - t


def test_criterion_6_desk_scale_certification(blobs_seeds):
    certs, elapsed = blobs_seeds
    main_cert = certs[0]
    eps = main_cert.epsilon
    structural = (main_cert.status == CERTIFIED and main_cert.eta_s <= 0
                  and 0 < main_cert.delta_cert <= main_cert.delta_emp
                  and main_cert.holdout_violation_rate <= 2 * eps)
    rates = [c.holdout_violation_rate for c in certs]
    exceed = sum(1 for r in rates if r is None or r > eps)
    ok = structural and exceed <= 3 and elapsed < 900
    report(6, ok, f"main {main_cert.status} delta_cert={main_cert.delta_cert} "
                  f"eta_s={main_cert.eta_s:.4g} rate={main_cert.holdout_violation_rate} "
                  f"eps={eps:.4f}; rates {rates}; {exceed} exceed; {elapsed:.0f}s")
    assert ok


def test_criterion_7_test_time_mirror():
    t = time.perf_counter()
    cfg = RunConfig.from_text(MOONS_CONFIG)
    cert = certify(cfg.request())
    structural = (cert.status == CERTIFIED and cert.mode == TEST_TIME and cert.eta_s <= 0
                  and 0 < cert.delta_cert <= cert.delta_emp
                  and cert.holdout_violation_rate <= 2 * cert.epsilon)
    exp = cfg.experiment()
    seed = seed_for(exp.master_seed, STREAM_TRAIN, 0)
    # a fresh pipeline per budget so no clean-training memo is shared
    runs = [Pipeline(exp).simulate(0, seed, seed, d, 1.0) for d in exp.budget_grid]
    identical = all(np.array_equal(r.theta_final, runs[0].theta_final)
                    and np.array_equal(r.theta_final_succ, runs[0].theta_final_succ)
                    and np.array_equal(r.theta0, runs[0].theta0) for r in runs)
    elapsed = time.perf_counter() - t
    ok = structural and identical and elapsed < 900
    report(7, ok, f"{cert.status} delta_cert={cert.delta_cert} eta_s={cert.eta_s} "
                  f"rate={cert.holdout_violation_rate}; params identical={identical}; "
                  f"{elapsed:.0f}s")
    assert ok


def test_criterion_8_empty_set_conventions():
    t = time.perf_counter()
    no_safe = certify(fast_request(dataset=DatasetSpec("blobs", 120, 80, 2, 2, 0.5),
                                   alpha=0.0, g_c_override=1.0))
    no_unsafe = certify(fast_request(budget_grid=(0.0, 0.01, 0.02), alpha=0.5))
    elapsed = time.perf_counter() - t
    ok = (no_safe.status == ZERO_RADIUS and no_safe.delta_cert == 0.0
          and "alpha adjusted" in no_unsafe.flags
          and no_unsafe.alpha_effective != no_unsafe.alpha
          and no_unsafe.certified_accuracy > no_unsafe.g_c - no_unsafe.alpha
          and elapsed < 120)
    report(8, ok, f"empty safe: {no_safe.status} {no_safe.delta_cert}; empty unsafe: "
                  f"alpha {no_unsafe.alpha} -> {no_unsafe.alpha_effective}, "
                  f"accuracy threshold {no_unsafe.certified_accuracy}; {elapsed:.1f}s")
    assert ok


def test_criterion_9_reproducibility(tmp_path, blobs_seeds):
    cfg = tmp_path / "blobs.cfg"
    cfg.write_text(BLOBS_CONFIG.format(seed=0))
    t = time.perf_counter()
    outs = []
    for name in ("a", "b"):
        assert main(["certify", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name / "certificate.json").read_bytes())
    elapsed = time.perf_counter() - t
    in_process = blobs_seeds[0][0].to_json().encode()
    ok = outs[0] == outs[1] == in_process and elapsed < 2 * 900
    report(9, ok, f"identical={outs[0] == outs[1]}, matches library run="
                  f"{outs[0] == in_process}, {elapsed:.0f}s")
    assert ok
