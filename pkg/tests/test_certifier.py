import dataclasses

import pytest

from barriercert.barrier import BarrierTrainConfig
from barriercert.certifier import (CERTIFIED, ZERO_RADIUS, Certificate, CertRequest, RequestError,
                                   _candidates, certify, certify_test, certify_train, config_hash,
                                   monotone_alpha_sweep, read_curve, run_certification,
                                   write_curve)
from barriercert.trajectories import TEST_TIME, DatasetSpec

from conftest import small_experiment

FAST_BARRIER = BarrierTrainConfig(hidden=(32, 32), max_iters=3000)


def fast_request(**overrides):
    exp_kw = {k: overrides.pop(k) for k in list(overrides) if k in
              {f.name for f in dataclasses.fields(small_experiment())}}
    kw = dict(barrier=FAST_BARRIER, n_hat=20, n_train=40, extra_initial=200)
    kw.update(overrides)
    return CertRequest(small_experiment(**exp_kw), **kw)


@pytest.fixture(scope="module")
def certified_run():
    return run_certification(fast_request(holdout=40))


def test_certified_invariants(certified_run):
    cert, run = certified_run
    assert cert.status == CERTIFIED
    assert cert.eta_s <= 0 and 0 < cert.delta_cert <= cert.delta_emp
    assert cert.delta_cert in run.request.experiment.budget_grid
    assert cert.epsilon == pytest.approx(1 - 1e-3 ** (1 / 20))
    assert 0.0 <= cert.holdout_violation_rate <= 1.0
    assert cert.certified_accuracy == pytest.approx(cert.g_c - cert.alpha_effective)
    assert run.last_barrier is not None and cert.search_log[-1]["outcome"] == "feasible"


def test_certificate_json_roundtrip(certified_run):
    cert, _ = certified_run
    text = cert.to_json()
    assert Certificate.from_json(text) == cert
    assert Certificate.from_json(text).to_json() == text


def test_provenance_seed_ranges_are_disjoint(certified_run):
    cert, _ = certified_run
    prov = cert.provenance
    assert prov["config_hash"] == config_hash(certified_run[1].request)
    ranges = sorted(tuple(r) for r in prov["seed_ranges"].values())
    for (_, hi), (lo, _) in zip(ranges, ranges[1:]):
        assert hi <= lo


def test_config_hash_tracks_every_field():
    a = fast_request()
    assert config_hash(a) == config_hash(fast_request())
    assert config_hash(a) != config_hash(fast_request(n_hat=21))
    assert config_hash(a) != config_hash(fast_request(master_seed=4))


def test_certification_is_deterministic(certified_run):
    again = certify(fast_request(holdout=40))
    assert again.to_json() == certified_run[0].to_json()


def test_empty_safe_set_gives_zero_radius():
    # the clean classifier already misses the required accuracy
    req = fast_request(dataset=DatasetSpec("blobs", 120, 80, 2, 2, 0.5), alpha=0.0,
                       g_c_override=1.0)
    cert = certify(req)
    assert cert.status == ZERO_RADIUS and cert.delta_cert == 0.0 and cert.eta_s is None
    assert any("safe set empty" in c for c in cert.conditions)


def test_empty_unsafe_set_adjusts_alpha():
    cert = certify(fast_request(budget_grid=(0.0, 0.01, 0.02), alpha=0.5))
    assert "alpha adjusted" in cert.flags
    assert cert.alpha == 0.5 and cert.alpha_effective < cert.alpha
    assert cert.certified_accuracy == pytest.approx(cert.g_c - cert.alpha_effective)


def test_sweep_is_monotone_and_flags_postprocessing():
    alphas = [0.3, 0.1, 0.05, 0.01]
    certs, run = monotone_alpha_sweep(fast_request(), alphas, return_run=True)
    radii = [c.delta_cert for c in certs]
    assert radii == sorted(radii, reverse=True)
    assert [c.alpha for c in certs] == alphas
    for c in certs:
        assert set(c.flags) <= {"reused", "clamped", "alpha adjusted"}
        assert c.delta_cert <= c.delta_emp or "reused" in c.flags
    with pytest.raises(RequestError):
        monotone_alpha_sweep(fast_request(), [0.01, 0.1])


def test_curve_roundtrip(tmp_path, certified_run):
    cert, _ = certified_run
    write_curve([cert, cert], tmp_path / "c.csv")
    rows = read_curve(tmp_path / "c.csv")
    assert len(rows) == 2 and rows[0]["delta_cert"] == cert.delta_cert
    assert rows[0]["status"] == cert.status and rows[0]["eta_s"] == cert.eta_s


def test_bisect_and_strict_modes_stay_below_empirical_radius():
    for kw in ({"search": "bisect"}, {"strict_scenarios": True}):
        cert = certify(fast_request(**kw))
        assert cert.delta_cert <= cert.delta_emp
        if cert.status == CERTIFIED:
            assert cert.eta_s <= 0


def test_mode_guards_and_request_validation():
    with pytest.raises(RequestError):
        certify_test(fast_request())
    with pytest.raises(RequestError):
        certify_train(fast_request(mode=TEST_TIME))
    with pytest.raises(RequestError):
        CertRequest(small_experiment(), n_hat=10, epsilon=0.1)
    with pytest.raises(RequestError):
        CertRequest(small_experiment())
    with pytest.raises(RequestError):
        CertRequest(small_experiment(), n_hat=10, search="random")
    assert CertRequest(small_experiment(), epsilon=0.05, beta=1e-3).scenario_count == 135


def test_candidate_radii():
    assert _candidates(1.0, 0.25) == [1.0, 0.75, 0.5, 0.25]
    assert _candidates(0.0, 0.25) == []
    assert _candidates(0.3, 0.1) == [0.3, 0.2, 0.1]
