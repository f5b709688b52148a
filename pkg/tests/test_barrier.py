import numpy as np
import pytest

from barriercert.barrier import (BarrierDataError, BarrierLossWeights, BarrierNet,
                                 BarrierTrainConfig, barrier_loss, check_conditions, eval_barrier,
                                 eval_barrier_batch, load_barrier, save_barrier, train_barrier,
                                 _fold_input_affine)
from barriercert.nn import MlpSpec, ShapeError
from barriercert.trajectories import LabeledParamSets


def make_sets(init, safe, unsafe, init_succ=None, safe_succ=None, unsafe_succ=None):
    init, safe, unsafe = (np.atleast_2d(np.asarray(a, float)) for a in (init, safe, unsafe))
    return LabeledParamSets(init, init if init_succ is None else np.asarray(init_succ, float),
                            safe, safe if safe_succ is None else np.asarray(safe_succ, float),
                            unsafe, unsafe if unsafe_succ is None else np.asarray(unsafe_succ, float))


def constant_barrier(d, value):
    spec = MlpSpec((d, 2, 1))
    params = np.zeros(spec.n_params)
    params[-1] = value
    return BarrierNet(spec, params)


def relu_minus_one():
    # one hidden unit: B(theta) = ReLU(theta_1) - 1
    return BarrierNet(MlpSpec((1, 1, 1)), np.array([1.0, 0.0, 1.0, -1.0]))


def independent_eval(barrier, theta):
    spec, params = barrier.spec, barrier.params
    x = np.asarray(theta, float)
    offset = 0
    sizes = spec.layer_sizes
    for layer, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = params[offset:offset + n_in * n_out].reshape(n_in, n_out)
        offset += n_in * n_out
        b = params[offset:offset + n_out]
        offset += n_out
        x = sum(x[i] * w[i] for i in range(n_in)) + b
        if layer < len(sizes) - 2:
            x = np.where(x > 0, x, 0.0)
    return float(x[0])


def test_eval_examples():
    assert eval_barrier(BarrierNet(MlpSpec((3, 4, 1)), np.zeros(21)), [1.0, -2.0, 5.0]) == 0.0
    b = relu_minus_one()
    assert eval_barrier(b, [2.0]) == 1.0 and eval_barrier(b, [-3.0]) == -1.0
    with pytest.raises(ShapeError):
        eval_barrier(b, [1.0, 2.0])
    with pytest.raises(ShapeError):
        BarrierNet(MlpSpec((2, 2)), np.zeros(6))


def test_eval_matches_independent_reevaluation():
    rng = np.random.default_rng(0)
    spec = MlpSpec((5, 7, 3, 1))
    b = BarrierNet(spec, rng.normal(size=spec.n_params))
    for theta in rng.normal(size=(20, 5)):
        assert eval_barrier(b, theta) == pytest.approx(independent_eval(b, theta), abs=1e-12)


def test_constant_negative_barrier_loss_is_unsafe_count_times_weight():
    sets = make_sets(np.zeros((3, 2)), np.ones((2, 2)), np.full((4, 2), 2.0))
    ev = barrier_loss(constant_barrier(2, -1.0), sets, BarrierLossWeights(0.5, 0.25, 2.0))
    assert ev.terms == {"initial": 0.0, "unsafe": 0.25 * 4, "invariance": 0.0}
    assert ev.loss == 1.0


def test_perfect_separator_has_zero_loss():
    # B = ReLU(x) - 1 with unsafe at 2 (B = 1), initial and successors at -3 (B = -1)
    sets = make_sets([[-3.0]], [[-3.0]], [[2.0]])
    assert barrier_loss(relu_minus_one(), sets).loss == 0.0


def test_invariance_uses_successors_of_negative_points():
    sets = make_sets([[-3.0]], [[-3.0]], [[2.0]], safe_succ=[[3.0]])
    ev = barrier_loss(relu_minus_one(), sets, BarrierLossWeights(1.0, 1.0, 1.0))
    assert ev.terms["invariance"] == pytest.approx(2.0)
    assert ev.z_mask.tolist() == [True, True, False]


def test_missing_successor_is_a_data_error():
    sets = make_sets(np.zeros((2, 2)), np.zeros((1, 2)), np.ones((1, 2)), init_succ=np.zeros((1, 2)))
    with pytest.raises(BarrierDataError):
        barrier_loss(constant_barrier(2, 0.0), sets)


@pytest.mark.parametrize("seed", range(8))
def test_loss_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d = 3
    sets = make_sets(rng.normal(size=(4, d)), rng.normal(size=(3, d)), rng.normal(size=(3, d)),
                     rng.normal(size=(4, d)), rng.normal(size=(3, d)), rng.normal(size=(3, d)))
    spec = MlpSpec((d, 5, 4, 1))
    b = BarrierNet(spec, rng.normal(size=spec.n_params))
    ev = barrier_loss(b, sets, margin=0.2)
    fd = np.zeros_like(b.params)
    h = 1e-6
    for i in range(b.params.size):
        e = np.zeros_like(b.params)
        e[i] = h
        up = barrier_loss(b.with_params(b.params + e), sets, margin=0.2, z_mask=ev.z_mask).loss
        dn = barrier_loss(b.with_params(b.params - e), sets, margin=0.2, z_mask=ev.z_mask).loss
        fd[i] = (up - dn) / (2 * h)
    assert np.linalg.norm(ev.grad - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-3)


def separable_instance(seed, d=4, n=30):
    rng = np.random.default_rng(seed)
    init = rng.normal(-1.0, 0.5, size=(n, d))
    unsafe = rng.normal(1.0, 0.5, size=(n, d))
    safe = rng.normal(-1.0, 0.5, size=(n // 2, d))
    return make_sets(init, safe, unsafe)


def test_separable_instance_trains_and_is_sound():
    sets = separable_instance(0)
    barrier, report = train_barrier(sets, BarrierTrainConfig(max_iters=5000), seed=1)
    assert barrier is not None and report.converged and report.final_loss <= 1e-6
    check = check_conditions(barrier, sets)
    assert check.ok
    assert barrier_loss(barrier, sets).loss <= 1e-6


def test_training_is_bit_reproducible():
    sets = separable_instance(1)
    a, ra = train_barrier(sets, seed=4)
    b, rb = train_barrier(sets, seed=4)
    assert np.array_equal(a.params, b.params) and ra.iterations == rb.iterations


def test_empty_unsafe_set_is_rejected():
    sets = make_sets(np.zeros((2, 2)), np.zeros((1, 2)), np.zeros((0, 2)))
    with pytest.raises(BarrierDataError):
        train_barrier(sets)


def test_point_in_both_initial_and_unsafe_fails():
    p = np.array([[0.3, -0.2]])
    sets = make_sets(np.vstack([p, [[1.0, 1.0]]]), np.zeros((0, 2)), np.vstack([p, [[-1, -1.0]]]))
    barrier, report = train_barrier(sets, BarrierTrainConfig(max_iters=300), seed=0)
    assert barrier is None and not report.success


def test_frozen_z_membership_flag_trains():
    sets = separable_instance(2)
    barrier, report = train_barrier(sets, BarrierTrainConfig(z_refresh_every=10), seed=0)
    assert barrier is not None and report.success


def test_fold_preserves_standardized_network():
    rng = np.random.default_rng(3)
    spec = MlpSpec((4, 6, 1))
    b = BarrierNet(spec, rng.normal(size=spec.n_params))
    shift, scale = rng.normal(size=4), rng.uniform(0.5, 2.0, size=4)
    x = rng.normal(size=(10, 4))
    folded = _fold_input_affine(b, shift, scale)
    np.testing.assert_allclose(eval_barrier_batch(folded, x),
                               eval_barrier_batch(b, (x - shift) / scale), atol=1e-12)


def test_checkpoint_roundtrip(tmp_path):
    spec = MlpSpec((3, 4, 1))
    b = BarrierNet(spec, np.random.default_rng(0).normal(size=spec.n_params))
    save_barrier(b, tmp_path / "b.ckpt")
    raw = (tmp_path / "b.ckpt").read_bytes()
    assert raw[:8] == b"NNBCCKPT"
    back = load_barrier(tmp_path / "b.ckpt")
    assert back.spec == spec and np.array_equal(back.params, b.params)
    (tmp_path / "bad").write_bytes(raw[:-8])
    with pytest.raises(OSError):
        load_barrier(tmp_path / "bad")
