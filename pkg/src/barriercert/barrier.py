"""Neural barrier certificate over classifier parameters and its composite hinge loss."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .nn import (MlpSpec, OptimizerConfig, OptimizerState, ShapeError, apply_update, backward,
                 forward_batch, forward_with_cache, glorot_init)
from .trajectories import LabeledParamSets

log = logging.getLogger(__name__)

TAU_LOSS = 1e-6
TAU_SIGN = 1e-6
GAMMA_UNSAFE = 1e-4
CHECKPOINT_MAGIC = b"NNBCCKPT"
CHECKPOINT_VERSION = 1


class BarrierDataError(ValueError):
    pass


@dataclass(frozen=True)
class BarrierNet:
    """Scalar ReLU network on parameter vectors of length ``d``."""

    spec: MlpSpec
    params: np.ndarray

    def __post_init__(self):
        if self.spec.n_outputs != 1:
            raise ShapeError("a barrier network has a single output")
        p = np.asarray(self.params, dtype=np.float64)
        if p.shape != (self.spec.n_params,):
            raise ShapeError(f"barrier needs {self.spec.n_params} params, got {p.shape}")
        object.__setattr__(self, "params", p)

    @property
    def d(self) -> int:
        return self.spec.n_inputs

    @classmethod
    def init(cls, d: int, hidden=(64, 64), seed=0) -> "BarrierNet":
        spec = MlpSpec((d, *hidden, 1))
        return cls(spec, glorot_init(spec, np.random.default_rng(seed)))

    def with_params(self, params) -> "BarrierNet":
        return BarrierNet(self.spec, params)


def eval_barrier_batch(barrier: BarrierNet, thetas) -> np.ndarray:
    x = np.asarray(thetas, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != barrier.d:
        raise ShapeError(f"expected parameter rows of length {barrier.d}, got shape {x.shape}")
    if x.shape[0] == 0:
        return np.zeros(0)
    return forward_batch(barrier.spec, barrier.params, x)[:, 0]


def eval_barrier(barrier: BarrierNet, theta) -> float:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (barrier.d,):
        raise ShapeError(f"expected a parameter vector of length {barrier.d}, got {theta.shape}")
    return float(eval_barrier_batch(barrier, theta[None, :])[0])


@dataclass(frozen=True)
class BarrierLossWeights:
    """Term weights; ``None`` means one over the current size of that set."""

    c_I: Optional[float] = None
    c_U: Optional[float] = None
    c_Z: Optional[float] = None

    def __post_init__(self):
        for name in ("c_I", "c_U", "c_Z"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be strictly positive")

    def resolve(self, n_i: int, n_u: int, n_z: int) -> tuple[float, float, float]:
        def pick(v, n):
            return v if v is not None else (1.0 / n if n else 0.0)
        return pick(self.c_I, n_i), pick(self.c_U, n_u), pick(self.c_Z, n_z)


@dataclass
class LossEvaluation:
    loss: float
    grad: np.ndarray
    terms: dict[str, float]
    z_mask: np.ndarray
    weights: tuple[float, float, float]


def _layout(sets: LabeledParamSets):
    pts, succ = sets.vartheta
    if succ.shape != pts.shape:
        raise BarrierDataError("every member of the union needs a successor")
    n_i, n_s, n_u = len(sets.initial), len(sets.safe), len(sets.unsafe)
    return pts, succ, n_i, n_s, n_u


def barrier_loss(barrier: BarrierNet, sets: LabeledParamSets,
                 weights: BarrierLossWeights = BarrierLossWeights(), margin: float = 0.0,
                 z_mask: Optional[np.ndarray] = None) -> LossEvaluation:
    """Three-term hinge loss and its exact gradient in the barrier parameters.

    With ``margin`` m the hinges become ReLU(B + m) and ReLU(m - B) and the
    invariance set is {B <= m}; m = 0 is the plain loss. ``z_mask`` overrides
    the invariance-set membership (it is otherwise recomputed from ``barrier``).
    """
    pts, succ, n_i, n_s, n_u = _layout(sets)
    n_v = len(pts)
    if n_v == 0:
        raise BarrierDataError("no parameter samples")
    x = np.vstack([pts, succ])
    out, inputs = forward_with_cache(barrier.spec, barrier.params, x)
    values = out[:, 0]
    b_pts, b_succ = values[:n_v], values[n_v:]
    if z_mask is None:
        z_mask = b_pts <= margin
    elif z_mask.shape != (n_v,):
        raise BarrierDataError("z_mask must flag every member of the union")
    n_z = int(z_mask.sum())
    c_i, c_u, c_z = weights.resolve(n_i, n_u, n_z)

    init_h = b_pts[:n_i] + margin
    uns_h = margin - b_pts[n_i + n_s:]
    inv_h = b_succ[z_mask] + margin
    terms = {
        "initial": c_i * float(np.maximum(init_h, 0.0).sum()),
        "unsafe": c_u * float(np.maximum(uns_h, 0.0).sum()),
        "invariance": c_z * float(np.maximum(inv_h, 0.0).sum()),
    }
    g = np.zeros(2 * n_v)
    g[:n_i] = c_i * (init_h > 0)
    g[n_i + n_s:n_v] = -c_u * (uns_h > 0)
    g_succ = np.zeros(n_v)
    g_succ[z_mask] = c_z * (inv_h > 0)
    g[n_v:] = g_succ
    grad = backward(barrier.spec, barrier.params, inputs, g[:, None])
    return LossEvaluation(sum(terms.values()), grad, terms, z_mask, (c_i, c_u, c_z))


@dataclass
class SignCheck:
    initial_ok: bool
    unsafe_ok: bool
    invariance_ok: bool
    worst: dict[str, float]

    @property
    def ok(self) -> bool:
        return self.initial_ok and self.unsafe_ok and self.invariance_ok


def check_conditions(barrier: BarrierNet, sets: LabeledParamSets, tau_sign: float = TAU_SIGN,
                     gamma_u: float = GAMMA_UNSAFE) -> SignCheck:
    """Direct check of the three barrier conditions on every sample."""
    pts, succ, n_i, n_s, _ = _layout(sets)
    b = eval_barrier_batch(barrier, pts)
    b_init, b_uns = b[:n_i], b[n_i + n_s:]
    z = b <= 0.0
    b_next = eval_barrier_batch(barrier, succ[z])
    worst = {
        "initial_max": float(b_init.max()) if b_init.size else float("-inf"),
        "unsafe_min": float(b_uns.min()) if b_uns.size else float("inf"),
        "invariance_max": float(b_next.max()) if b_next.size else float("-inf"),
    }
    return SignCheck(worst["initial_max"] <= tau_sign, worst["unsafe_min"] >= gamma_u,
                     worst["invariance_max"] <= tau_sign, worst)


@dataclass(frozen=True)
class BarrierTrainConfig:
    hidden: tuple[int, ...] = (64, 64)
    learning_rate: float = 1e-3
    max_iters: int = 5000
    tau_loss: float = TAU_LOSS
    margin: float = 0.5
    z_refresh_every: int = 1
    standardize: bool = True
    weights: BarrierLossWeights = field(default_factory=BarrierLossWeights)

    def __post_init__(self):
        if self.max_iters < 1 or self.z_refresh_every < 1:
            raise ValueError("max_iters and z_refresh_every must be positive")
        if self.margin < 0 or self.tau_loss < 0:
            raise ValueError("margin and tau_loss must be non-negative")


@dataclass
class BarrierTrainReport:
    final_loss: float
    iterations: int
    converged: bool
    residuals: dict[str, float]
    sign_check: Optional[SignCheck] = None

    @property
    def success(self) -> bool:
        return self.converged and self.sign_check is not None and self.sign_check.ok


def train_barrier(sets: LabeledParamSets, config: BarrierTrainConfig = BarrierTrainConfig(),
                  seed=0) -> tuple[Optional[BarrierNet], BarrierTrainReport]:
    """Full-batch Adam on the margin-shifted loss.

    Training stops once the margin objective is at most ``tau_loss``. Success
    additionally needs the unshifted loss at most ``tau_loss`` and the direct
    sign check. Returns ``(barrier, report)``; ``barrier`` is None on failure.
    """
    if len(sets.initial) == 0:
        raise BarrierDataError("train_barrier needs a non-empty initial set")
    if len(sets.unsafe) == 0:
        raise BarrierDataError("train_barrier needs a non-empty unsafe set")
    d = sets.initial.shape[1]
    shift, scale = np.zeros(d), np.ones(d)
    work = sets
    if config.standardize:
        pts, _ = sets.vartheta
        shift, scale = pts.mean(axis=0), pts.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        work = _affine_sets(sets, shift, scale)
    barrier = BarrierNet.init(d, config.hidden, seed)
    opt = OptimizerConfig("adam", config.learning_rate, None)
    state = OptimizerState()
    z_mask = None
    iterations = 0
    for it in range(config.max_iters):
        if it % config.z_refresh_every == 0:
            z_mask = None
        ev = barrier_loss(barrier, work, config.weights, config.margin, z_mask)
        z_mask = ev.z_mask if config.z_refresh_every > 1 else None
        iterations = it
        if ev.loss <= config.tau_loss:
            break
        params, state = apply_update(barrier.params, ev.grad, state, opt)
        barrier = barrier.with_params(params)
        iterations = it + 1
    barrier = _fold_input_affine(barrier, shift, scale)
    exact = barrier_loss(barrier, sets, config.weights)
    converged = exact.loss <= config.tau_loss
    report = BarrierTrainReport(exact.loss, iterations, converged, exact.terms,
                                check_conditions(barrier, sets))
    if not report.success:
        log.info("barrier training failed: loss %.3g after %d iterations", exact.loss, iterations)
        return None, report
    return barrier, report


def _affine_sets(sets: LabeledParamSets, shift, scale) -> LabeledParamSets:
    def t(a):
        return (a - shift) / scale
    return LabeledParamSets(t(sets.initial), t(sets.initial_succ), t(sets.safe),
                            t(sets.safe_succ), t(sets.unsafe), t(sets.unsafe_succ))


def _fold_input_affine(barrier: BarrierNet, shift, scale) -> BarrierNet:
    """Absorb x -> (x - shift) / scale into the first layer, leaving a plain MLP."""
    params = barrier.params.copy()
    w, b = barrier.spec.unpack(params)[0]
    w_new = w / scale[:, None]
    b[...] = b - shift @ w_new
    w[...] = w_new
    return barrier.with_params(params)


# ---------------------------------------------------------------------------
# checkpoint


def save_barrier(barrier: BarrierNet, path) -> None:
    sizes = barrier.spec.layer_sizes
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(sizes)))
        f.write(struct.pack(f"<{len(sizes)}I", *sizes))
        f.write(np.ascontiguousarray(barrier.params, dtype="<f8").tobytes())


def load_barrier(path) -> BarrierNet:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a barrier checkpoint")
    version, n_layers = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    sizes = struct.unpack_from(f"<{n_layers}I", raw, 16)
    spec = MlpSpec(sizes)
    start = 16 + 4 * n_layers
    if len(raw) - start != 8 * spec.n_params:
        raise OSError(f"{path}: checkpoint payload has the wrong length")
    return BarrierNet(spec, np.frombuffer(raw, dtype="<f8", offset=start).astype(np.float64))


__all__ = [
    "BarrierNet", "BarrierLossWeights", "BarrierTrainConfig", "BarrierTrainReport",
    "BarrierDataError", "LossEvaluation", "SignCheck", "eval_barrier", "eval_barrier_batch",
    "barrier_loss", "check_conditions", "train_barrier", "save_barrier", "load_barrier",
    "TAU_LOSS", "TAU_SIGN", "GAMMA_UNSAFE",
]
