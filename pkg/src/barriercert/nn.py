"""Dense ReLU networks over a flat parameter vector, with exact backprop.

Parameters are stored as one contiguous float64 vector. Layer ``l`` owns a
weight block of shape ``(n_in, n_out)`` in row-major order followed by a bias
of length ``n_out``. The same engine backs the classifier under attack and
the barrier network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DIVERGENCE_LOSS = 1e6


class ShapeError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Training produced a non-finite or exploding loss."""

    def __init__(self, iteration: int, loss: float, last_params: np.ndarray):
        super().__init__(f"training diverged at iteration {iteration} (loss={loss!r})")
        self.iteration = iteration
        self.loss = loss
        self.last_params = last_params


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.hidden_activation != "relu" or self.output_activation != "identity":
            raise ValueError("only ReLU hidden layers with identity output are supported")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` per layer into ``params`` (no copies)."""
        if params.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got shape {params.shape}")
        layers = []
        offset = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = params[offset:offset + n_in * n_out].reshape(n_in, n_out)
            offset += n_in * n_out
            b = params[offset:offset + n_out]
            offset += n_out
            layers.append((w, b))
        return layers


def glorot_init(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform Glorot weights, zero biases."""
    params = np.zeros(spec.n_params)
    for w, _ in spec.unpack(params):
        fan_in, fan_out = w.shape
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return params


@dataclass
class Classifier:
    spec: MlpSpec
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.n_params,):
            raise ShapeError(
                f"spec {self.spec.layer_sizes} needs {self.spec.n_params} params, "
                f"got {self.params.shape}"
            )

    @classmethod
    def init(cls, spec: MlpSpec, seed) -> "Classifier":
        return cls(spec, glorot_init(spec, np.random.default_rng(seed)))

    def with_params(self, params: np.ndarray) -> "Classifier":
        return Classifier(self.spec, params)


# ---------------------------------------------------------------------------
# forward / backward


def _as_batch(spec: MlpSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.n_inputs:
        raise ShapeError(f"expected inputs of width {spec.n_inputs}, got shape {x.shape}")
    return x, single


def forward_batch(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = x
    layers = spec.unpack(params)
    for i, (w, b) in enumerate(layers):
        out = out @ w + b
        if i < len(layers) - 1:
            out = np.maximum(out, 0.0)
    return out


def forward_with_cache(spec: MlpSpec, params: np.ndarray, x: np.ndarray):
    """Forward pass keeping each layer's input for the backward pass."""
    layers = spec.unpack(params)
    inputs = []
    out = x
    for i, (w, b) in enumerate(layers):
        inputs.append(out)
        out = out @ w + b
        if i < len(layers) - 1:
            out = np.maximum(out, 0.0)
    return out, inputs


def backward(spec: MlpSpec, params: np.ndarray, inputs: list[np.ndarray],
             grad_out: np.ndarray, want_input_grad: bool = False):
    """Backpropagate ``grad_out`` (dL/d output) to parameter and input gradients.

    The ReLU mask of layer ``l`` is recovered from the next layer's cached
    input, which is the post-activation output of layer ``l``.
    """
    layers = spec.unpack(params)
    grad = np.zeros_like(params)
    grad_layers = spec.unpack(grad)
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = grad_layers[i]
        gw[...] = inputs[i].T @ g
        gb[...] = g.sum(axis=0)
        if i > 0 or want_input_grad:
            g = g @ w.T
            if i > 0:
                g = g * (inputs[i] > 0.0)
    return (grad, g) if want_input_grad else grad


def forward(classifier: Classifier, x) -> np.ndarray:
    """Logits for one input vector (or a batch of rows)."""
    xb, single = _as_batch(classifier.spec, x)
    out = forward_batch(classifier.spec, classifier.params, xb)
    return out[0] if single else out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(spec: MlpSpec, x: np.ndarray, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if y.shape != (x.shape[0],):
        raise ShapeError(f"{x.shape[0]} inputs but labels of shape {y.shape}")
    if y.min() < 0 or y.max() >= spec.n_outputs:
        raise ValueError(f"labels must lie in [0, {spec.n_outputs})")
    return y


def loss_and_grad(classifier: Classifier, x, y) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact parameter gradient."""
    xb, _ = _as_batch(classifier.spec, x)
    y = _check_labels(classifier.spec, xb, y)
    n = xb.shape[0]
    logits, inputs = forward_with_cache(classifier.spec, classifier.params, xb)
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), y].mean())
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    g /= n
    grad = backward(classifier.spec, classifier.params, inputs, g)
    return max(loss, 0.0), grad


def per_sample_input_grad(classifier: Classifier, x, y) -> np.ndarray:
    """Gradient of each sample's own cross-entropy w.r.t. its input row."""
    xb, _ = _as_batch(classifier.spec, x)
    y = _check_labels(classifier.spec, xb, y)
    n = xb.shape[0]
    logits, inputs = forward_with_cache(classifier.spec, classifier.params, xb)
    g = softmax(logits)
    g[np.arange(n), y] -= 1.0
    _, gx = backward(classifier.spec, classifier.params, inputs, g, want_input_grad=True)
    return gx


def predict(classifier: Classifier, x) -> np.ndarray:
    xb, _ = _as_batch(classifier.spec, x)
    # np.argmax returns the first maximum: ties go to the smallest class index
    return np.argmax(forward_batch(classifier.spec, classifier.params, xb), axis=1)


def accuracy(classifier: Classifier, x, y) -> float:
    xb, _ = _as_batch(classifier.spec, x)
    if xb.shape[0] == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    y = np.asarray(y)
    return float(np.mean(predict(classifier, xb) == y))


# ---------------------------------------------------------------------------
# optimizers


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    learning_rate: float = 0.1
    batch_size: Optional[int] = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in ("gd", "sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not self.adam_epsilon > 0:
            raise ValueError("adam_epsilon must be positive")
        if self.batch_size is not None and self.batch_size <= 0:
            raise ValueError("batch_size must be positive")


@dataclass
class OptimizerState:
    step_count: int = 0
    first_moment: Optional[np.ndarray] = None
    second_moment: Optional[np.ndarray] = None

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            self.step_count,
            None if self.first_moment is None else self.first_moment.copy(),
            None if self.second_moment is None else self.second_moment.copy(),
        )


def apply_update(params: np.ndarray, grad: np.ndarray, state: OptimizerState,
                 config: OptimizerConfig) -> tuple[np.ndarray, OptimizerState]:
    """One step of the configured rule on flat vectors. Inputs are not mutated."""
    if grad.shape != params.shape:
        raise ShapeError(f"gradient shape {grad.shape} != params shape {params.shape}")
    lr = config.learning_rate
    if config.kind in ("gd", "sgd"):
        return params - lr * grad, OptimizerState(state.step_count + 1)
    m = np.zeros_like(params) if state.first_moment is None else state.first_moment
    v = np.zeros_like(params) if state.second_moment is None else state.second_moment
    if m.shape != params.shape or v.shape != params.shape:
        raise ShapeError("Adam accumulators do not match the parameter shape")
    t = state.step_count + 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)
    return new, OptimizerState(t, m, v)


def train_step(classifier: Classifier, state: OptimizerState, config: OptimizerConfig,
               x, y) -> tuple[Classifier, OptimizerState, float]:
    loss, grad = loss_and_grad(classifier, x, y)
    params, state = apply_update(classifier.params, grad, state, config)
    return classifier.with_params(params), state, loss


def batch_indices(n: int, config: OptimizerConfig, step: int) -> np.ndarray:
    """Row indices of the mini-batch used at ``step``.

    Each epoch is a fresh permutation drawn from ``(seed, epoch)``, so the batch
    is a pure function of the step count. The last partial batch is kept.
    """
    if config.kind == "gd" or config.batch_size is None or config.batch_size >= n:
        return np.arange(n)
    bs = config.batch_size
    per_epoch = -(-n // bs)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([config.seed, epoch]).permutation(n)
    return perm[pos * bs:(pos + 1) * bs]


@dataclass
class TrainRecord:
    theta0: np.ndarray
    theta_final: np.ndarray
    succ_of_final: np.ndarray
    final_state: OptimizerState = field(repr=False, default_factory=OptimizerState)
    final_loss: float = float("nan")


def successor(classifier: Classifier, state: OptimizerState, config: OptimizerConfig,
              x, y) -> np.ndarray:
    """One full-batch application of the update map at ``classifier.params``."""
    _, grad = loss_and_grad(classifier, x, y)
    params, _ = apply_update(classifier.params, grad, state, config)
    return params


def train(classifier: Classifier, x, y, config: OptimizerConfig, horizon: int) -> TrainRecord:
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    theta0 = classifier.params.copy()
    state = OptimizerState()
    current = classifier
    loss = float("nan")
    for step in range(horizon):
        idx = batch_indices(n, config, step)
        nxt, state, loss = train_step(current, state, config, x[idx], y[idx])
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS or not np.all(np.isfinite(nxt.params)):
            raise DivergenceError(step, loss, current.params.copy())
        current = nxt
    succ = successor(current, state, config, x, y)
    if not np.all(np.isfinite(succ)):
        raise DivergenceError(horizon, float("nan"), current.params.copy())
    return TrainRecord(theta0, current.params.copy(), succ, state, loss)


__all__ = [
    "MlpSpec", "Classifier", "OptimizerConfig", "OptimizerState", "TrainRecord",
    "ShapeError", "DivergenceError", "glorot_init", "forward", "forward_batch",
    "forward_with_cache", "backward", "softmax", "loss_and_grad",
    "per_sample_input_grad", "predict", "accuracy", "apply_update", "train_step",
    "batch_indices", "successor", "train",
]
