"""Small dense networks with analytic backpropagation.

Each network maps (current, voltage, temperature) through two tanh hidden
layers to one linear output, scaled by a per-network output_scale so the
correction lands at the magnitude of the circuit parameter it adjusts.
The output layer is zero-initialized, so a fresh network outputs exactly 0
and a hybrid model starts at its physics baseline.

Weights are plain numpy arrays; forward/backward come in a scalar flavor
(one sample) and a batched flavor used by the trainer.  Everything is
deterministic under a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
ADAGRAD_EPS = 1e-10

N_INPUTS = 3  # current (A), terminal voltage (V), temperature (degC)


@dataclass(frozen=True)
class FnnConfig:
    """Architecture and training hyperparameters for one network."""

    hidden_sizes: tuple[int, int] = (8, 4)
    activation: str = "tanh"
    epochs: int = 200
    learning_rate: float = 0.01
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.hidden_sizes) != 2 or any(h < 1 for h in self.hidden_sizes):
            raise ValueError(f"hidden_sizes must be two positive ints, got {self.hidden_sizes}")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adagrad", "adam"):
            raise ValueError(f"optimizer must be adagrad or adam, got {self.optimizer!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass(frozen=True)
class NormStats:
    """Per-input z-score statistics, stored with the model."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float)
        std = np.asarray(self.std, dtype=float)
        if mean.shape != (N_INPUTS,) or std.shape != (N_INPUTS,):
            raise ValueError("norm stats must be 3-vectors")
        if np.any(std <= 0.0) or not np.all(np.isfinite(std)) or not np.all(np.isfinite(mean)):
            raise ValueError("norm std must be positive and finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(mean=np.zeros(N_INPUTS), std=np.ones(N_INPUTS))

    @classmethod
    def from_data(cls, x: np.ndarray) -> "NormStats":
        """Column statistics of an (n, 3) input block; constant columns get unit std."""
        x = np.asarray(x, dtype=float)
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(mean=mean, std=std)


@dataclass(frozen=True)
class FnnModel:
    """Dense 3 -> h1 -> h2 -> 1 network with tanh hidden activations."""

    weights: tuple[np.ndarray, ...]   # (h1,3), (h2,h1), (1,h2), row-major
    biases: tuple[np.ndarray, ...]    # (h1,), (h2,), (1,)
    norm: NormStats
    output_scale: float = 1.0

    @property
    def hidden_sizes(self) -> tuple[int, int]:
        return (self.weights[0].shape[0], self.weights[1].shape[0])

    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


def fnn_init(config: FnnConfig, output_scale: float = 1.0) -> FnnModel:
    """Seeded initialization: Glorot-uniform hidden layers, zero output layer."""
    rng = np.random.default_rng(config.seed)
    h1, h2 = config.hidden_sizes
    dims = [(h1, N_INPUTS), (h2, h1), (1, h2)]
    weights = []
    biases = []
    for li, (fan_out, fan_in) in enumerate(dims):
        if li == len(dims) - 1:
            w = np.zeros((fan_out, fan_in))
        else:
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return FnnModel(
        weights=tuple(weights),
        biases=tuple(biases),
        norm=NormStats.identity(),
        output_scale=float(output_scale),
    )


def forward_batch(model: FnnModel, x: np.ndarray) -> tuple[np.ndarray, dict]:
    """Evaluate the network on an (n, 3) input block.

    Returns the (n,) outputs and the activation cache for backward_batch.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != N_INPUTS:
        raise ValueError(f"expected (n, {N_INPUTS}) inputs, got {x.shape}")
    w1, w2, w3 = model.weights
    b1, b2, b3 = model.biases
    xn = (x - model.norm.mean) / model.norm.std
    h1 = np.tanh(xn @ w1.T + b1)
    h2 = np.tanh(h1 @ w2.T + b2)
    out = (h2 @ w3.T + b3)[:, 0] * model.output_scale
    return out, {"xn": xn, "h1": h1, "h2": h2}


def backward_batch(model: FnnModel, cache: dict, upstream: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Accumulate d(sum_k upstream_k * out_k)/d(weights) from a forward cache.

    Returns [(dW, db)] per layer, ordered input to output.
    """
    w2, w3 = model.weights[1], model.weights[2]
    xn, h1, h2 = cache["xn"], cache["h1"], cache["h2"]
    g = np.asarray(upstream, dtype=float)[:, None] * model.output_scale  # (n, 1)
    dw3 = g.T @ h2
    db3 = g.sum(axis=0)
    dh2 = g @ w3
    dz2 = dh2 * (1.0 - h2 * h2)
    dw2 = dz2.T @ h1
    db2 = dz2.sum(axis=0)
    dh1 = dz2 @ w2
    dz1 = dh1 * (1.0 - h1 * h1)
    dw1 = dz1.T @ xn
    db1 = dz1.sum(axis=0)
    return [(dw1, db1), (dw2, db2), (dw3, db3)]


def fnn_forward(model: FnnModel, inputs) -> tuple[float, dict]:
    """Single-sample forward pass; returns (scalar output, cache)."""
    x = np.asarray(inputs, dtype=float).reshape(1, N_INPUTS)
    out, cache = forward_batch(model, x)
    return float(out[0]), cache


def fnn_backward(model: FnnModel, cache: dict, upstream_grad: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradients of (upstream_grad * output) w.r.t. every weight and bias."""
    return backward_batch(model, cache, np.array([upstream_grad]))


def zero_grads(model: FnnModel) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(model.weights, model.biases)]


def add_grads(acc, grads):
    """In-place accumulation of one gradient set into another."""
    for (aw, ab), (gw, gb) in zip(acc, grads):
        aw += gw
        ab += gb
    return acc


@dataclass(frozen=True)
class OptimizerState:
    """Per-weight accumulators for Adagrad or Adam."""

    name: str
    acc: tuple[tuple[np.ndarray, np.ndarray], ...]       # Adagrad: sum g^2; Adam: first moment
    acc2: tuple[tuple[np.ndarray, np.ndarray], ...] | None = None  # Adam second moment
    t: int = 0

    @classmethod
    def for_model(cls, name: str, model: FnnModel) -> "OptimizerState":
        if name not in ("adagrad", "adam"):
            raise ValueError(f"unknown optimizer {name!r}")
        zeros = tuple(
            (np.zeros_like(w), np.zeros_like(b)) for w, b in zip(model.weights, model.biases)
        )
        zeros2 = tuple(
            (np.zeros_like(w), np.zeros_like(b)) for w, b in zip(model.weights, model.biases)
        ) if name == "adam" else None
        return cls(name=name, acc=zeros, acc2=zeros2)


def optimizer_step(
    model: FnnModel,
    grads,
    opt_state: OptimizerState,
    learning_rate: float,
) -> tuple[FnnModel, OptimizerState]:
    """Apply one optimizer update, returning the new model and state.

    Adagrad: w -= lr * g / (sqrt(sum g^2) + 1e-10)
    Adam:    bias-corrected first/second moments, w -= lr * m_hat / (sqrt(v_hat) + 1e-8)
    """
    new_w, new_b, new_acc, new_acc2 = [], [], [], []
    if opt_state.name == "adagrad":
        for (w, b), (gw, gb), (aw, ab) in zip(
            zip(model.weights, model.biases), grads, opt_state.acc
        ):
            aw2 = aw + gw * gw
            ab2 = ab + gb * gb
            new_w.append(w - learning_rate * gw / (np.sqrt(aw2) + ADAGRAD_EPS))
            new_b.append(b - learning_rate * gb / (np.sqrt(ab2) + ADAGRAD_EPS))
            new_acc.append((aw2, ab2))
        state = replace(opt_state, acc=tuple(new_acc), t=opt_state.t + 1)
    else:
        t = opt_state.t + 1
        c1 = 1.0 - ADAM_BETA1**t
        c2 = 1.0 - ADAM_BETA2**t
        for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(
            zip(model.weights, model.biases), grads, opt_state.acc, opt_state.acc2
        ):
            mw2 = ADAM_BETA1 * mw + (1.0 - ADAM_BETA1) * gw
            mb2 = ADAM_BETA1 * mb + (1.0 - ADAM_BETA1) * gb
            vw2 = ADAM_BETA2 * vw + (1.0 - ADAM_BETA2) * gw * gw
            vb2 = ADAM_BETA2 * vb + (1.0 - ADAM_BETA2) * gb * gb
            new_w.append(w - learning_rate * (mw2 / c1) / (np.sqrt(vw2 / c2) + ADAM_EPS))
            new_b.append(b - learning_rate * (mb2 / c1) / (np.sqrt(vb2 / c2) + ADAM_EPS))
            new_acc.append((mw2, mb2))
            new_acc2.append((vw2, vb2))
        state = replace(opt_state, acc=tuple(new_acc), acc2=tuple(new_acc2), t=t)
    return replace(model, weights=tuple(new_w), biases=tuple(new_b)), state
