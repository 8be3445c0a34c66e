"""Hybrid model: neural residual corrections trained through the circuit recurrence.

Three networks (one per circuit parameter) read each sample's measured
(current, voltage, temperature) and emit additive corrections to the
identified parameters.  Corrected parameters drive the discrete polarization
recurrence to predict terminal voltage; the mean squared prediction error is
the training loss, and its gradient is backpropagated exactly through the
time-unrolled recurrence (truncated at window boundaries) into all three
networks.

With fresh (zero-output) networks the forward pass reduces bit-for-bit to the
plain circuit simulator, so training can only improve on the identified
baseline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import fnn
from .dataio import SeriesData, mse
from .ecm import BatteryConfig, EcmParams, OcvCurve, ocv_eval_array, params_as_array, polarization_scan
from .fnn import FnnConfig, FnnModel, NormStats, OptimizerState

MODEL_FORMAT_VERSION = "hybridecm-model-v1"

DEFAULT_OUTPUT_SCALES = {"r0": 0.01, "rd": 0.01, "cd": 100.0}

NET_KEYS = ("r0", "rd", "cd")


class ModelFormatError(ValueError):
    """Model file is missing, corrupt, or has an unsupported version tag."""


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class ParamGuards:
    """Floors and time-constant bounds applied to corrected parameters."""

    r0_floor: float = 1e-6
    rd_floor: float = 1e-6
    cd_floor: float = 1.0
    tau_min: float = 0.1
    tau_max: float = 1e5

    @classmethod
    def for_dt(cls, dt_s: float) -> "ParamGuards":
        return cls(tau_min=dt_s / 10.0)


@dataclass(frozen=True)
class CorrectionTriple:
    """Additive parameter corrections emitted by the three networks."""

    d_r0: float
    d_rd: float
    d_cd: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.d_r0, self.d_rd, self.d_cd)):
            raise ValueError("corrections must be finite")


class ClampFlags(NamedTuple):
    r0: bool
    rd: bool
    cd: bool
    tau: bool

    @property
    def any(self) -> bool:
        return self.r0 or self.rd or self.cd or self.tau


@dataclass(frozen=True)
class TrainingWindowing:
    """Gradient-truncation window: length and stride over the training series."""

    window_len: int = 64
    stride: int = 64

    def __post_init__(self) -> None:
        if self.window_len < 1:
            raise ValueError("window_len must be >= 1")
        if not (1 <= self.stride <= self.window_len):
            raise ValueError("stride must satisfy 1 <= stride <= window_len")


@dataclass(frozen=True)
class HybridModel:
    """Three correction networks plus the physics they correct."""

    fnn_r0: FnnModel
    fnn_rd: FnnModel
    fnn_cd: FnnModel
    ocv: OcvCurve
    guards: ParamGuards
    dt_s: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        a, b, c = self.fnn_r0.norm, self.fnn_rd.norm, self.fnn_cd.norm
        if not (
            np.array_equal(a.mean, b.mean)
            and np.array_equal(a.mean, c.mean)
            and np.array_equal(a.std, b.std)
            and np.array_equal(a.std, c.std)
        ):
            raise ValueError("the three networks must share identical input normalization")

    def nets(self) -> dict[str, FnnModel]:
        return {"r0": self.fnn_r0, "rd": self.fnn_rd, "cd": self.fnn_cd}

    def with_nets(self, nets: dict[str, FnnModel]) -> "HybridModel":
        return replace(self, fnn_r0=nets["r0"], fnn_rd=nets["rd"], fnn_cd=nets["cd"])


def default_fnn_configs(seed: int = 0) -> dict[str, FnnConfig]:
    """Stock per-network hyperparameters (sizes, rates, optimizers, epoch budget)."""
    return {
        "r0": FnnConfig(hidden_sizes=(128, 4), epochs=200, learning_rate=0.001,
                        optimizer="adagrad", seed=seed),
        "rd": FnnConfig(hidden_sizes=(256, 4), epochs=200, learning_rate=0.01,
                        optimizer="adagrad", seed=seed + 1),
        "cd": FnnConfig(hidden_sizes=(8, 4), epochs=200, learning_rate=0.01,
                        optimizer="adam", seed=seed + 2),
    }


def fresh_hybrid_model(
    ocv: OcvCurve,
    dt_s: float,
    fnn_configs: dict[str, FnnConfig] | None = None,
    output_scales: dict[str, float] | None = None,
    guards: ParamGuards | None = None,
    norm: NormStats | None = None,
) -> HybridModel:
    """Zero-correction hybrid model (its predictions equal the plain circuit's)."""
    configs = fnn_configs or default_fnn_configs()
    scales = output_scales or DEFAULT_OUTPUT_SCALES
    norm = norm or NormStats.identity()
    nets = {
        key: replace(fnn.fnn_init(configs[key], scales[key]), norm=norm)
        for key in NET_KEYS
    }
    return HybridModel(
        fnn_r0=nets["r0"],
        fnn_rd=nets["rd"],
        fnn_cd=nets["cd"],
        ocv=ocv,
        guards=guards or ParamGuards.for_dt(dt_s),
        dt_s=dt_s,
        meta={"optimizers": {k: configs[k].optimizer for k in NET_KEYS}},
    )


def correct_params(
    base: EcmParams, corr: CorrectionTriple, guards: ParamGuards
) -> tuple[EcmParams, ClampFlags]:
    """Apply additive corrections with floor and time-constant guards.

    Each summed parameter is clamped below at its floor; if the resulting time
    constant leaves [tau_min, tau_max] the capacitance is rescaled to pin tau
    at the violated bound.  Gradients are treated as zero through any clamped
    coordinate (projection).
    """
    s_r0 = base.r0 + corr.d_r0
    s_rd = base.rd + corr.d_rd
    s_cd = base.cd + corr.d_cd
    f_r0 = s_r0 < guards.r0_floor
    f_rd = s_rd < guards.rd_floor
    f_cd = s_cd < guards.cd_floor
    r0 = max(s_r0, guards.r0_floor)
    rd = max(s_rd, guards.rd_floor)
    cd = max(s_cd, guards.cd_floor)
    tau = rd * cd
    tau_clamped = False
    if tau < guards.tau_min:
        cd = guards.tau_min / rd
        tau_clamped = True
    elif tau > guards.tau_max:
        cd = guards.tau_max / rd
        tau_clamped = True
    flags = ClampFlags(r0=f_r0, rd=f_rd, cd=f_cd or tau_clamped, tau=tau_clamped)
    return EcmParams(r0=r0, rd=rd, cd=cd), flags


def correct_params_array(
    base: np.ndarray, corr: np.ndarray, guards: ParamGuards
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized correction over (n, 3) blocks.

    Returns the corrected parameters and a boolean gradient mask, False where
    a clamp blocked the correction's influence.
    """
    floors = np.array([guards.r0_floor, guards.rd_floor, guards.cd_floor])
    summed = base + corr
    out = np.maximum(summed, floors)
    mask = summed >= floors
    tau = out[:, 1] * out[:, 2]
    low = tau < guards.tau_min
    high = tau > guards.tau_max
    if np.any(low):
        out[low, 2] = guards.tau_min / out[low, 1]
        mask[low, 2] = False
    if np.any(high):
        out[high, 2] = guards.tau_max / out[high, 1]
        mask[high, 2] = False
    return out, mask


@dataclass(frozen=True)
class SeriesWindow:
    """Aligned slice of telemetry, SOC trajectory, and identified parameters."""

    currents: np.ndarray
    voltages: np.ndarray   # measured terminal voltage (network input and truth)
    temps: np.ndarray
    socs: np.ndarray
    base_params: np.ndarray  # (w, 3)

    def __post_init__(self) -> None:
        w = self.currents.shape[0]
        if w < 1:
            raise ValueError("window must contain at least one step")
        for name in ("voltages", "temps", "socs"):
            if getattr(self, name).shape[0] != w:
                raise ValueError(f"window column {name} misaligned")
        if self.base_params.shape != (w, 3):
            raise ValueError("base_params must have shape (w, 3)")

    @property
    def n(self) -> int:
        return self.currents.shape[0]

    @classmethod
    def from_series(cls, data: SeriesData, socs, base_params, start: int, stop: int) -> "SeriesWindow":
        base = params_as_array(base_params)
        return cls(
            currents=data.current_a[start:stop],
            voltages=data.voltage_v[start:stop],
            temps=data.temp_c[start:stop],
            socs=np.asarray(socs, dtype=float)[start:stop],
            base_params=base[start:stop],
        )


def predict_window(model: HybridModel, window: SeriesWindow, u_d0: float) -> tuple[np.ndarray, dict]:
    """Forward pass over one window: corrections, recurrence, terminal voltage.

    Returns predictions and the cache needed for exact reverse-mode
    differentiation through the w-step unroll.  The incoming u_d0 is treated
    as a constant (gradient truncation boundary).
    """
    x = np.column_stack([window.currents, window.voltages, window.temps])
    nets = model.nets()
    outs = {}
    caches = {}
    for key in NET_KEYS:
        outs[key], caches[key] = fnn.forward_batch(nets[key], x)
    corr = np.column_stack([outs["r0"], outs["rd"], outs["cd"]])
    corrected, mask = correct_params_array(window.base_params, corr, model.guards)

    i = window.currents
    r0, rd, cd = corrected[:, 0], corrected[:, 1], corrected[:, 2]
    e = np.exp(-model.dt_s / (rd * cd))
    u_d = polarization_scan(e, rd * (1.0 - e) * i, u_d0)
    pred = ocv_eval_array(model.ocv, window.socs) - u_d - i * r0

    cache = {
        "net_caches": caches,
        "corrected": corrected,
        "mask": mask,
        "e": e,
        "u_d": u_d,
        "u_prev": np.concatenate(([u_d0], u_d[:-1])),
        "pred": pred,
        "window": window,
    }
    return pred, cache


def loss_mse(pred, truth) -> float:
    """Mean squared voltage prediction error (shared with the metrics module)."""
    return mse(pred, truth)


def backward_window(model: HybridModel, cache: dict, truth_window) -> dict[str, list]:
    """Gradient of the window MSE w.r.t. every weight of all three networks.

    Traverses: loss -> prediction -> (series-resistance path; polarization
    recurrence path back to the window start) -> corrections -> weights.
    """
    truth = np.asarray(truth_window, dtype=float)
    pred = cache["pred"]
    w = pred.shape[0]
    if truth.shape != pred.shape:
        raise ValueError("truth window misaligned with prediction window")
    window: SeriesWindow = cache["window"]
    corrected, mask, e = cache["corrected"], cache["mask"], cache["e"]
    i = window.currents
    rd, cd = corrected[:, 1], corrected[:, 2]
    dt = model.dt_s

    d_pred = 2.0 * (pred - truth) / w

    # accumulate dL/du_d[k] backwards through u[k+1] = e[k+1]*u[k] + drive[k+1]
    g_ud = np.empty(w)
    g_ud[w - 1] = -d_pred[w - 1]
    e_list = e.tolist()
    dp_list = d_pred.tolist()
    acc = g_ud[w - 1]
    for k in range(w - 2, -1, -1):
        acc = -dp_list[k] + acc * e_list[k + 1]
        g_ud[k] = acc

    core = cache["u_prev"] - rd * i
    de_drd = e * dt / (rd * rd * cd)
    de_dcd = e * dt / (rd * cd * cd)
    up_r0 = d_pred * (-i) * mask[:, 0]
    up_rd = g_ud * (core * de_drd + (1.0 - e) * i) * mask[:, 1]
    up_cd = g_ud * core * de_dcd * mask[:, 2]

    nets = model.nets()
    upstream = {"r0": up_r0, "rd": up_rd, "cd": up_cd}
    return {
        key: fnn.backward_batch(nets[key], cache["net_caches"][key], upstream[key])
        for key in NET_KEYS
    }


def predict_series(
    model: HybridModel,
    base_params,
    data: SeriesData,
    socs,
    u_d0: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Sequential forward pass over a whole series.

    Returns (predicted voltages, polarization trail).  Identical float
    operations to predict_window over any window partition with carried u_d.
    """
    window = SeriesWindow.from_series(data, socs, base_params, 0, data.n_samples)
    pred, cache = predict_window(model, window, u_d0)
    return pred, cache["u_d"]


@dataclass
class TrainResult:
    """Outcome of offline training."""

    model: HybridModel
    loss_history: list[float]
    best_epoch: int
    best_loss: float
    epochs_run: int
    diverged: bool = False


def train_offline(
    base_params_series,
    data: SeriesData,
    socs,
    cfg: BatteryConfig,
    fnn_configs: dict[str, FnnConfig] | None = None,
    windowing: TrainingWindowing = TrainingWindowing(),
    *,
    output_scales: dict[str, float] | None = None,
    guards: ParamGuards | None = None,
    warmup_skip: int = 0,
    rel_tol: float = 1e-6,
    patience: int = 5,
    seed: int = 0,
) -> TrainResult:
    """Iterative offline training of the three correction networks.

    Each epoch: a sequential full-series forward pass measures the epoch loss
    and fixes the polarization state at window boundaries; windows are then
    visited in shuffled order, each running forward, exact backward, and one
    optimizer step per network.  Stops at the epoch budget or when relative
    loss improvement stays below rel_tol for `patience` consecutive epochs.
    Returns the best model seen (by epoch loss) and the loss history.
    """
    configs = fnn_configs or default_fnn_configs(seed)
    base = params_as_array(base_params_series)
    s = np.asarray(socs, dtype=float)
    n = data.n_samples
    if base.shape[0] != n or s.shape[0] != n:
        raise ValueError("base parameters and socs must align with the series")
    if not (0 <= warmup_skip < n):
        raise ValueError(f"warmup_skip {warmup_skip} out of range for {n} samples")
    if n - warmup_skip < windowing.window_len:
        raise ValueError("training region shorter than one window")

    x_all = np.column_stack([data.current_a, data.voltage_v, data.temp_c])
    norm = NormStats.from_data(x_all[warmup_skip:])
    model = fresh_hybrid_model(
        cfg.ocv, cfg.dt_s, configs, output_scales, guards or ParamGuards.for_dt(cfg.dt_s), norm
    )

    opt_states = {
        key: OptimizerState.for_model(configs[key].optimizer, model.nets()[key])
        for key in NET_KEYS
    }
    rates = {key: configs[key].learning_rate for key in NET_KEYS}
    max_epochs = max(configs[key].epochs for key in NET_KEYS)

    starts = list(range(warmup_skip, n, windowing.stride))
    starts = [st for st in starts if st < n]
    rng = np.random.default_rng(seed)
    truth = data.voltage_v

    loss_history: list[float] = []
    best_loss = math.inf
    best_nets = model.nets()
    best_epoch = -1
    stall = 0
    diverged = False
    epochs_run = 0

    def epoch_loss() -> tuple[float, np.ndarray]:
        pred, trail = predict_series(model, base, data, s, 0.0)
        return loss_mse(pred[warmup_skip:], truth[warmup_skip:]), trail

    for epoch in range(max_epochs):
        current, trail = epoch_loss()
        loss_history.append(current)
        if not math.isfinite(current):
            diverged = True
            break
        if current < best_loss:
            best_loss, best_nets, best_epoch = current, model.nets(), epoch
        if epoch > 0:
            prev = loss_history[-2]
            if prev - current < rel_tol * max(abs(prev), 1e-30):
                stall += 1
            else:
                stall = 0
            if stall >= patience:
                break

        order = rng.permutation(len(starts))
        for wi in order:
            st = starts[wi]
            stop = min(st + windowing.window_len, n)
            window = SeriesWindow.from_series(data, s, base, st, stop)
            u_d0 = float(trail[st - 1]) if st > 0 else 0.0
            _, cache = predict_window(model, window, u_d0)
            grads = backward_window(model, cache, truth[st:stop])
            nets = model.nets()
            for key in NET_KEYS:
                nets[key], opt_states[key] = fnn.optimizer_step(
                    nets[key], grads[key], opt_states[key], rates[key]
                )
            model = model.with_nets(nets)
        epochs_run = epoch + 1

    if not diverged:
        final, _ = epoch_loss()
        loss_history.append(final)
        if math.isfinite(final) and final < best_loss:
            best_loss, best_nets, best_epoch = final, model.nets(), epochs_run

    best_model = model.with_nets(best_nets)
    best_model = replace(
        best_model,
        meta={
            **best_model.meta,
            "seed": seed,
            "epochs_run": epochs_run,
            "final_loss": best_loss,
        },
    )
    return TrainResult(
        model=best_model,
        loss_history=loss_history,
        best_epoch=best_epoch,
        best_loss=best_loss,
        epochs_run=epochs_run,
        diverged=diverged,
    )


def _net_to_doc(model: FnnModel, optimizer: str) -> dict:
    return {
        "hidden_sizes": list(model.hidden_sizes),
        "activation": "tanh",
        "output_scale": model.output_scale,
        "norm_mean": model.norm.mean.tolist(),
        "norm_std": model.norm.std.tolist(),
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "optimizer": optimizer,
    }


def _net_from_doc(doc: dict) -> FnnModel:
    try:
        return FnnModel(
            weights=tuple(np.array(w, dtype=float) for w in doc["weights"]),
            biases=tuple(np.array(b, dtype=float) for b in doc["biases"]),
            norm=NormStats(np.array(doc["norm_mean"]), np.array(doc["norm_std"])),
            output_scale=float(doc["output_scale"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"corrupt network block: {exc}") from exc


def save_model(model: HybridModel, path) -> None:
    """Serialize a hybrid model to versioned JSON (lossless, byte-stable)."""
    optimizers = model.meta.get("optimizers", {})
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "dt_s": model.dt_s,
        "ocv": {
            "coeffs": model.ocv.coeffs.tolist(),
            "valid_soc_range": list(model.ocv.valid_soc_range),
        },
        "guards": {
            "r0_floor": model.guards.r0_floor,
            "rd_floor": model.guards.rd_floor,
            "cd_floor": model.guards.cd_floor,
            "tau_min": model.guards.tau_min,
            "tau_max": model.guards.tau_max,
        },
        "networks": {
            key: _net_to_doc(model.nets()[key], optimizers.get(key, "adagrad"))
            for key in NET_KEYS
        },
        "meta": {
            k: v for k, v in model.meta.items() if k in ("seed", "epochs_run", "final_loss")
        },
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_model(path) -> HybridModel:
    """Load a model saved by save_model; rejects unknown format versions."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON: {exc}") from exc
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"{path}: unsupported model format {version!r}, expected {MODEL_FORMAT_VERSION!r}"
        )
    try:
        ocv = OcvCurve(
            coeffs=np.array(doc["ocv"]["coeffs"], dtype=float),
            valid_soc_range=tuple(doc["ocv"]["valid_soc_range"]),
        )
        guards = ParamGuards(**doc["guards"])
        nets = {key: _net_from_doc(doc["networks"][key]) for key in NET_KEYS}
        optimizers = {key: doc["networks"][key]["optimizer"] for key in NET_KEYS}
        meta = dict(doc.get("meta", {}))
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: corrupt model document: {exc}") from exc
    meta["optimizers"] = optimizers
    return HybridModel(
        fnn_r0=nets["r0"],
        fnn_rd=nets["rd"],
        fnn_cd=nets["cd"],
        ocv=ocv,
        guards=guards,
        dt_s=float(doc["dt_s"]),
        meta=meta,
    )
