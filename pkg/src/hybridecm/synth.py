"""Synthetic battery oracle and drive-cycle generators.

The truth model is deliberately richer than the first-order circuit the
pipeline identifies: two RC branches plus temperature- and SOC-dependent
resistances.  That structured mismatch is what the correction networks exist
to absorb, and zeroing the extra structure collapses the oracle onto the
first-order model for exact-recovery tests.

Also provides a first-order linear response generator in the exact model
class the identifier fits (bilinear ARX coefficients), so recovery tests are
well-posed to machine precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataio import SeriesData
from .ecm import BatteryConfig, EcmParams, ocv_eval_array
from .ffrls import theta_forward

N_SUBSTEPS = 10  # inner Euler resolution per sample interval


@dataclass(frozen=True)
class TruthConfig:
    """Ground-truth circuit with environmental sensitivities and sensor noise.

    Resistances scale with temperature as r*(1 + alpha_per_c*(25 - T)) and,
    below 50% SOC, additionally by (1 + beta_soc*(0.5 - SOC)).  A branch with
    zero resistance or capacitance is treated as absent.
    """

    r0_ref: float = 0.03
    rd1_ref: float = 0.02
    cd1_ref: float = 1500.0
    rd2_ref: float = 0.01
    cd2_ref: float = 20000.0
    alpha_per_c: float = 0.03
    beta_soc: float = 0.5
    sigma_v: float = 0.002
    sigma_i: float = 0.0
    ambient_c: float = 25.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.r0_ref <= 0:
            raise ValueError("r0_ref must be positive")
        for name in ("rd1_ref", "cd1_ref", "rd2_ref", "cd2_ref"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.sigma_v < 0 or self.sigma_i < 0:
            raise ValueError("noise levels must be non-negative")

    def temp_factor(self) -> float:
        return 1.0 + self.alpha_per_c * (25.0 - self.ambient_c)


@dataclass(frozen=True)
class CycleSpec:
    """Drive-cycle recipe: pulse/rest, filtered dynamic, or constant current."""

    kind: str = "hppc"
    amplitude_a: float = 2.9
    pulse_s: float = 10.0
    rest_s: float = 40.0
    corr_time_s: float = 40.0
    mean_a: float = 1.2
    duration_s: float = 3600.0
    seed: int = 0
    i_max_a: float | None = None   # dynamic clip ceiling; default mean + 3*amplitude
    slew_a_per_step: float | None = None  # dynamic rate limit; default amplitude

    def __post_init__(self) -> None:
        if self.kind not in ("hppc", "dynamic", "constant"):
            raise ValueError(f"unknown cycle kind {self.kind!r}")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.kind == "hppc" and (self.pulse_s <= 0 or self.rest_s <= 0):
            raise ValueError("pulse_s and rest_s must be positive")
        if self.kind == "dynamic" and self.corr_time_s <= 0:
            raise ValueError("corr_time_s must be positive")


def gen_cycle(spec: CycleSpec, dt_s: float) -> np.ndarray:
    """Generate a discharge-positive current sequence for one cycle spec."""
    n = int(round(spec.duration_s / dt_s))
    if n < 1:
        raise ValueError("cycle shorter than one sample")
    if spec.kind == "constant":
        return np.full(n, spec.amplitude_a, dtype=float)
    if spec.kind == "hppc":
        n_pulse = int(round(spec.pulse_s / dt_s))
        n_rest = int(round(spec.rest_s / dt_s))
        period = np.concatenate([np.full(n_pulse, spec.amplitude_a), np.zeros(n_rest)])
        reps = n // period.size + 1
        return np.tile(period, reps)[:n]

    # dynamic: exact-discretization Ornstein-Uhlenbeck around the mean,
    # clipped to [0, i_max] and rate-limited
    rng = np.random.default_rng(spec.seed)
    decay = math.exp(-dt_s / spec.corr_time_s)
    kick = spec.amplitude_a * math.sqrt(1.0 - decay * decay)
    i_max = spec.i_max_a if spec.i_max_a is not None else spec.mean_a + 3.0 * spec.amplitude_a
    slew = spec.slew_a_per_step if spec.slew_a_per_step is not None else spec.amplitude_a
    noise = rng.standard_normal(n)
    out = np.empty(n)
    x = 0.0
    prev = spec.mean_a
    for k in range(n):
        x = decay * x + kick * noise[k]
        i = min(max(spec.mean_a + x, 0.0), i_max)
        i = min(max(i, prev - slew), prev + slew)
        out[k] = i
        prev = i
    return out


@dataclass
class TruthResult:
    """Oracle output: noisy telemetry plus clean internal truth."""

    series: SeriesData
    soc_true: np.ndarray
    u_d1: np.ndarray
    u_d2: np.ndarray
    r0_eff: np.ndarray
    voltage_clean: np.ndarray
    exhausted: bool  # SOC hit zero before the requested duration


def simulate_truth(
    truth: TruthConfig,
    batt: BatteryConfig,
    currents,
    soc0: float,
) -> TruthResult:
    """Integrate the ground-truth circuit and emit noisy telemetry.

    Current is held constant over each sample interval; the RC branches are
    integrated with Euler sub-steps at dt/10.  Cell temperature is pinned to
    ambient.  The series stops early (flagged) if the SOC is exhausted.
    """
    if not (0.0 <= soc0 <= 1.0):
        raise ValueError(f"soc0 must be in [0, 1], got {soc0}")
    i_arr = np.asarray(currents, dtype=float)
    rng = np.random.default_rng(truth.seed)
    dt = batt.dt_s
    h = dt / N_SUBSTEPS
    tf = truth.temp_factor()

    branch1 = truth.rd1_ref > 0.0 and truth.cd1_ref > 0.0
    branch2 = truth.rd2_ref > 0.0 and truth.cd2_ref > 0.0

    soc = soc0
    u1 = 0.0
    u2 = 0.0
    rows_i, rows_v, rows_soc, rows_u1, rows_u2, rows_r0, rows_clean = [], [], [], [], [], [], []
    exhausted = False

    for i_k in i_arr.tolist():
        new_soc = soc - i_k * dt / batt.capacity_coulombs
        if new_soc < 0.0:
            exhausted = True
            break
        # SOC sensitivity engages below mid charge, evaluated at the interval start
        soc_factor = 1.0 + truth.beta_soc * (0.5 - soc) if soc < 0.5 else 1.0
        scale = tf * soc_factor
        r0 = truth.r0_ref * scale
        rd1 = truth.rd1_ref * scale
        rd2 = truth.rd2_ref * scale
        if branch1:
            for _ in range(N_SUBSTEPS):
                u1 += h * (i_k / truth.cd1_ref - u1 / (rd1 * truth.cd1_ref))
        if branch2:
            for _ in range(N_SUBSTEPS):
                u2 += h * (i_k / truth.cd2_ref - u2 / (rd2 * truth.cd2_ref))
        soc = new_soc
        v_oc = float(ocv_eval_array(batt.ocv, soc))
        v_clean = v_oc - u1 - u2 - i_k * r0

        rows_i.append(i_k + (truth.sigma_i * rng.standard_normal() if truth.sigma_i else 0.0))
        rows_v.append(v_clean + (truth.sigma_v * rng.standard_normal() if truth.sigma_v else 0.0))
        rows_soc.append(soc)
        rows_u1.append(u1)
        rows_u2.append(u2)
        rows_r0.append(r0)
        rows_clean.append(v_clean)

    n = len(rows_v)
    if n < 1:
        raise ValueError("SOC exhausted before the first sample")
    series = SeriesData(
        dt_s=dt,
        t0_s=0.0,
        time_s=dt * np.arange(n),
        current_a=np.array(rows_i),
        voltage_v=np.array(rows_v),
        temp_c=np.full(n, truth.ambient_c),
    )
    return TruthResult(
        series=series,
        soc_true=np.array(rows_soc),
        u_d1=np.array(rows_u1),
        u_d2=np.array(rows_u2),
        r0_eff=np.array(rows_r0),
        voltage_clean=np.array(rows_clean),
        exhausted=exhausted,
    )


def first_order_truth(params: EcmParams, ambient_c: float = 25.0, sigma_v: float = 0.0,
                      seed: int = 0) -> TruthConfig:
    """Truth config that degenerates to a given first-order circuit."""
    return TruthConfig(
        r0_ref=params.r0,
        rd1_ref=params.rd,
        cd1_ref=params.cd,
        rd2_ref=0.0,
        cd2_ref=0.0,
        alpha_per_c=0.0,
        beta_soc=0.0,
        sigma_v=sigma_v,
        ambient_c=ambient_c,
        seed=seed,
    )


def bilinear_ecm_response(params: EcmParams, currents, dt_s: float) -> np.ndarray:
    """Voltage sag of the first-order circuit under its bilinear discretization.

    Returns v[k] = U_oc(k) - U_t(k) satisfying the exact 3-coefficient ARX
    relation the identifier fits, so recursive least squares recovers the
    mapped coefficients to machine precision on this data.
    """
    th = theta_forward(params, dt_s)
    i = np.asarray(currents, dtype=float)
    v = np.empty(i.size)
    v_prev = 0.0
    i_prev = 0.0
    for k in range(i.size):
        v_k = -th.a1 * v_prev + th.a2 * i[k] + th.a3 * i_prev
        v[k] = v_k
        v_prev, i_prev = v_k, i[k]
    return v


def first_order_series(
    params: EcmParams,
    batt: BatteryConfig,
    currents,
    soc0: float,
    ambient_c: float = 25.0,
    discretization: str = "bilinear",
) -> tuple[SeriesData, np.ndarray]:
    """Noiseless first-order telemetry plus the true SOC trajectory.

    `discretization` picks the recurrence that generates the data: "bilinear"
    matches the identifier's model class exactly; "exponential" matches the
    simulator/EKF propagation.
    """
    i = np.asarray(currents, dtype=float)
    n = i.size
    socs = soc0 - np.cumsum(i) * batt.dt_s / batt.capacity_coulombs
    v_oc = ocv_eval_array(batt.ocv, socs)
    if discretization == "bilinear":
        volts = v_oc - bilinear_ecm_response(params, i, batt.dt_s)
    elif discretization == "exponential":
        from .ecm import simulate_series

        volts = simulate_series(np.tile(params.as_array(), (n, 1)), i, socs, batt, 0.0)
    else:
        raise ValueError(f"unknown discretization {discretization!r}")
    series = SeriesData(
        dt_s=batt.dt_s,
        t0_s=0.0,
        time_s=batt.dt_s * np.arange(n),
        current_a=i,
        voltage_v=volts,
        temp_c=np.full(n, ambient_c),
    )
    return series, socs
