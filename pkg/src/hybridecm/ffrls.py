"""Forgetting-factor recursive least squares identification of the circuit triple.

The first-order circuit, discretized with the bilinear (Tustin) transform,
turns into a 3-coefficient ARX regression

    y_k = theta . phi_k,      phi_k = [-y_{k-1}, I_k, I_{k-1}]

where y is the terminal-voltage deviation from open-circuit voltage and I is
the regression current.  With y taken as U_t - U_oc (discharge sag is
negative), the regression current must be charge-positive (I = -i_l) for the
coefficient vector below to be the fixed point; telemetry current stays
discharge-positive everywhere else.

theta maps to (r0, rd, cd) through a closed-form inversion; during RLS
transients the inversion can produce non-physical values, in which case the
caller holds the last valid triple.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .ecm import BatteryConfig, EcmParams, OcvCurve, ocv_eval_array
from .dataio import SeriesData

DEFAULT_LAMBDA = 0.99
DEFAULT_P0_SCALE = 1e5
DEFAULT_PRIOR = EcmParams(r0=0.05, rd=0.03, cd=1000.0)
DEFAULT_WARMUP_SKIP = 200


class ThetaInversionError(ValueError):
    """Regression coefficients do not map to a physical circuit triple."""


@dataclass(frozen=True)
class ThetaVector:
    """ARX coefficients: a1 dimensionless, a2 and a3 in ohms."""

    a1: float
    a2: float
    a3: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.a1, self.a2, self.a3)):
            raise ValueError("theta entries must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.a1, self.a2, self.a3], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "ThetaVector":
        a = np.asarray(arr, dtype=float)
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class Regressor:
    """One regression row [-y_{k-1}, I_k, I_{k-1}]."""

    phi: np.ndarray

    def __post_init__(self) -> None:
        phi = np.asarray(self.phi, dtype=float)
        if phi.shape != (3,) or not np.all(np.isfinite(phi)):
            raise ValueError("phi must be a finite 3-vector")
        object.__setattr__(self, "phi", phi)


@dataclass(frozen=True)
class FfrlsState:
    """Estimator state: coefficient estimate, covariance, forgetting factor."""

    theta: np.ndarray
    p: np.ndarray
    lam: float
    last_valid_params: EcmParams | None = None
    flagged: bool = False  # last step saw a numerically degenerate regressor


def ffrls_init(lam: float, p0_scale: float, theta0: ThetaVector) -> FfrlsState:
    """Fresh estimator state with P = p0_scale * I."""
    if not (0.0 < lam <= 1.0):
        raise ValueError(f"forgetting factor must be in (0, 1], got {lam}")
    if not (math.isfinite(p0_scale) and p0_scale > 0.0):
        raise ValueError("p0_scale must be positive")
    return FfrlsState(theta=theta0.as_array(), p=p0_scale * np.eye(3), lam=lam)


def ffrls_step(state: FfrlsState, y: float, phi: Regressor) -> FfrlsState:
    """One gain/update/covariance recursion step.

    K = P phi / (lam + phi' P phi); theta += K * innovation;
    P <- (I - K phi') P / lam, re-symmetrized.  A non-finite intermediate
    leaves the state unchanged and sets the flagged bit.
    """
    v = phi.phi
    p_phi = state.p @ v
    denom = state.lam + float(v @ p_phi)
    if not math.isfinite(denom) or denom <= 0.0:
        return replace(state, flagged=True)
    k = p_phi / denom
    innovation = y - float(v @ state.theta)
    theta = state.theta + k * innovation
    p = (state.p - np.outer(k, p_phi)) / state.lam
    p = 0.5 * (p + p.T)
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(p)) and math.isfinite(innovation)):
        return replace(state, flagged=True)
    return replace(state, theta=theta, p=p, flagged=False)


def theta_forward(params: EcmParams, dt_s: float) -> ThetaVector:
    """Map a circuit triple to ARX coefficients (bilinear discretization)."""
    tau = params.rd * params.cd
    den = dt_s + 2.0 * tau
    a1 = (dt_s - 2.0 * tau) / den
    a2 = (params.r0 * dt_s + params.rd * dt_s + 2.0 * params.r0 * tau) / den
    a3 = (params.r0 * dt_s + params.rd * dt_s - 2.0 * params.r0 * tau) / den
    return ThetaVector(a1, a2, a3)


def params_from_theta(
    theta: ThetaVector,
    dt_s: float,
    tau_min: float | None = None,
    tau_max: float = 1e5,
) -> EcmParams:
    """Invert ARX coefficients back to (r0, rd, cd).

    Exact inverse of theta_forward on the valid domain.  Raises
    ThetaInversionError for near-singular a1 or a non-physical result so the
    caller can hold its last valid parameters.
    """
    if tau_min is None:
        tau_min = dt_s / 10.0
    a1, a2, a3 = theta.a1, theta.a2, theta.a3
    if abs(1.0 + a1) <= 1e-9 or abs(1.0 - a1) <= 1e-9:
        raise ThetaInversionError(f"a1={a1!r} is too close to +/-1")
    tau = dt_s * (1.0 - a1) / (2.0 * (1.0 + a1))
    r0 = (a2 - a3) / (1.0 - a1)
    rd = (a2 + a3) / (1.0 + a1) - r0
    if r0 <= 0.0 or rd <= 0.0 or tau <= 0.0:
        raise ThetaInversionError(
            f"non-physical inversion: r0={r0:.3e}, rd={rd:.3e}, tau={tau:.3e}"
        )
    cd = tau / rd
    if not (tau_min <= tau <= tau_max):
        raise ThetaInversionError(f"tau={tau:.3e} outside [{tau_min:.3e}, {tau_max:.3e}]")
    return EcmParams(r0=r0, rd=rd, cd=cd)


@dataclass(frozen=True)
class FfrlsOptions:
    """Knobs for series identification.

    ref_anchor_tau_s applies only to streaming (online) identification: the
    OCV reference for the regression output is a coulomb-counted SOC slowly
    re-anchored to the filter estimate with this time constant.  Coulomb
    counting keeps the identification loop decoupled from filter feedback on
    the forgetting-factor timescale; the slow anchor still recovers from
    initial SOC errors.
    """

    lam: float = DEFAULT_LAMBDA
    p0_scale: float = DEFAULT_P0_SCALE
    prior: EcmParams = DEFAULT_PRIOR
    warmup_skip: int = DEFAULT_WARMUP_SKIP
    tau_max: float = 1e5
    ref_anchor_tau_s: float = 150.0

    def __post_init__(self) -> None:
        if not (0.0 < self.lam <= 1.0):
            raise ValueError(f"forgetting factor must be in (0, 1], got {self.lam}")
        if self.p0_scale <= 0 or self.warmup_skip < 0 or self.ref_anchor_tau_s <= 0:
            raise ValueError("p0_scale and ref_anchor_tau_s must be positive, warmup_skip >= 0")


@dataclass
class IdentifyDiagnostics:
    """Per-step identification record plus health flags."""

    theta: np.ndarray            # (n, 3)
    params: np.ndarray           # (n, 3) after hold-last substitution
    valid: np.ndarray            # (n,) bool, False where hold-last fired
    invalid_count: int
    degenerate_count: int
    ill_conditioned: bool
    max_p_trace: float

    def rows(self):
        """Yield (step, a1, a2, a3, r0, rd, cd, valid_flag) tuples for CSV export."""
        for k in range(self.params.shape[0]):
            yield (k, *self.theta[k], *self.params[k], int(self.valid[k]))


def identify_series(
    data: SeriesData,
    curve: OcvCurve,
    socs,
    cfg: BatteryConfig,
    opts: FfrlsOptions = FfrlsOptions(),
) -> tuple[list[EcmParams], IdentifyDiagnostics]:
    """Run FFRLS over a telemetry series and return one circuit triple per step.

    y_k = U_t(k) - f(soc_k); the regressor carries the charge-positive current.
    Invalid inversions emit the previous valid triple (hold-last), seeded with
    the prior.  Ill-conditioning is reported when the covariance trace inflates
    past 10x its initial value (typical of unexciting input).
    """
    n = data.n_samples
    if n < 2:
        raise ValueError(f"need at least 2 samples to identify, got {n}")
    s = np.asarray(socs, dtype=float)
    if s.shape[0] != n:
        raise ValueError("socs must align with the telemetry series")

    y = data.voltage_v - ocv_eval_array(curve, s)
    i_reg = -data.current_a  # charge-positive current in the regression
    tau_min = cfg.dt_s / 10.0

    state = ffrls_init(opts.lam, opts.p0_scale, theta_forward(opts.prior, cfg.dt_s))
    held = opts.prior
    theta_hist = np.empty((n, 3))
    params_hist = np.empty((n, 3))
    valid = np.zeros(n, dtype=bool)
    invalid_count = 0
    degenerate_count = 0
    p0_trace = float(np.trace(state.p))
    max_trace = p0_trace

    theta_hist[0] = state.theta
    params_hist[0] = held.as_array()

    for k in range(1, n):
        phi = Regressor(np.array([-y[k - 1], i_reg[k], i_reg[k - 1]]))
        state = ffrls_step(state, float(y[k]), phi)
        if state.flagged:
            degenerate_count += 1
        max_trace = max(max_trace, float(np.trace(state.p)))
        theta_hist[k] = state.theta
        try:
            held = params_from_theta(
                ThetaVector.from_array(state.theta), cfg.dt_s, tau_min, opts.tau_max
            )
            valid[k] = True
        except ThetaInversionError:
            invalid_count += 1
        params_hist[k] = held.as_array()

    diags = IdentifyDiagnostics(
        theta=theta_hist,
        params=params_hist,
        valid=valid,
        invalid_count=invalid_count,
        degenerate_count=degenerate_count,
        ill_conditioned=max_trace > 10.0 * p0_trace,
        max_p_trace=max_trace,
    )
    params_list = [EcmParams(*params_hist[k]) for k in range(n)]
    return params_list, diags
