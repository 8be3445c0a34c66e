"""Extended Kalman filter over the two-state battery model (SOC, polarization voltage).

Online flow per sample: streaming parameter identification, optional frozen
neural corrections, EKF prediction with the discrete circuit model, then the
measurement update against terminal voltage.  The state transition Jacobian
is diag(1, exp(-dt/tau)); the output Jacobian is [f'(soc), -1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import fnn
from .dataio import SeriesData
from .ecm import (
    BatteryConfig,
    EcmParams,
    OcvCurve,
    invert_ocv,
    ocv_eval,
    soc_step,
    ud_step,
)
from .ffrls import (
    FfrlsOptions,
    Regressor,
    ThetaInversionError,
    ThetaVector,
    ffrls_init,
    ffrls_step,
    params_from_theta,
    theta_forward,
)
from .trainer import CorrectionTriple, HybridModel, correct_params


@dataclass(frozen=True)
class EkfConfig:
    """Noise covariances and initial state for the filter."""

    q: np.ndarray
    r: float
    p0: np.ndarray
    x0: tuple[float, float] | None = None  # None: invert OCV at the first voltage

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=float)
        p0 = np.asarray(self.p0, dtype=float)
        for name, m in (("q", q), ("p0", p0)):
            if m.shape != (2, 2) or not np.all(np.isfinite(m)):
                raise ValueError(f"{name} must be a finite 2x2 matrix")
            if not np.allclose(m, m.T):
                raise ValueError(f"{name} must be symmetric")
            if np.any(np.linalg.eigvalsh(m) < 0.0):
                raise ValueError(f"{name} must be positive semidefinite")
        if not (math.isfinite(self.r) and self.r > 0.0):
            raise ValueError("r must be positive")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p0", p0)

    @classmethod
    def default(cls, x0: tuple[float, float] | None = None) -> "EkfConfig":
        return cls(q=np.diag([1e-8, 1e-6]), r=1e-3, p0=np.diag([1e-2, 1e-4]), x0=x0)


@dataclass(frozen=True)
class EkfState:
    """Estimate (soc, u_d) and its 2x2 covariance."""

    x: np.ndarray
    p: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if x.shape != (2,) or p.shape != (2, 2):
            raise ValueError("state must be a 2-vector with a 2x2 covariance")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "p", p)

    @property
    def soc(self) -> float:
        return float(self.x[0])

    @property
    def u_d(self) -> float:
        return float(self.x[1])


def ekf_predict(
    state: EkfState,
    i_l: float,
    params: EcmParams,
    cfg: BatteryConfig,
    ekf_cfg: EkfConfig,
) -> EkfState:
    """Time update: propagate the state through the discrete model, inflate covariance."""
    soc = soc_step(state.soc, i_l, cfg)
    u_d = ud_step(state.u_d, i_l, params, cfg.dt_s)
    a22 = math.exp(-cfg.dt_s / (params.rd * params.cd))
    a = np.array([[1.0, 0.0], [0.0, a22]])
    p = a @ state.p @ a.T + ekf_cfg.q
    return EkfState(x=np.array([soc, u_d]), p=p)


def ekf_update(
    state: EkfState,
    measured_v: float,
    i_l: float,
    params: EcmParams,
    curve: OcvCurve,
    ekf_cfg: EkfConfig,
) -> EkfState:
    """Measurement update against terminal voltage.

    h(x) = f(soc) - u_d - i_l*r0, linearized as C = [f'(soc), -1].
    Raises if the innovation covariance is not positive (broken configuration).
    """
    v_oc, dv = ocv_eval(curve, state.soc)
    h = v_oc - state.u_d - i_l * params.r0
    c = np.array([dv, -1.0])
    pc = state.p @ c
    s = float(c @ pc) + ekf_cfg.r
    if not math.isfinite(s) or s <= 0.0:
        raise RuntimeError(f"innovation covariance {s!r} is not positive")
    k = pc / s
    x = state.x + k * (measured_v - h)
    p = (np.eye(2) - np.outer(k, c)) @ state.p
    p = 0.5 * (p + p.T)
    return EkfState(x=x, p=p)


@dataclass
class EstimateResult:
    """Per-step estimation trajectory plus diagnostics."""

    soc: np.ndarray
    u_d: np.ndarray
    voltage_pred: np.ndarray   # pre-update model voltage h(x-)
    innovation: np.ndarray
    params: np.ndarray         # (n, 3) parameters used at each step
    invalid_inversions: int
    clamp_events: int

    @property
    def soc_reported(self) -> np.ndarray:
        """SOC clamped into [0, 1] for reporting."""
        return np.clip(self.soc, 0.0, 1.0)


def estimate_soc_series(
    data: SeriesData,
    model: HybridModel | None,
    cfg: BatteryConfig,
    ekf_cfg: EkfConfig,
    ffrls_opts: FfrlsOptions = FfrlsOptions(),
    *,
    plain_ecm: bool = False,
    freeze_params: EcmParams | None = None,
) -> EstimateResult:
    """Run the online estimation loop over a telemetry series.

    Per step: streaming identification (unless frozen), inversion with
    hold-last fallback, optional frozen network corrections, EKF predict, EKF
    update.  `plain_ecm` (or model=None) skips corrections, which is the
    baseline comparator; a fresh model produces bit-identical output.

    The identification regressor references OCV at a coulomb-counted SOC
    slowly re-anchored to the filter estimate (ffrls_opts.ref_anchor_tau_s),
    which keeps the identifier off the filter's feedback path.
    """
    n = data.n_samples
    if n < 1:
        raise ValueError("empty series")
    curve = model.ocv if model is not None else cfg.ocv
    use_corrections = model is not None and not plain_ecm
    guards = model.guards if model is not None else None
    nets = model.nets() if model is not None else None

    if ekf_cfg.x0 is not None:
        x0 = np.array(ekf_cfg.x0, dtype=float)
    else:
        x0 = np.array([invert_ocv(curve, float(data.voltage_v[0])), 0.0])
    state = EkfState(x=x0, p=ekf_cfg.p0.copy())

    ident = ffrls_init(ffrls_opts.lam, ffrls_opts.p0_scale, theta_forward(ffrls_opts.prior, cfg.dt_s))
    held = freeze_params if freeze_params is not None else ffrls_opts.prior
    tau_min = cfg.dt_s / 10.0
    anchor_gain = min(1.0, cfg.dt_s / ffrls_opts.ref_anchor_tau_s)
    soc_ref = float(x0[0])

    soc_est = np.empty(n)
    u_d_est = np.empty(n)
    v_pred = np.empty(n)
    innov = np.empty(n)
    params_hist = np.empty((n, 3))
    invalid = 0
    clamps = 0

    prev_y = None
    prev_i = None

    for k in range(n):
        i_k = float(data.current_a[k])
        v_k = float(data.voltage_v[k])
        t_k = float(data.temp_c[k])

        if freeze_params is None:
            soc_ref = soc_ref - i_k * cfg.dt_s / cfg.capacity_coulombs \
                + anchor_gain * (state.soc - soc_ref)
            v_oc_prev, _ = ocv_eval(curve, soc_ref)
            y_k = v_k - v_oc_prev
            if prev_y is not None:
                ident = ffrls_step(
                    ident, y_k, Regressor(np.array([-prev_y, -i_k, -prev_i]))
                )
                try:
                    held = params_from_theta(
                        ThetaVector.from_array(ident.theta), cfg.dt_s, tau_min, ffrls_opts.tau_max
                    )
                except ThetaInversionError:
                    invalid += 1
            prev_y, prev_i = y_k, i_k

        params = held
        if use_corrections:
            x_in = np.array([[i_k, v_k, t_k]])
            corr = CorrectionTriple(
                d_r0=float(fnn.forward_batch(nets["r0"], x_in)[0][0]),
                d_rd=float(fnn.forward_batch(nets["rd"], x_in)[0][0]),
                d_cd=float(fnn.forward_batch(nets["cd"], x_in)[0][0]),
            )
            params, flags = correct_params(params, corr, guards)
            if flags.any:
                clamps += 1

        prior = ekf_predict(state, i_k, params, cfg, ekf_cfg)
        v_oc, _ = ocv_eval(curve, prior.soc)
        v_pred[k] = v_oc - prior.u_d - i_k * params.r0
        innov[k] = v_k - v_pred[k]
        state = ekf_update(prior, v_k, i_k, params, curve, ekf_cfg)

        soc_est[k] = state.soc
        u_d_est[k] = state.u_d
        params_hist[k] = params.as_array()

    return EstimateResult(
        soc=soc_est,
        u_d=u_d_est,
        voltage_pred=v_pred,
        innovation=innov,
        params=params_hist,
        invalid_inversions=invalid,
        clamp_events=clamps,
    )
