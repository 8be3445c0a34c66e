"""First-order equivalent-circuit battery model.

The cell is modeled as an open-circuit voltage source f(SOC) in series with
an ohmic resistance r0 and one RC polarization pair (rd, cd).  Everything in
this module is a pure function of its inputs; the dataclasses are frozen and
safe to share across threads.

Conventions (fixed project-wide):
  * current is discharge-positive, in amperes
  * capacity is stored in coulombs (ampere-seconds)
  * SOC is a dimensionless fraction and is NOT clamped inside any recursion;
    clamping to [0, 1] happens only when values are reported
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

MONOTONICITY_GRID_POINTS = 101


class OcvExtrapolationWarning(UserWarning):
    """Raised (as a warning) when an OCV curve is evaluated outside its fit range."""


@dataclass(frozen=True)
class EcmParams:
    """Circuit triple: ohmic resistance, polarization resistance, polarization capacitance."""

    r0: float
    rd: float
    cd: float

    def __post_init__(self) -> None:
        for name in ("r0", "rd", "cd"):
            v = getattr(self, name)
            if not math.isfinite(v) or v <= 0.0:
                raise ValueError(f"{name} must be positive and finite, got {v!r}")

    @property
    def tau(self) -> float:
        """Polarization time constant rd*cd in seconds."""
        return self.rd * self.cd

    def as_array(self) -> np.ndarray:
        return np.array([self.r0, self.rd, self.cd], dtype=float)


@dataclass(frozen=True)
class BatteryState:
    """(SOC, polarization voltage) pair evolved by the discrete recurrence."""

    soc: float
    u_d: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.soc) and math.isfinite(self.u_d)):
            raise ValueError("battery state entries must be finite")


@dataclass(frozen=True)
class OcvCurve:
    """Open-circuit voltage as a polynomial in SOC (coefficients ascending).

    Construction verifies strict monotonicity on a uniform 101-point grid over
    `valid_soc_range` and warns (does not fail) if the endpoint voltages fall
    outside `terminal_range`.
    """

    coeffs: np.ndarray
    valid_soc_range: tuple[float, float] = (0.0, 1.0)
    terminal_range: tuple[float, float] = (2.5, 4.2)

    def __post_init__(self) -> None:
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.ndim != 1 or coeffs.size == 0 or not np.all(np.isfinite(coeffs)):
            raise ValueError("coeffs must be a non-empty 1-D finite array")
        object.__setattr__(self, "coeffs", coeffs)
        lo, hi = self.valid_soc_range
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise ValueError(f"invalid soc range {self.valid_soc_range!r}")
        grid = np.linspace(lo, hi, MONOTONICITY_GRID_POINTS)
        vals = _polyval_ascending(coeffs, grid)
        if coeffs.size > 1 and not np.all(np.diff(vals) > 0.0):
            bad = int(np.argmin(np.diff(vals)))
            raise ValueError(
                "OCV polynomial is not strictly increasing on the check grid "
                f"(first violation near soc={grid[bad]:.3f})"
            )
        t_lo, t_hi = self.terminal_range
        if vals[0] < t_lo - 1e-6 or vals[-1] > t_hi + 1e-6:
            warnings.warn(
                f"OCV endpoints ({vals[0]:.3f} V, {vals[-1]:.3f} V) fall outside the "
                f"terminal voltage range [{t_lo}, {t_hi}] V",
                stacklevel=2,
            )


@dataclass(frozen=True)
class BatteryConfig:
    """Cell constants shared by every pipeline stage."""

    capacity_coulombs: float
    dt_s: float
    ocv: OcvCurve

    def __post_init__(self) -> None:
        if not (math.isfinite(self.capacity_coulombs) and self.capacity_coulombs > 0):
            raise ValueError("capacity_coulombs must be positive")
        if not (math.isfinite(self.dt_s) and self.dt_s > 0):
            raise ValueError("dt_s must be positive")

    @classmethod
    def from_amp_hours(cls, capacity_ah: float, dt_s: float, ocv: OcvCurve) -> "BatteryConfig":
        return cls(capacity_coulombs=capacity_ah * 3600.0, dt_s=dt_s, ocv=ocv)


def _polyval_ascending(coeffs: np.ndarray, x):
    """Horner evaluation of a polynomial given ascending coefficients."""
    out = np.zeros_like(np.asarray(x, dtype=float))
    for c in coeffs[::-1]:
        out = out * x + c
    return out


def fit_ocv(soc_points, voltage_points, degree: int) -> OcvCurve:
    """Least-squares polynomial fit of OCV vs SOC.

    Requires at least degree+1 distinct SOC points inside [0, 1].  The fitted
    curve must pass the monotonicity check; a non-monotone fit is rejected
    with a diagnostic rather than returned.
    """
    soc = np.asarray(soc_points, dtype=float)
    volts = np.asarray(voltage_points, dtype=float)
    if soc.shape != volts.shape or soc.ndim != 1:
        raise ValueError("soc_points and voltage_points must be 1-D and equal length")
    if degree < 1:
        raise ValueError("degree must be >= 1")
    distinct = np.unique(soc).size
    if distinct < degree + 1:
        raise ValueError(f"need at least {degree + 1} distinct soc points, got {distinct}")
    if soc.min() < 0.0 or soc.max() > 1.0:
        raise ValueError("soc points must lie within [0, 1]")
    coeffs = np.polynomial.polynomial.polyfit(soc, volts, degree)
    return OcvCurve(coeffs=coeffs, valid_soc_range=(float(soc.min()), float(soc.max())))


def ocv_eval(curve: OcvCurve, soc: float) -> tuple[float, float]:
    """Evaluate the OCV polynomial and its analytic derivative at one SOC.

    Extrapolation outside the fit range is permitted but flagged with an
    OcvExtrapolationWarning.
    """
    lo, hi = curve.valid_soc_range
    if soc < lo or soc > hi:
        # static message so repeated extrapolation warns once per call site
        warnings.warn(
            f"OCV evaluated outside fit range [{lo}, {hi}]",
            OcvExtrapolationWarning,
            stacklevel=2,
        )
    c = curve.coeffs
    v = 0.0
    for ck in c[::-1]:
        v = v * soc + ck
    dv = 0.0
    n = c.size - 1
    for k in range(n, 0, -1):
        dv = dv * soc + k * c[k]
    return float(v), float(dv)


def ocv_eval_array(curve: OcvCurve, socs: np.ndarray) -> np.ndarray:
    """Vectorized OCV evaluation (no derivative, no extrapolation flagging)."""
    return _polyval_ascending(curve.coeffs, np.asarray(socs, dtype=float))


def invert_ocv(curve: OcvCurve, voltage: float, tol: float = 1e-6) -> float:
    """Invert the monotone OCV polynomial by bisection over the fit range.

    Voltages outside the achievable span map to the nearest range endpoint.
    """
    lo, hi = curve.valid_soc_range
    v_lo, _ = ocv_eval(curve, lo)
    v_hi, _ = ocv_eval(curve, hi)
    if voltage <= v_lo:
        return lo
    if voltage >= v_hi:
        return hi
    a, b = lo, hi
    while b - a > tol:
        m = 0.5 * (a + b)
        if _polyval_ascending(curve.coeffs, m) < voltage:
            a = m
        else:
            b = m
    return 0.5 * (a + b)


def soc_step(soc: float, i_l: float, cfg: BatteryConfig) -> float:
    """One coulomb-counting step (left rectangle rule), discharge-positive current."""
    return soc - i_l * cfg.dt_s / cfg.capacity_coulombs


def ud_step(u_d: float, i_l: float, params: EcmParams, dt_s: float) -> float:
    """Advance the polarization voltage one sample.

    u_d' = exp(-dt/tau)*u_d + rd*(1 - exp(-dt/tau))*i_l with tau = rd*cd.
    """
    e = math.exp(-dt_s / (params.rd * params.cd))
    return e * u_d + params.rd * (1.0 - e) * i_l


def terminal_voltage(soc: float, u_d: float, i_l: float, r0: float, curve: OcvCurve) -> float:
    """Terminal voltage f(soc) - u_d - i_l*r0."""
    v, _ = ocv_eval(curve, soc)
    return v - u_d - i_l * r0


def polarization_scan(e_factors: np.ndarray, drives: np.ndarray, u_d0: float) -> np.ndarray:
    """Run u[k] = e[k]*u[k-1] + drive[k] sequentially, returning all u[k].

    Shared kernel for the simulator and the hybrid forward pass so that the
    two produce bit-identical trajectories when fed identical inputs.
    """
    e_list = e_factors.tolist()
    d_list = drives.tolist()
    u = float(u_d0)
    out = []
    for e, d in zip(e_list, d_list):
        u = e * u + d
        out.append(u)
    return np.array(out, dtype=float)


def simulate_series(
    params_per_step,
    currents,
    socs,
    cfg: BatteryConfig,
    u_d0: float = 0.0,
) -> np.ndarray:
    """Predict terminal voltage over a series with per-step circuit parameters.

    At each step k the polarization state is advanced with (i[k], params[k])
    and the terminal voltage is formed from (soc[k], i[k], r0[k]).  Returns n
    predicted voltages; deterministic.
    """
    p = params_as_array(params_per_step)
    i = np.asarray(currents, dtype=float)
    s = np.asarray(socs, dtype=float)
    n = len(i)
    if n < 1 or p.shape[0] != n or s.shape[0] != n:
        raise ValueError(f"length mismatch: params {p.shape[0]}, currents {n}, socs {s.shape[0]}")
    r0, rd, cd = p[:, 0], p[:, 1], p[:, 2]
    e = np.exp(-cfg.dt_s / (rd * cd))
    u_d = polarization_scan(e, rd * (1.0 - e) * i, u_d0)
    return ocv_eval_array(cfg.ocv, s) - u_d - i * r0


def params_as_array(params_per_step) -> np.ndarray:
    """Normalize a parameter sequence (EcmParams list or (n,3) array) to an array."""
    if isinstance(params_per_step, np.ndarray):
        arr = np.asarray(params_per_step, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError("parameter array must have shape (n, 3)")
    else:
        arr = np.array([[q.r0, q.rd, q.cd] for q in params_per_step], dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise ValueError("invalid circuit parameters in series (non-finite or non-positive)")
    return arr


def coulomb_socs(currents, soc0: float, cfg: BatteryConfig) -> np.ndarray:
    """SOC trajectory from coulomb counting: soc[k] = soc0 - sum_{j<=k} i[j]*dt/C."""
    i = np.asarray(currents, dtype=float)
    return soc0 - np.cumsum(i) * cfg.dt_s / cfg.capacity_coulombs


def clamp_soc_for_report(soc: float) -> float:
    """Clamp SOC into [0, 1]; used only at reporting boundaries."""
    return min(1.0, max(0.0, soc))
