"""Recursive identification: recursion algebra, coefficient inversion, series runs."""

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from hybridecm import EcmParams
from hybridecm.ecm import coulomb_socs
from hybridecm.ffrls import (
    FfrlsOptions,
    Regressor,
    ThetaInversionError,
    ThetaVector,
    ffrls_init,
    ffrls_step,
    identify_series,
    params_from_theta,
    theta_forward,
)
from hybridecm.synth import bilinear_ecm_response, first_order_series

TRUTH = EcmParams(r0=0.05, rd=0.03, cd=1000.0)

param_triples = st.tuples(
    st.floats(1e-3, 0.5),     # r0
    st.floats(1e-3, 0.5),     # rd
    st.floats(10.0, 5e4),     # cd
)


def sag_regression_rows(params, currents, dt):
    """(y, phi) rows for the exact model-class data, matching the identifier's convention."""
    sag = bilinear_ecm_response(params, currents, dt)
    y = -sag  # terminal-voltage deviation from OCV
    i_reg = -np.asarray(currents, dtype=float)
    rows = []
    for k in range(1, len(y)):
        rows.append((y[k], np.array([-y[k - 1], i_reg[k], i_reg[k - 1]])))
    return rows


class TestInit:
    def test_construction(self):
        th0 = ThetaVector(-0.9, 0.01, -0.01)
        state = ffrls_init(0.99, 1e5, th0)
        assert np.array_equal(state.p, 1e5 * np.eye(3))
        assert np.array_equal(state.theta, th0.as_array())

    def test_lambda_one_allowed(self):
        assert ffrls_init(1.0, 1.0, ThetaVector(0, 0, 0)).lam == 1.0

    def test_lambda_out_of_range(self):
        with pytest.raises(ValueError):
            ffrls_init(1.5, 1.0, ThetaVector(0, 0, 0))
        with pytest.raises(ValueError):
            ffrls_init(0.0, 1.0, ThetaVector(0, 0, 0))


class TestStep:
    def test_zero_innovation_leaves_theta(self):
        state = ffrls_init(0.99, 10.0, ThetaVector(-0.9, 0.05, -0.04))
        phi = Regressor(np.array([0.2, -1.0, -0.9]))
        y = float(phi.phi @ state.theta)
        out = ffrls_step(state, y, phi)
        assert np.array_equal(out.theta, state.theta)
        assert not np.array_equal(out.p, state.p)

    def test_covariance_symmetry_and_psd_over_run(self):
        rng = np.random.default_rng(5)
        currents = rng.choice([-1.0, 1.0], size=400)
        state = ffrls_init(0.99, 1e5, theta_forward(EcmParams(0.1, 0.05, 500.0), 1.0))
        for y, phi in sag_regression_rows(TRUTH, currents, 1.0):
            state = ffrls_step(state, y, Regressor(phi))
            assert np.max(np.abs(state.p - state.p.T)) <= 1e-12
        assert np.all(np.linalg.eigvalsh(state.p) > 0.0)

    def test_noiseless_recovery_within_1e6(self):
        rng = np.random.default_rng(42)
        currents = rng.choice([-1.0, 1.0], size=2000)
        state = ffrls_init(0.99, 1e5, theta_forward(EcmParams(0.1, 0.05, 500.0), 1.0))
        for y, phi in sag_regression_rows(TRUTH, currents, 1.0):
            state = ffrls_step(state, y, Regressor(phi))
        expect = theta_forward(TRUTH, 1.0).as_array()
        assert np.max(np.abs(state.theta - expect)) < 1e-6

    def test_lambda_one_equals_batch_least_squares(self):
        # large p0 so the prior's regularization is negligible vs the rows
        rng = np.random.default_rng(9)
        currents = rng.choice([-1.0, 1.0], size=40)
        rows = sag_regression_rows(TRUTH, currents, 1.0)
        state = ffrls_init(1.0, 1e13, ThetaVector(0.0, 0.0, 0.0))
        for y, phi in rows:
            state = ffrls_step(state, y, Regressor(phi))
        phi_mat = np.array([phi for _, phi in rows])
        y_vec = np.array([y for y, _ in rows])
        batch, *_ = np.linalg.lstsq(phi_mat, y_vec, rcond=None)
        assert np.max(np.abs(state.theta - batch)) < 1e-8

    def test_degenerate_regressor_flags_and_holds(self):
        state = ffrls_init(0.99, 1e5, ThetaVector(0.0, 0.0, 0.0))
        out = ffrls_step(state, float("nan"), Regressor(np.array([1.0, 1.0, 1.0])))
        assert out.flagged
        assert np.array_equal(out.theta, state.theta)


class TestThetaForward:
    def test_worked_example(self):
        th = theta_forward(TRUTH, 1.0)
        assert th.a1 == pytest.approx(-59.0 / 61.0, abs=1e-15)
        assert th.a2 == pytest.approx(3.08 / 61.0, abs=1e-15)
        assert th.a3 == pytest.approx(-2.92 / 61.0, abs=1e-15)

    def test_small_tau_limit(self):
        th = theta_forward(EcmParams(0.05, 1e-6, 1e-3), 1.0)
        assert th.a1 == pytest.approx(1.0, abs=1e-8)
        assert th.a2 == pytest.approx(0.05 + 1e-6, rel=1e-6)
        assert th.a3 == pytest.approx(0.05 + 1e-6, rel=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(triple=param_triples)
    def test_identity_a2_minus_a3(self, triple):
        p = EcmParams(*triple)
        th = theta_forward(p, 1.0)
        assert th.a2 - th.a3 == pytest.approx((1.0 - th.a1) * p.r0, rel=1e-12, abs=1e-15)


class TestParamsFromTheta:
    def test_worked_example_roundtrip(self):
        th = theta_forward(TRUTH, 1.0)
        p = params_from_theta(th, 1.0)
        assert p.r0 == pytest.approx(TRUTH.r0, rel=1e-10)
        assert p.rd == pytest.approx(TRUTH.rd, rel=1e-10)
        assert p.cd == pytest.approx(TRUTH.cd, rel=1e-10)

    @settings(max_examples=150, deadline=None)
    @given(triple=param_triples)
    def test_roundtrip_property(self, triple):
        p = EcmParams(*triple)
        assume(0.1 <= p.tau <= 1e5)
        th = theta_forward(p, 1.0)
        back = params_from_theta(th, 1.0)
        for a, b in ((back.r0, p.r0), (back.rd, p.rd), (back.cd, p.cd)):
            assert a == pytest.approx(b, rel=1e-10)

    def test_singular_a1(self):
        with pytest.raises(ThetaInversionError):
            params_from_theta(ThetaVector(-1.0 + 1e-12, 0.05, -0.04), 1.0)

    def test_nonphysical_signals_invalid(self):
        # sign-flipped current terms produce a negative series resistance
        th = theta_forward(TRUTH, 1.0)
        with pytest.raises(ThetaInversionError, match="non-physical"):
            params_from_theta(ThetaVector(th.a1, -th.a2, -th.a3), 1.0)

    def test_tau_out_of_bounds(self):
        th = theta_forward(EcmParams(0.05, 0.03, 10.0), 1.0)  # tau = 0.3 s
        with pytest.raises(ThetaInversionError, match="tau"):
            params_from_theta(th, 1.0, tau_min=1.0)


class TestIdentifySeries:
    def test_noiseless_convergence_within_warmup(self, battery):
        rng = np.random.default_rng(42)
        currents = rng.choice([-1.0, 1.0], size=2000)
        series, socs = first_order_series(TRUTH, battery, currents, 0.8)
        params, diags = identify_series(series, battery.ocv, socs, battery)
        rel = np.abs(diags.params[500:] / TRUTH.as_array() - 1.0)
        assert rel.max() < 0.01
        assert not diags.ill_conditioned

    def test_constant_current_reports_ill_conditioning(self, battery):
        currents = np.full(1500, 1.2)
        series, socs = first_order_series(TRUTH, battery, currents, 0.9)
        params, diags = identify_series(series, battery.ocv, socs, battery)
        assert diags.ill_conditioned
        assert np.all(np.isfinite(diags.params))
        assert all(p.rd > 0 for p in params)

    def test_voltage_noise_r0_within_5pct(self, battery):
        rng = np.random.default_rng(7)
        currents = rng.choice([-1.0, 1.0], size=4000)
        series, socs = first_order_series(TRUTH, battery, currents, 0.8)
        noisy = series.voltage_v + rng.normal(0.0, 1e-3, series.n_samples)
        from hybridecm.dataio import SeriesData

        noisy_series = SeriesData(
            dt_s=series.dt_s, t0_s=series.t0_s, time_s=series.time_s,
            current_a=series.current_a, voltage_v=noisy, temp_c=series.temp_c,
        )
        _, diags = identify_series(noisy_series, battery.ocv, socs, battery)
        assert diags.params[-1, 0] == pytest.approx(TRUTH.r0, rel=0.05)

    def test_hold_last_policy_on_transient(self, battery):
        # start from a prior whose inversion goes non-physical early under noise
        rng = np.random.default_rng(3)
        currents = rng.choice([-1.0, 1.0], size=300)
        series, socs = first_order_series(TRUTH, battery, currents, 0.8)
        opts = FfrlsOptions(p0_scale=1e8, prior=EcmParams(0.2, 0.2, 50.0))
        params, diags = identify_series(series, battery.ocv, socs, battery, opts)
        assert np.all(diags.params > 0.0)
        assert len(params) == series.n_samples

    def test_too_short_series(self, battery):
        series, socs = first_order_series(TRUTH, battery, [1.0], 0.8)
        with pytest.raises(ValueError, match="2 samples"):
            identify_series(series, battery.ocv, socs, battery)

    def test_diagnostics_rows_schema(self, battery):
        rng = np.random.default_rng(1)
        currents = rng.choice([-1.0, 1.0], size=50)
        series, socs = first_order_series(TRUTH, battery, currents, 0.8)
        _, diags = identify_series(series, battery.ocv, socs, battery)
        rows = list(diags.rows())
        assert len(rows) == 50
        step, a1, a2, a3, r0, rd, cd, valid = rows[-1]
        assert step == 49 and valid in (0, 1) and r0 > 0
