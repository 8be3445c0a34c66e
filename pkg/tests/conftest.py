"""Shared fixtures: default cell constants and the trained cold scenario."""

import numpy as np
import pytest

from hybridecm import BatteryConfig, OcvCurve
from hybridecm.ecm import coulomb_socs
from hybridecm.ffrls import identify_series
from hybridecm.synth import CycleSpec, TruthConfig, gen_cycle, simulate_truth
from hybridecm.trainer import default_fnn_configs, fresh_hybrid_model, train_offline

DEFAULT_COEFFS = np.array([3.0, 1.0, -0.1, 0.2])


@pytest.fixture(scope="session")
def ocv_curve() -> OcvCurve:
    return OcvCurve(coeffs=DEFAULT_COEFFS)


@pytest.fixture(scope="session")
def battery(ocv_curve) -> BatteryConfig:
    return BatteryConfig.from_amp_hours(2.9, 1.0, ocv_curve)


class ColdScenario:
    """Cold (-20 degC) dynamic-cycle scenario with a trained hybrid model."""

    def __init__(self, battery):
        self.battery = battery
        self.curve = battery.ocv
        self.split = 2800
        self.warmup = 200
        cyc = CycleSpec(
            kind="dynamic", mean_a=1.2, amplitude_a=1.5, corr_time_s=40.0,
            duration_s=4000.0, seed=11,
        )
        currents = gen_cycle(cyc, battery.dt_s)
        self.truth = simulate_truth(TruthConfig(ambient_c=-20.0, seed=11), battery, currents, 0.9)
        self.series = self.truth.series
        self.socs = coulomb_socs(self.series.current_a, 0.9, battery)
        params_list, self.diags = identify_series(self.series, self.curve, self.socs, battery)
        self.base = self.diags.params
        self.train_result = train_offline(
            self.base[: self.split],
            self.series.slice(0, self.split),
            self.socs[: self.split],
            battery,
            default_fnn_configs(0),
            warmup_skip=self.warmup,
            seed=0,
        )
        self.model = self.train_result.model
        self.fresh_model = fresh_hybrid_model(
            self.curve, battery.dt_s, default_fnn_configs(0), norm=self.model.fnn_r0.norm
        )


@pytest.fixture(scope="session")
def cold_scenario(battery) -> ColdScenario:
    return ColdScenario(battery)
