"""Structured run configuration for the command-line pipeline.

A run config is a JSON document with battery constants, identification and
training knobs, filter noise settings, and synthetic-scenario parameters.
Loading validates the schema (unknown keys and wrong types are rejected with
the offending path named) and materializes every default, so the echoed
effective-config file always contains the full settings that produced a run.
"""

from __future__ import annotations

import copy
import json
import math

import numpy as np

from .dataio import SchemaError
from .ecm import BatteryConfig, EcmParams, OcvCurve
from .ekf import EkfConfig
from .ffrls import FfrlsOptions
from .fnn import FnnConfig
from .synth import CycleSpec, TruthConfig
from .trainer import ParamGuards, TrainingWindowing

DEFAULT_OCV_COEFFS = [3.0, 1.0, -0.1, 0.2]

DEFAULTS: dict = {
    "seed": 0,
    "battery": {
        "capacity_ah": 2.9,
        "dt_s": 1.0,
        "ocv_coeffs": DEFAULT_OCV_COEFFS,
        "ocv_soc_range": [0.0, 1.0],
    },
    "ffrls": {
        "lam": 0.99,
        "p0_scale": 1e5,
        "prior": {"r0": 0.05, "rd": 0.03, "cd": 1000.0},
        "warmup_skip": 200,
        "tau_max": 1e5,
        "ref_anchor_tau_s": 150.0,
    },
    "fnn": {
        "r0": {"hidden_sizes": [128, 4], "epochs": 200, "learning_rate": 0.001,
               "optimizer": "adagrad", "output_scale": 0.01, "seed": None},
        "rd": {"hidden_sizes": [256, 4], "epochs": 200, "learning_rate": 0.01,
               "optimizer": "adagrad", "output_scale": 0.01, "seed": None},
        "cd": {"hidden_sizes": [8, 4], "epochs": 200, "learning_rate": 0.01,
               "optimizer": "adam", "output_scale": 100.0, "seed": None},
    },
    "training": {"window_len": 64, "stride": 64, "rel_tol": 1e-6, "patience": 5},
    "ekf": {"q_diag": [1e-8, 1e-6], "r": 1e-3, "p0_diag": [1e-2, 1e-4], "x0": None},
    "synth": {
        "truth": {
            "r0_ref": 0.03, "rd1_ref": 0.02, "cd1_ref": 1500.0,
            "rd2_ref": 0.01, "cd2_ref": 20000.0,
            "alpha_per_c": 0.03, "beta_soc": 0.5,
            "sigma_v": 0.002, "sigma_i": 0.0, "ambient_c": 25.0,
        },
        "cycle": {
            "kind": "hppc", "amplitude_a": 2.9, "pulse_s": 10.0, "rest_s": 40.0,
            "corr_time_s": 40.0, "mean_a": 1.2, "duration_s": 3600.0,
            "i_max_a": None, "slew_a_per_step": None,
        },
        "soc0": 0.9,
    },
}

_TYPE_BY_EXAMPLE = {
    bool: (bool,),
    int: (int,),
    float: (int, float),
    str: (str,),
    list: (list,),
}


def _check_types(doc, defaults, path: str) -> None:
    for key, value in doc.items():
        if key.startswith("_"):
            continue
        if key not in defaults:
            raise SchemaError(f"unknown config key {path}{key}")
        ref = defaults[key]
        here = f"{path}{key}"
        if isinstance(ref, dict):
            if not isinstance(value, dict):
                raise SchemaError(f"config key {here} must be an object")
            _check_types(value, ref, here + ".")
        elif ref is None or value is None:
            continue  # nullable field or explicit null override
        else:
            expected = _TYPE_BY_EXAMPLE.get(type(ref), (type(ref),))
            if not isinstance(value, expected) or isinstance(value, bool) != isinstance(ref, bool):
                raise SchemaError(
                    f"config key {here} must be {type(ref).__name__}, got {type(value).__name__}"
                )


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key.startswith("_"):
            continue
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


class RunConfig:
    """Validated, fully-materialized run configuration."""

    def __init__(self, doc: dict | None = None):
        doc = doc or {}
        if not isinstance(doc, dict):
            raise SchemaError("config document must be a JSON object")
        _check_types(doc, DEFAULTS, "")
        self.doc = _deep_merge(DEFAULTS, doc)
        self._materialize_seeds()
        self._validate_values()

    def _materialize_seeds(self) -> None:
        base = self.doc["seed"]
        for offset, key in enumerate(("r0", "rd", "cd")):
            if self.doc["fnn"][key]["seed"] is None:
                self.doc["fnn"][key]["seed"] = base + offset

    def _validate_values(self) -> None:
        b = self.doc["battery"]
        if b["capacity_ah"] <= 0 or b["dt_s"] <= 0:
            raise SchemaError("battery.capacity_ah and battery.dt_s must be positive")
        f = self.doc["ffrls"]
        if not (0 < f["lam"] <= 1):
            raise SchemaError("ffrls.lam must be in (0, 1]")
        if f["warmup_skip"] < 0:
            raise SchemaError("ffrls.warmup_skip must be >= 0")
        if not (0 <= self.doc["synth"]["soc0"] <= 1):
            raise SchemaError("synth.soc0 must be in [0, 1]")
        for name, vec in (("ekf.q_diag", self.doc["ekf"]["q_diag"]),
                          ("ekf.p0_diag", self.doc["ekf"]["p0_diag"])):
            if len(vec) != 2 or any(not math.isfinite(v) or v < 0 for v in vec):
                raise SchemaError(f"{name} must be two non-negative numbers")
        if self.doc["ekf"]["r"] <= 0:
            raise SchemaError("ekf.r must be positive")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON: {exc}") from exc
        return cls(doc)

    def dump(self, path, invocation: dict | None = None) -> None:
        doc = copy.deepcopy(self.doc)
        if invocation:
            doc["_invocation"] = invocation
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")

    # ---- typed views -----------------------------------------------------

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    def ocv_curve(self) -> OcvCurve:
        b = self.doc["battery"]
        return OcvCurve(
            coeffs=np.array(b["ocv_coeffs"], dtype=float),
            valid_soc_range=tuple(b["ocv_soc_range"]),
        )

    def battery(self, ocv: OcvCurve | None = None) -> BatteryConfig:
        b = self.doc["battery"]
        return BatteryConfig.from_amp_hours(b["capacity_ah"], b["dt_s"], ocv or self.ocv_curve())

    def ffrls_options(self) -> FfrlsOptions:
        f = self.doc["ffrls"]
        return FfrlsOptions(
            lam=f["lam"],
            p0_scale=f["p0_scale"],
            prior=EcmParams(**f["prior"]),
            warmup_skip=f["warmup_skip"],
            tau_max=f["tau_max"],
            ref_anchor_tau_s=f["ref_anchor_tau_s"],
        )

    def fnn_configs(self) -> dict[str, FnnConfig]:
        return {
            key: FnnConfig(
                hidden_sizes=tuple(sec["hidden_sizes"]),
                epochs=sec["epochs"],
                learning_rate=sec["learning_rate"],
                optimizer=sec["optimizer"],
                seed=sec["seed"],
            )
            for key, sec in self.doc["fnn"].items()
        }

    def output_scales(self) -> dict[str, float]:
        return {key: sec["output_scale"] for key, sec in self.doc["fnn"].items()}

    def windowing(self) -> TrainingWindowing:
        t = self.doc["training"]
        return TrainingWindowing(window_len=t["window_len"], stride=t["stride"])

    def guards(self) -> ParamGuards:
        return ParamGuards.for_dt(self.doc["battery"]["dt_s"])

    def ekf_config(self) -> EkfConfig:
        e = self.doc["ekf"]
        x0 = tuple(e["x0"]) if e["x0"] is not None else None
        return EkfConfig(q=np.diag(e["q_diag"]), r=e["r"], p0=np.diag(e["p0_diag"]), x0=x0)

    def truth_config(self, ambient_c: float | None = None, seed: int | None = None) -> TruthConfig:
        t = dict(self.doc["synth"]["truth"])
        if ambient_c is not None:
            t["ambient_c"] = ambient_c
        return TruthConfig(seed=self.seed if seed is None else seed, **t)

    def cycle_spec(self, seed: int | None = None, **overrides) -> CycleSpec:
        c = dict(self.doc["synth"]["cycle"])
        c.update({k: v for k, v in overrides.items() if v is not None})
        kwargs = {k: v for k, v in c.items() if v is not None or k in ("i_max_a", "slew_a_per_step")}
        return CycleSpec(seed=self.seed if seed is None else seed, **kwargs)
