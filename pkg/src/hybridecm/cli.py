"""Batch command-line front end for the modeling pipeline.

Subcommands wire the library into the offline-training / online-estimation
flow:

    gen       synthetic scenario -> telemetry CSV + truth CSV
    fit-ocv   low-rate discharge CSV -> OCV polynomial JSON
    identify  telemetry -> per-step circuit parameter CSV
    train     telemetry + parameters -> model JSON + loss history CSV
    estimate  telemetry + model -> SOC trajectory CSV
    evaluate  trajectory CSVs + truth -> metrics JSON/CSV
    report    metrics files -> one aggregate table

Every run echoes its fully-materialized configuration next to its outputs;
re-running with that file and the same arguments reproduces the artifacts
byte-for-byte.  Exit codes: 0 success, 2 invalid input or configuration,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .config import RunConfig
from .dataio import (
    SchemaError,
    SeriesData,
    improvement_pct,
    mse,
    parse_csv,
    resample,
    rmse,
    series_from_raw,
    write_series_csv,
)
from .ecm import EcmParams, OcvCurve, coulomb_socs, fit_ocv
from .ekf import estimate_soc_series
from .ffrls import identify_series
from .synth import gen_cycle, simulate_truth
from .trainer import HybridModel, load_model, save_model, train_offline


def max_parallel() -> int:
    """Scenario fan-out cap from HYBRID_ECM_THREADS (defaults to the CPU count)."""
    raw = os.environ.get("HYBRID_ECM_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise SchemaError(f"HYBRID_ECM_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


# ---- small file helpers ----------------------------------------------------


def _write_rows(path, header: list[str], rows) -> None:
    # repr of a built-in float is the shortest round-trip representation
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(
                ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in row) + "\n"
            )


def _read_columns(path, names: list[str]) -> dict[str, np.ndarray]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file")
        missing = [n for n in names if n not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
        cols: dict[str, list[float]] = {n: [] for n in names}
        for row_num, row in enumerate(reader, start=1):
            for n in names:
                try:
                    cols[n].append(float(row[n]))
                except (TypeError, ValueError):
                    raise SchemaError(
                        f"{path}: non-numeric {row[n]!r} in column {n} at row {row_num}"
                    ) from None
    return {n: np.array(v) for n, v in cols.items()}


def _load_series(path, dt_s: float, column_map=None, do_resample=False) -> SeriesData:
    raw = parse_csv(path, column_map)
    if do_resample:
        return resample(raw, dt_s)
    return series_from_raw(raw, dt_s)


def _parse_map(spec: str | None) -> dict[str, str] | None:
    if not spec:
        return None
    out = {}
    for part in spec.split(","):
        if "=" not in part:
            raise SchemaError(f"bad --map entry {part!r}, expected canonical=actual")
        canon, actual = part.split("=", 1)
        out[canon.strip()] = actual.strip()
    return out


def _load_ocv_json(path) -> OcvCurve:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        return OcvCurve(
            coeffs=np.array(doc["coeffs"], dtype=float),
            valid_soc_range=tuple(doc["valid_soc_range"]),
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: bad OCV document: {exc}") from exc


def _load_params_csv(path) -> tuple[np.ndarray, np.ndarray]:
    cols = _read_columns(path, ["r0", "rd", "cd", "valid_flag"])
    params = np.column_stack([cols["r0"], cols["rd"], cols["cd"]])
    return params, cols["valid_flag"].astype(bool)


def _write_truth_csv(path, result) -> None:
    _write_rows(
        path,
        ["time_s", "soc_true", "u_d1_v", "u_d2_v", "r0_eff_ohm", "voltage_clean_v"],
        zip(
            result.series.time_s.tolist(),
            result.soc_true.tolist(),
            result.u_d1.tolist(),
            result.u_d2.tolist(),
            result.r0_eff.tolist(),
            result.voltage_clean.tolist(),
        ),
    )


def _echo_config(cfg: RunConfig, prefix: str, subcommand: str, args: argparse.Namespace) -> None:
    shown = {
        k: v for k, v in vars(args).items() if k not in ("func", "config") and v is not None
    }
    cfg.dump(prefix + ".config.json", invocation={"subcommand": subcommand, "args": shown})


def _config_from_args(args: argparse.Namespace, overrides: dict | None = None) -> RunConfig:
    doc = {}
    if getattr(args, "config", None):
        doc = RunConfig.load(args.config).doc
    if overrides:
        from .config import _deep_merge

        doc = _deep_merge(doc, overrides)
    return RunConfig(doc)


# ---- subcommands -----------------------------------------------------------


def cmd_gen(args: argparse.Namespace) -> int:
    overrides: dict = {"synth": {"truth": {}, "cycle": {}}}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.temp is not None:
        overrides["synth"]["truth"]["ambient_c"] = args.temp
    for flag, key in (
        ("cycle", "kind"), ("duration_s", "duration_s"), ("amplitude_a", "amplitude_a"),
        ("mean_a", "mean_a"), ("pulse_s", "pulse_s"), ("rest_s", "rest_s"),
        ("corr_time_s", "corr_time_s"),
    ):
        val = getattr(args, flag)
        if val is not None:
            overrides["synth"]["cycle"][key] = val
    if args.soc0 is not None:
        overrides["synth"]["soc0"] = args.soc0
    cfg = _config_from_args(args, overrides)

    batt = cfg.battery()
    currents = gen_cycle(cfg.cycle_spec(), batt.dt_s)
    result = simulate_truth(cfg.truth_config(), batt, currents, cfg.doc["synth"]["soc0"])
    if result.exhausted:
        print(f"note: SOC exhausted, series truncated to {result.series.n_samples} samples")
    write_series_csv(result.series, args.out + ".csv")
    _write_truth_csv(args.out + ".truth.csv", result)
    _echo_config(cfg, args.out, "gen", args)
    print(f"wrote {args.out}.csv ({result.series.n_samples} samples) and {args.out}.truth.csv")
    return 0


def cmd_fit_ocv(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    batt = cfg.battery()
    series = _load_series(args.input, batt.dt_s, _parse_map(args.map), args.resample)
    socs = coulomb_socs(series.current_a, args.soc0, batt)
    curve = fit_ocv(np.clip(socs, 0.0, 1.0), series.voltage_v, args.degree)
    doc = {"coeffs": curve.coeffs.tolist(), "valid_soc_range": list(curve.valid_soc_range)}
    with open(args.out + ".ocv.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    _echo_config(cfg, args.out, "fit-ocv", args)
    print(f"wrote {args.out}.ocv.json (degree {args.degree})")
    return 0


def cmd_identify(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    curve = _load_ocv_json(args.ocv) if args.ocv else cfg.ocv_curve()
    batt = cfg.battery(curve)
    series = _load_series(args.input, batt.dt_s, _parse_map(args.map), args.resample)
    socs = coulomb_socs(series.current_a, args.soc0, batt)
    _, diags = identify_series(series, curve, socs, batt, cfg.ffrls_options())
    _write_rows(
        args.out + ".params.csv",
        ["step", "a1", "a2", "a3", "r0", "rd", "cd", "valid_flag"],
        diags.rows(),
    )
    _echo_config(cfg, args.out, "identify", args)
    if diags.ill_conditioned:
        print(
            "warning: identification ill-conditioned "
            f"(covariance trace peaked at {diags.max_p_trace:.3e}); hold-last policy applied"
        )
    print(
        f"wrote {args.out}.params.csv "
        f"({diags.params.shape[0]} steps, {diags.invalid_count} held)"
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["fnn"] = {k: {"epochs": args.epochs} for k in ("r0", "rd", "cd")}
    if args.window is not None:
        overrides["training"] = {"window_len": args.window, "stride": args.window}
    cfg = _config_from_args(args, overrides)

    curve = _load_ocv_json(args.ocv) if args.ocv else cfg.ocv_curve()
    batt = cfg.battery(curve)
    series = _load_series(args.input, batt.dt_s, _parse_map(args.map), args.resample)
    socs = coulomb_socs(series.current_a, args.soc0, batt)
    base_params, _ = _load_params_csv(args.params)
    if base_params.shape[0] != series.n_samples:
        raise SchemaError(
            f"{args.params}: {base_params.shape[0]} parameter rows vs "
            f"{series.n_samples} telemetry samples"
        )

    t0 = time.perf_counter()
    result = train_offline(
        base_params,
        series,
        socs,
        batt,
        cfg.fnn_configs(),
        cfg.windowing(),
        output_scales=cfg.output_scales(),
        guards=cfg.guards(),
        warmup_skip=cfg.doc["ffrls"]["warmup_skip"],
        rel_tol=cfg.doc["training"]["rel_tol"],
        patience=cfg.doc["training"]["patience"],
        seed=cfg.seed,
    )
    elapsed = time.perf_counter() - t0

    save_model(result.model, args.out + ".model.json")
    _write_rows(args.out + ".loss.csv", ["epoch", "loss"], enumerate(result.loss_history))
    _echo_config(cfg, args.out, "train", args)
    print(
        f"trained {result.epochs_run} epochs, best loss {result.best_loss:.6e} "
        f"at epoch {result.best_epoch}"
    )
    print(f"timing: offline training {elapsed:.3f} s")
    if result.diverged:
        print("numerical failure: training loss diverged; best-so-far model saved", file=sys.stderr)
        return 3
    return 0


def cmd_estimate(args: argparse.Namespace) -> int:
    overrides: dict = {}
    if args.x0_soc is not None:
        overrides["ekf"] = {"x0": [args.x0_soc, 0.0]}
    cfg = _config_from_args(args, overrides)

    model: HybridModel | None = None
    if args.model:
        model = load_model(args.model)
        if abs(model.dt_s - cfg.doc["battery"]["dt_s"]) > 1e-9:
            raise SchemaError(
                f"{args.model}: model dt {model.dt_s}s does not match battery dt "
                f"{cfg.doc['battery']['dt_s']}s"
            )
    curve = model.ocv if model is not None else cfg.ocv_curve()
    batt = cfg.battery(curve)
    series = _load_series(args.input, batt.dt_s, _parse_map(args.map), args.resample)

    freeze = None
    if args.freeze_ffrls:
        params, valid = _load_params_csv(args.freeze_ffrls)
        idx = np.nonzero(valid)[0]
        if idx.size == 0:
            raise SchemaError(f"{args.freeze_ffrls}: no valid parameter rows to freeze")
        freeze = EcmParams(*params[idx[-1]])

    t0 = time.perf_counter()
    result = estimate_soc_series(
        series,
        model,
        batt,
        cfg.ekf_config(),
        cfg.ffrls_options(),
        plain_ecm=args.plain_ecm,
        freeze_params=freeze,
    )
    elapsed = time.perf_counter() - t0

    header = ["step", "time_s", "soc_est", "u_d_est", "voltage_meas", "voltage_pred", "innovation"]
    columns = [
        np.arange(series.n_samples),
        series.time_s,
        result.soc,
        result.u_d,
        series.voltage_v,
        result.voltage_pred,
        result.innovation,
    ]
    if args.truth:
        truth = _read_columns(args.truth, ["soc_true"])["soc_true"]
        if truth.size != series.n_samples:
            raise SchemaError(
                f"{args.truth}: {truth.size} truth rows vs {series.n_samples} samples"
            )
        header.insert(2, "soc_true")
        columns.insert(2, truth)
    rows = zip(*[c.tolist() for c in columns])
    _write_rows(args.out + ".traj.csv", header, rows)
    _echo_config(cfg, args.out, "estimate", args)
    print(f"wrote {args.out}.traj.csv ({series.n_samples} steps, {result.clamp_events} clamps)")
    print(f"timing: online estimation {elapsed:.3f} s")
    return 0


def _metric_rows(args, quantity: str) -> list[dict]:
    rows = []
    base_err = None
    for label, path in (
        (args.baseline_label, args.baseline),
        (args.candidate_label, args.candidate),
    ):
        if path is None:
            continue
        if quantity == "soc":
            cols = _read_columns(path, ["soc_est"])
            truth = _read_columns(args.truth, ["soc_true"])["soc_true"]
            n = min(cols["soc_est"].size, truth.size)
            err_mse = mse(cols["soc_est"][:n], truth[:n])
            err_rmse = rmse(cols["soc_est"][:n], truth[:n])
            headline = err_rmse
        else:
            cols = _read_columns(path, ["voltage_pred", "voltage_meas"])
            err_mse = mse(cols["voltage_pred"], cols["voltage_meas"])
            err_rmse = rmse(cols["voltage_pred"], cols["voltage_meas"])
            headline = err_mse
        row = {
            "scenario": args.scenario,
            "model": label,
            "mse": err_mse,
            "rmse": err_rmse,
            "improvement_pct": None,
        }
        if path == args.baseline:
            base_err = headline
        elif base_err is not None:
            row["improvement_pct"] = improvement_pct(base_err, headline)
        rows.append(row)
    return rows


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    if args.quantity == "soc" and not args.truth:
        raise SchemaError("--truth is required for --quantity soc")
    rows = _metric_rows(args, args.quantity)
    _write_metrics(args.out, rows)
    _echo_config(cfg, args.out, "evaluate", args)
    for row in rows:
        imp = f", improvement {row['improvement_pct']:.2f}%" if row["improvement_pct"] is not None else ""
        print(f"{row['scenario']} {row['model']}: mse {row['mse']:.6e}, rmse {row['rmse']:.6e}{imp}")
    return 0


def _write_metrics(prefix: str, rows: list[dict]) -> None:
    with open(prefix + ".metrics.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(rows, fh, indent=1)
        fh.write("\n")
    _write_rows(
        prefix + ".metrics.csv",
        ["scenario", "model", "mse", "rmse", "improvement_pct"],
        (
            [r["scenario"], r["model"], r["mse"], r["rmse"],
             "" if r["improvement_pct"] is None else r["improvement_pct"]]
            for r in rows
        ),
    )


def cmd_report(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    rows: list[dict] = []
    for path in args.inputs:
        with open(path, "r", encoding="utf-8") as fh:
            part = json.load(fh)
        if not isinstance(part, list):
            raise SchemaError(f"{path}: expected a JSON array of metric rows")
        rows.extend(part)
    with open(args.out + ".report.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(rows, fh, indent=1)
        fh.write("\n")
    _write_rows(
        args.out + ".report.csv",
        ["scenario", "model", "mse", "rmse", "improvement_pct"],
        (
            [r["scenario"], r["model"], r["mse"], r["rmse"],
             "" if r.get("improvement_pct") is None else r["improvement_pct"]]
            for r in rows
        ),
    )
    _echo_config(cfg, args.out, "report", args)
    width = max((len(str(r["scenario"])) for r in rows), default=8)
    print(f"{'scenario':<{width}}  {'model':<10}  {'mse':>12}  {'rmse':>12}  {'improvement':>11}")
    for r in rows:
        imp = "" if r.get("improvement_pct") is None else f"{r['improvement_pct']:.2f}%"
        print(
            f"{r['scenario']:<{width}}  {r['model']:<10}  {r['mse']:>12.6e}  "
            f"{r['rmse']:>12.6e}  {imp:>11}"
        )
    return 0


# ---- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridecm",
        description="Grey-box battery modeling: identification, neural correction, SOC estimation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_common(p, needs_input=True):
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--out", required=True, help="output path prefix")
        if needs_input:
            p.add_argument("--input", required=True, help="telemetry CSV")
            p.add_argument("--map", help="column mapping, e.g. time_s=Time,current_a=I")
            p.add_argument("--resample", action="store_true",
                           help="bin-mean resample the input to the working rate")

    p = sub.add_parser("gen", help="generate a synthetic scenario")
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--cycle", choices=["hppc", "dynamic", "constant"])
    p.add_argument("--temp", type=float, help="ambient temperature degC")
    p.add_argument("--seed", type=int)
    p.add_argument("--duration-s", type=float, dest="duration_s")
    p.add_argument("--amplitude-a", type=float, dest="amplitude_a")
    p.add_argument("--mean-a", type=float, dest="mean_a")
    p.add_argument("--pulse-s", type=float, dest="pulse_s")
    p.add_argument("--rest-s", type=float, dest="rest_s")
    p.add_argument("--corr-time-s", type=float, dest="corr_time_s")
    p.add_argument("--soc0", type=float)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("fit-ocv", help="fit an OCV polynomial from a low-rate discharge")
    add_common(p)
    p.add_argument("--soc0", type=float, default=1.0)
    p.add_argument("--degree", type=int, default=9)
    p.set_defaults(func=cmd_fit_ocv)

    p = sub.add_parser("identify", help="per-step circuit parameters from telemetry")
    add_common(p)
    p.add_argument("--soc0", type=float, required=True)
    p.add_argument("--ocv", help="OCV JSON from fit-ocv (default: configured curve)")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("train", help="train the correction networks offline")
    add_common(p)
    p.add_argument("--params", required=True, help="per-step parameter CSV from identify")
    p.add_argument("--soc0", type=float, required=True)
    p.add_argument("--ocv")
    p.add_argument("--epochs", type=int, help="override epoch budget for all networks")
    p.add_argument("--window", type=int, help="override training window length")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="online SOC estimation over telemetry")
    add_common(p)
    p.add_argument("--model", help="model JSON from train (omit for plain circuit)")
    p.add_argument("--plain-ecm", action="store_true", dest="plain_ecm",
                   help="skip neural corrections (baseline comparator)")
    p.add_argument("--freeze-ffrls", dest="freeze_ffrls",
                   help="parameter CSV whose last valid row replaces streaming identification")
    p.add_argument("--truth", help="truth CSV; adds a soc_true column to the trajectory")
    p.add_argument("--x0-soc", type=float, dest="x0_soc", help="initial SOC estimate")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", help="metrics for trajectory CSVs against truth")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--candidate", required=True, help="trajectory CSV to score")
    p.add_argument("--baseline", help="trajectory CSV for the improvement reference")
    p.add_argument("--truth", help="truth CSV (required for --quantity soc)")
    p.add_argument("--quantity", choices=["soc", "voltage"], default="soc")
    p.add_argument("--scenario", default="scenario")
    p.add_argument("--candidate-label", default="hybrid", dest="candidate_label")
    p.add_argument("--baseline-label", default="ecm", dest="baseline_label")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate metrics files into one table")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--inputs", nargs="+", required=True, help="metrics JSON files")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
