"""Telemetry ingestion, resampling, and error metrics.

Canonical telemetry CSV schema (UTF-8, '.' decimal, LF line endings):

    time_s,current_a,voltage_v,temp_c

Current is discharge-positive.  Extra columns are ignored on read; a column
mapping can rename nonstandard headers.  All functions here are pure.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

REQUIRED_COLUMNS = ("time_s", "current_a", "voltage_v", "temp_c")
TIME_UNIFORMITY_TOL_S = 1e-6
VOLTAGE_SANITY_BAND = (0.0, 10.0)


class SchemaError(ValueError):
    """Malformed telemetry file or series that violates the data contract."""


@dataclass(frozen=True)
class RawSamples:
    """Unresampled telemetry columns, in file order."""

    time_s: np.ndarray
    current_a: np.ndarray
    voltage_v: np.ndarray
    temp_c: np.ndarray

    def __len__(self) -> int:
        return self.time_s.size


@dataclass(frozen=True)
class SeriesData:
    """Uniformly sampled telemetry at a fixed interval dt_s."""

    dt_s: float
    t0_s: float
    time_s: np.ndarray
    current_a: np.ndarray
    voltage_v: np.ndarray
    temp_c: np.ndarray

    def __post_init__(self) -> None:
        cols = {}
        n = None
        for name in ("time_s", "current_a", "voltage_v", "temp_c"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            cols[name] = arr
            if n is None:
                n = arr.size
            elif arr.size != n:
                raise SchemaError(f"column {name} has {arr.size} samples, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise SchemaError(f"column {name} contains non-finite values")
        if n is None or n < 1:
            raise SchemaError("series must contain at least one sample")
        if not (math.isfinite(self.dt_s) and self.dt_s > 0):
            raise SchemaError(f"dt_s must be positive, got {self.dt_s}")
        steps = np.diff(cols["time_s"])
        if steps.size and np.any(np.abs(steps - self.dt_s) > TIME_UNIFORMITY_TOL_S):
            bad = int(np.argmax(np.abs(steps - self.dt_s)))
            raise SchemaError(
                f"time axis not uniform at dt={self.dt_s}s near t={cols['time_s'][bad]:.3f}s"
            )
        lo, hi = VOLTAGE_SANITY_BAND
        v = cols["voltage_v"]
        if np.any(v <= lo) or np.any(v >= hi):
            raise SchemaError(f"voltage outside sanity band ({lo}, {hi}) V")

    @property
    def n_samples(self) -> int:
        return self.time_s.size

    def slice(self, start: int, stop: int) -> "SeriesData":
        return SeriesData(
            dt_s=self.dt_s,
            t0_s=float(self.time_s[start]),
            time_s=self.time_s[start:stop],
            current_a=self.current_a[start:stop],
            voltage_v=self.voltage_v[start:stop],
            temp_c=self.temp_c[start:stop],
        )


def parse_csv(path, column_map: dict[str, str] | None = None) -> RawSamples:
    """Read a telemetry CSV into raw sample records.

    `column_map` maps canonical names to the file's header names, e.g.
    {"time_s": "Time", "current_a": "I"}.  Extra columns are ignored.
    Raises SchemaError naming the missing column or the offending row.
    """
    rename = {canon: canon for canon in REQUIRED_COLUMNS}
    if column_map:
        for canon, actual in column_map.items():
            if canon not in REQUIRED_COLUMNS:
                raise SchemaError(f"unknown canonical column {canon!r} in mapping")
            rename[canon] = actual

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        col_idx = {}
        for canon in REQUIRED_COLUMNS:
            actual = rename[canon]
            if actual not in header:
                raise SchemaError(f"{path}: missing required column {actual!r}")
            col_idx[canon] = header.index(actual)

        cols: dict[str, list[float]] = {canon: [] for canon in REQUIRED_COLUMNS}
        for row_num, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            for canon, idx in col_idx.items():
                try:
                    cols[canon].append(float(row[idx]))
                except (ValueError, IndexError):
                    cell = row[idx] if idx < len(row) else "<missing>"
                    raise SchemaError(
                        f"{path}: non-numeric value {cell!r} in column "
                        f"{rename[canon]!r} at data row {row_num}"
                    ) from None

    if not cols["time_s"]:
        raise SchemaError(f"{path}: no data rows")
    t = np.array(cols["time_s"])
    if np.any(np.diff(t) <= 0):
        raise SchemaError(f"{path}: time column must be strictly increasing")
    return RawSamples(
        time_s=t,
        current_a=np.array(cols["current_a"]),
        voltage_v=np.array(cols["voltage_v"]),
        temp_c=np.array(cols["temp_c"]),
    )


def resample(raw: RawSamples, dt_s: float) -> SeriesData:
    """Bin-mean resampling to a uniform rate.

    Bins of width dt_s are anchored at the first timestamp; each output sample
    is the mean of the raw samples in its bin (mean current preserves charge).
    An empty interior bin is a gap and raises SchemaError with its location.
    """
    if dt_s <= 0:
        raise SchemaError("dt_s must be positive")
    t = raw.time_s
    bins = np.floor((t - t[0]) / dt_s + 1e-12).astype(int)
    n_bins = int(bins[-1]) + 1
    counts = np.bincount(bins, minlength=n_bins)
    if np.any(counts == 0):
        gap = int(np.argmax(counts == 0))
        raise SchemaError(f"time gap: no samples in bin starting t={t[0] + gap * dt_s:.3f}s")
    if n_bins < 2:
        raise SchemaError(f"resampling yields {n_bins} samples; need at least 2")

    def bin_mean(values: np.ndarray) -> np.ndarray:
        return np.bincount(bins, weights=values, minlength=n_bins) / counts

    return SeriesData(
        dt_s=dt_s,
        t0_s=float(t[0]),
        time_s=t[0] + dt_s * np.arange(n_bins),
        current_a=bin_mean(raw.current_a),
        voltage_v=bin_mean(raw.voltage_v),
        temp_c=bin_mean(raw.temp_c),
    )


def write_series_csv(series: SeriesData, path) -> None:
    """Write a series in the canonical schema; round-trips value-exactly."""
    columns = [series.time_s.tolist(), series.current_a.tolist(),
               series.voltage_v.tolist(), series.temp_c.tolist()]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(REQUIRED_COLUMNS) + "\n")
        for row in zip(*columns):
            fh.write(",".join(repr(v) for v in row) + "\n")


def series_from_raw(raw: RawSamples, dt_s: float) -> SeriesData:
    """Wrap already-uniform raw samples without re-binning."""
    return SeriesData(
        dt_s=dt_s,
        t0_s=float(raw.time_s[0]),
        time_s=raw.time_s,
        current_a=raw.current_a,
        voltage_v=raw.voltage_v,
        temp_c=raw.temp_c,
    )


def mse(pred, truth) -> float:
    """Mean squared error between paired sequences."""
    p = np.asarray(pred, dtype=float)
    z = np.asarray(truth, dtype=float)
    if p.shape != z.shape or p.ndim != 1:
        raise ValueError(f"shape mismatch: pred {p.shape}, truth {z.shape}")
    if p.size == 0:
        raise ValueError("mse of empty sequences is undefined")
    d = p - z
    return float(d @ d / p.size)


def rmse(pred, truth) -> float:
    """Root mean squared error, defined as sqrt(mse)."""
    return math.sqrt(mse(pred, truth))


def improvement_pct(baseline_err: float, candidate_err: float) -> float:
    """Relative error reduction in percent: 100*(baseline - candidate)/baseline."""
    if not (math.isfinite(baseline_err) and baseline_err > 0.0):
        raise ValueError(f"baseline error must be positive, got {baseline_err}")
    return 100.0 * (baseline_err - candidate_err) / baseline_err
