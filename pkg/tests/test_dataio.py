"""CSV ingestion, resampling, and the error metrics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridecm.dataio import (
    RawSamples,
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

paired_floats = st.lists(
    st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=1, max_size=40
)


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestParseCsv:
    def test_well_formed(self, tmp_path):
        path = write(tmp_path, "time_s,current_a,voltage_v,temp_c\n"
                               "0,1.5,3.7,25\n1,1.25,3.69,25\n2,0.0,3.71,25\n")
        raw = parse_csv(path)
        assert len(raw) == 3
        assert np.array_equal(raw.current_a, [1.5, 1.25, 0.0])
        assert raw.voltage_v[2] == 3.71

    def test_missing_column_named(self, tmp_path):
        path = write(tmp_path, "time_s,current_a,temp_c\n0,1,25\n")
        with pytest.raises(SchemaError, match="voltage_v"):
            parse_csv(path)

    def test_extra_column_ignored(self, tmp_path):
        path = write(tmp_path, "time_s,current_a,voltage_v,temp_c,cycle_id\n"
                               "0,1,3.7,25,7\n1,1,3.7,25,7\n")
        assert len(parse_csv(path)) == 2

    def test_non_numeric_reports_row(self, tmp_path):
        path = write(tmp_path, "time_s,current_a,voltage_v,temp_c\n0,1,3.7,25\n1,oops,3.7,25\n")
        with pytest.raises(SchemaError, match="row 2"):
            parse_csv(path)

    def test_empty_file(self, tmp_path):
        with pytest.raises(SchemaError, match="empty"):
            parse_csv(write(tmp_path, ""))

    def test_column_mapping(self, tmp_path):
        path = write(tmp_path, "Time,I,V,T\n0,1,3.7,25\n1,1,3.69,25\n")
        raw = parse_csv(path, {"time_s": "Time", "current_a": "I",
                               "voltage_v": "V", "temp_c": "T"})
        assert raw.voltage_v[1] == 3.69

    def test_non_increasing_time(self, tmp_path):
        path = write(tmp_path, "time_s,current_a,voltage_v,temp_c\n1,1,3.7,25\n1,1,3.7,25\n")
        with pytest.raises(SchemaError, match="increasing"):
            parse_csv(path)


class TestResample:
    def make_raw(self, t, i, v=None, temp=None):
        n = len(t)
        return RawSamples(
            time_s=np.asarray(t, dtype=float),
            current_a=np.asarray(i, dtype=float),
            voltage_v=np.asarray(v if v is not None else np.full(n, 3.7), dtype=float),
            temp_c=np.asarray(temp if temp is not None else np.full(n, 25.0), dtype=float),
        )

    def test_constant_stream(self):
        t = np.arange(0, 5, 0.1)
        out = resample(self.make_raw(t, np.full(t.size, 1.5)), 1.0)
        assert out.n_samples == 5
        assert np.allclose(out.current_a, 1.5)
        assert out.dt_s == 1.0

    def test_alternating_current_mean(self):
        t = np.arange(0, 4, 0.1)
        i = np.tile([0.0, 2.0], t.size // 2)
        out = resample(self.make_raw(t, i), 1.0)
        assert np.allclose(out.current_a, 1.0)

    def test_charge_preserved(self):
        rng = np.random.default_rng(0)
        t = np.arange(0, 30, 0.1)
        i = rng.uniform(0, 3, t.size)
        out = resample(self.make_raw(t, i), 1.0)
        before = np.sum(i) * 0.1
        after = np.sum(out.current_a) * 1.0
        assert after == pytest.approx(before, rel=1e-9)

    def test_gap_reported(self):
        t = np.concatenate([np.arange(0, 2, 0.5), np.arange(7, 9, 0.5)])
        with pytest.raises(SchemaError, match="gap"):
            resample(self.make_raw(t, np.ones(t.size)), 1.0)

    def test_too_few_output_samples(self):
        with pytest.raises(SchemaError, match="at least 2"):
            resample(self.make_raw([0.0, 0.1], [1.0, 1.0]), 1.0)


class TestSeriesData:
    def test_nonuniform_rejected(self):
        with pytest.raises(SchemaError, match="uniform"):
            SeriesData(dt_s=1.0, t0_s=0.0, time_s=[0.0, 1.0, 2.5],
                       current_a=[1, 1, 1], voltage_v=[3.7] * 3, temp_c=[25] * 3)

    def test_voltage_band_enforced(self):
        with pytest.raises(SchemaError, match="sanity"):
            SeriesData(dt_s=1.0, t0_s=0.0, time_s=[0.0, 1.0],
                       current_a=[1, 1], voltage_v=[3.7, 42.0], temp_c=[25, 25])

    def test_roundtrip_value_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        series = SeriesData(
            dt_s=1.0, t0_s=0.0, time_s=np.arange(20.0),
            current_a=rng.normal(1.0, 0.3, 20),
            voltage_v=rng.uniform(3.0, 4.0, 20),
            temp_c=np.full(20, -10.0),
        )
        path = tmp_path / "series.csv"
        write_series_csv(series, path)
        back = series_from_raw(parse_csv(path), 1.0)
        for name in ("time_s", "current_a", "voltage_v", "temp_c"):
            assert np.array_equal(getattr(back, name), getattr(series, name))

    def test_slice_preserves_contract(self):
        series = SeriesData(dt_s=1.0, t0_s=0.0, time_s=np.arange(10.0),
                            current_a=np.ones(10), voltage_v=np.full(10, 3.7),
                            temp_c=np.full(10, 25.0))
        part = series.slice(3, 7)
        assert part.n_samples == 4
        assert part.t0_s == 3.0


class TestMetrics:
    def test_mse_identical(self):
        assert mse([3.1, 3.2], [3.1, 3.2]) == 0.0

    def test_mse_example(self):
        assert mse([1.0, 2.0], [1.0, 4.0]) == 2.0

    def test_paper_scale_residuals(self):
        # the headline voltage-error magnitudes this metric reports on real data
        assert improvement_pct(0.0096, 0.0043) == pytest.approx(55.2, abs=0.1)

    def test_rmse_example(self):
        assert rmse([0.03, 0.04], [0.0, 0.0]) == pytest.approx(0.035355339059, abs=1e-9)

    def test_rmse_is_sqrt_of_mse(self):
        p, t = [1.0, 2.0, 4.0], [0.5, 2.5, 3.0]
        assert rmse(p, t) == math.sqrt(mse(p, t))

    def test_improvement_examples(self):
        assert improvement_pct(0.010, 0.005) == 50.0
        assert improvement_pct(0.010, 0.010) == 0.0
        assert improvement_pct(0.0581, 0.0209) == pytest.approx(64.03, abs=0.1)

    def test_improvement_rejects_nonpositive_baseline(self):
        with pytest.raises(ValueError):
            improvement_pct(0.0, 0.005)

    def test_mse_shape_errors(self):
        with pytest.raises(ValueError):
            mse([1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            mse([], [])

    @settings(max_examples=50, deadline=None)
    @given(pairs=paired_floats, c=st.floats(0.1, 10))
    def test_scaling_property(self, pairs, c):
        p = np.array([a for a, _ in pairs])
        t = np.array([b for _, b in pairs])
        assert mse(c * p, c * t) == pytest.approx(c * c * mse(p, t), rel=1e-9, abs=1e-12)
        assert rmse(c * p, c * t) == pytest.approx(c * rmse(p, t), rel=1e-9, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(pairs=paired_floats)
    def test_paired_permutation_invariance(self, pairs):
        p = np.array([a for a, _ in pairs])
        t = np.array([b for _, b in pairs])
        perm = np.random.default_rng(0).permutation(p.size)
        assert mse(p[perm], t[perm]) == pytest.approx(mse(p, t), rel=1e-12)
