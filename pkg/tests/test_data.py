import datetime as dt
import os
import struct
import warnings

import numpy as np
import pytest

from leafpatch.data import (
    RawDataset,
    ZScore,
    chronological_split,
    impute_forward,
    load_dataset,
    metrics,
    save_dataset,
    stack_windows,
    synth_generate,
    window_starts,
    windows,
)


def dataset(t, n=3, seed=0):
    rng = np.random.default_rng(seed)
    return RawDataset(rng.standard_normal((t, n)), rng.uniform(size=n), rng.uniform(size=n), dt.datetime(2019, 1, 1), 15)


class TestSplit:
    def test_ratio(self):
        tr, va, te = chronological_split(dataset(100))
        assert (len(tr), len(va), len(te)) == (60, 20, 20)
        assert (tr.offset, va.offset, te.offset) == (0, 60, 80)

    def test_full_year(self):
        ds = RawDataset(np.zeros((35040, 1)), [0.0], [0.0], dt.datetime(2019, 1, 1), 15)
        assert [len(s) for s in chronological_split(ds)] == [21024, 7008, 7008]

    def test_too_short(self):
        with pytest.raises(ValueError, match="shorter"):
            chronological_split(dataset(23))

    def test_contiguous_and_ordered(self):
        ds = dataset(57)
        parts = chronological_split(ds)
        np.testing.assert_array_equal(np.concatenate([p.values for p in parts]), ds.values)


class TestWindows:
    def test_one_window(self):
        tr, _, _ = chronological_split(dataset(40))
        assert len(tr) == 24 and len(list(windows(tr))) == 1

    def test_thirty_slices(self):
        split = chronological_split(dataset(50))[0]
        assert len(split) == 30 and len(list(windows(split))) == 7

    def test_contents_and_timestamp(self):
        ds = dataset(60)
        split = chronological_split(ds)[1]
        w = list(windows(split, history=3, horizon=2))[4]
        np.testing.assert_array_equal(w.history, ds.values[36 + 4 : 36 + 7])
        np.testing.assert_array_equal(w.future, ds.values[36 + 7 : 36 + 9])
        assert w.last_timestamp == dt.datetime(2019, 1, 1) + dt.timedelta(minutes=15 * (36 + 6))

    def test_stride_and_short_split(self):
        assert window_starts(30, stride=3).tolist() == [0, 3, 6]
        assert window_starts(23).size == 0
        split = chronological_split(dataset(30))[1]
        with pytest.raises(ValueError):
            next(windows(split))

    def test_stack_matches_generator(self):
        split = chronological_split(dataset(80))[0]
        hist, fut = stack_windows(split.values, window_starts(len(split)), 12, 12)
        for i, w in enumerate(windows(split)):
            assert np.array_equal(hist[i], w.history) and np.array_equal(fut[i], w.future)


class TestMetrics:
    def test_offset_by_one(self):
        target = np.full((2, 12, 4), 10.0)
        report = metrics(target + 1, target)
        for key in ("3", "6", "12", "average"):
            mae, rmse, mape = report[key]
            assert mae == pytest.approx(1.0) and rmse == pytest.approx(1.0) and mape == pytest.approx(10.0)
        assert list(report.rows) == ["3", "6", "12", "average"]

    def test_against_loops(self, rng):
        pred, target = rng.standard_normal((3, 12, 5)), rng.standard_normal((3, 12, 5))
        target[0, 2, 1] = 0.0  # masked out of MAPE
        report = metrics(pred, target)
        errs = [pred[s, 5, n] - target[s, 5, n] for s in range(3) for n in range(5)]
        assert report["6"][0] == pytest.approx(sum(abs(e) for e in errs) / len(errs), abs=1e-12)
        assert report["6"][1] == pytest.approx((sum(e * e for e in errs) / len(errs)) ** 0.5, abs=1e-12)
        cells = [(s, n) for s in range(3) for n in range(5) if abs(target[s, 2, n]) > 1e-3]
        mape = sum(abs(pred[s, 2, n] - target[s, 2, n]) / abs(target[s, 2, n]) for s, n in cells) / len(cells) * 100
        assert report["3"][2] == pytest.approx(mape, rel=1e-12)

    def test_empty_mask(self):
        with pytest.warns(RuntimeWarning, match="MAPE"):
            report = metrics(np.ones((12, 2)), np.zeros((12, 2)))
        assert report.average[2] is None

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metrics(np.ones((12, 2)), np.ones((12, 3)))

    def test_csv_columns(self, tmp_path):
        metrics(np.ones((12, 2)) * 2, np.ones((12, 2))).to_csv(tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "horizon,mae,rmse,mape"
        assert [l.split(",")[0] for l in lines[1:]] == ["3", "6", "12", "average"]


class TestLoader:
    def test_round_trip(self, tmp_path):
        ds = dataset(30, n=4)
        save_dataset(ds, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        assert np.array_equal(back.values, ds.values)
        assert np.array_equal(back.lat, ds.lat) and np.array_equal(back.lng, ds.lng)
        assert back.start_time == ds.start_time and back.slice_minutes == ds.slice_minutes

    def test_nan_carry_forward(self, tmp_path):
        ds = dataset(5, n=2)
        ds.values[3, 1] = np.nan
        save_dataset(ds, tmp_path / "d")
        with pytest.warns(RuntimeWarning, match="1 missing"):
            back = load_dataset(tmp_path / "d")
        assert back.values[3, 1] == ds.values[2, 1]

    def test_leading_nan_becomes_zero(self):
        filled, count = impute_forward(np.array([[np.nan, 1.0], [2.0, np.nan]]))
        assert count == 2 and filled.tolist() == [[0.0, 1.0], [2.0, 1.0]]

    def test_count_mismatch(self, tmp_path):
        save_dataset(dataset(5, n=3), tmp_path / "d")
        with open(tmp_path / "d" / "points.csv", "a") as fh:
            fh.write("3,0.5,0.5\n")
        with pytest.raises(ValueError, match="does not match"):
            load_dataset(tmp_path / "d")

    def test_ragged_payload(self, tmp_path):
        save_dataset(dataset(5, n=3), tmp_path / "d")
        with open(tmp_path / "d" / "values.bin", "ab") as fh:
            fh.write(b"\0" * 4)
        with pytest.raises(ValueError, match="ragged"):
            load_dataset(tmp_path / "d")

    def test_bad_header(self, tmp_path):
        save_dataset(dataset(5, n=1), tmp_path / "d")
        (tmp_path / "d" / "points.csv").write_text("id,y,x\n0,1,1\n")
        with pytest.raises(ValueError, match="header"):
            load_dataset(tmp_path / "d")

    def test_binary_header(self, tmp_path):
        save_dataset(dataset(7, n=2), tmp_path / "d")
        blob = (tmp_path / "d" / "values.bin").read_bytes()
        assert blob[:5] == b"PSTD1" and struct.unpack_from("<QQ", blob, 5) == (7, 2)


class TestZScore:
    def test_round_trip(self, rng):
        x = rng.standard_normal((10, 3)) * 4 + 7
        z = ZScore.fit(x)
        np.testing.assert_allclose(z.transform(x).mean(), 0, atol=1e-12)
        np.testing.assert_allclose(z.inverse_transform(z.transform(x)), x, atol=1e-12)

    def test_constant_series(self):
        assert ZScore.fit(np.ones(5)).std == 1.0


class TestSynth:
    def test_deterministic(self):
        a, b = synth_generate(3, 10, 3), synth_generate(3, 10, 3)
        assert a.values.tobytes() == b.values.tobytes() and np.array_equal(a.lat, b.lat)
        assert not np.array_equal(a.values, synth_generate(4, 10, 3).values)

    def test_shape_and_units(self):
        ds = synth_generate(0, 6, 2, slice_minutes=60)
        assert ds.values.shape == (48, 6) and ds.slice_minutes == 60

    def test_pure_sinusoid(self):
        ds = synth_generate(1, 5, 2, slice_minutes=60, diffusion=0.0, noise=0.0)
        t = np.arange(48)
        for n in range(5):
            x = ds.values[:, n] - 20.0
            np.testing.assert_allclose(x[:24], x[24:], atol=1e-12)
            assert abs(x[:24].mean()) < 1e-9
            s, c = x @ np.sin(2 * np.pi * t / 24) / 24, x @ np.cos(2 * np.pi * t / 24) / 24
            amp, phase = np.hypot(s, c), np.arctan2(c, s)
            assert 5.0 <= amp <= 15.0
            np.testing.assert_allclose(x, amp * np.sin(2 * np.pi * t / 24 + phase), atol=1e-9)

    def test_neighbour_lag_correlation(self):
        from scipy.spatial import cKDTree

        ds = synth_generate(0, 64, 30, slice_minutes=60, diffusion=0.5)
        unit = np.column_stack([(ds.lat - 32.6) / 0.6, (ds.lng + 117.3) / 0.6])
        _, nbrs = cKDTree(unit).query(unit, k=2)
        resid = ds.values - ds.values.reshape(30, 24, 64).mean(axis=0).repeat(1, 0).reshape(1, 24, 64).repeat(30, 0).reshape(-1, 64)

        def lag_corr(i, j):
            return np.corrcoef(resid[1:, i], resid[:-1, j])[0, 1]

        near = np.mean([lag_corr(i, nbrs[i, 1]) for i in range(64)])
        rng = np.random.default_rng(0)
        pairs = [(i, j) for i, j in rng.integers(0, 64, (400, 2)) if i != j]
        far = np.mean([lag_corr(i, j) for i, j in pairs])
        assert near > far + 0.05

    def test_persistence_keeps_unit_variance(self):
        ds = synth_generate(0, 32, 60, slice_minutes=60, diffusion=0.0, noise_persistence=0.9)
        calm = synth_generate(0, 32, 60, slice_minutes=60, diffusion=0.0, noise=0.0, noise_persistence=0.9)
        assert abs((ds.values - calm.values).std() - 1.0) < 0.15

    def test_arguments(self):
        with pytest.raises(ValueError):
            synth_generate(0, 1, 3)
        with pytest.raises(ValueError):
            synth_generate(0, 4, 3, noise_persistence=1.0)
