import numpy as np
import pytest

from stmambasync.data import (IdentityScaler, ParseError, SplitSpec, TrafficDataset, fit_scaler,
                              generate_synthetic, load_csv, make_windows, read_meta, save_csv,
                              standardize)
from stmambasync.embedding import calendar_indices


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_small_file(tmp_path):
    ds = load_csv(write(tmp_path, "a,b\n1,2\n3,4\n5,6\n"))
    assert ds.values.shape == (3, 2, 1)
    assert ds.sensor_ids == ["a", "b"]
    np.testing.assert_array_equal(ds.values[:, 1, 0], [2, 4, 6])


def test_load_forward_fills_and_back_fills(tmp_path):
    ds = load_csv(write(tmp_path, "a,b\n1,\n3,4\n5,\n,8\n"))
    np.testing.assert_array_equal(ds.values[:, 0, 0], [1, 3, 5, 5])
    np.testing.assert_array_equal(ds.values[:, 1, 0], [4, 4, 4, 8])
    assert not np.isnan(ds.values).any()


@pytest.mark.parametrize("text, where", [
    ("a,b\n1,2\n3\n", ":3:"),
    ("a,b\n1,2\n3,x\n", ":3:"),
    ("a,b,c\n1,2\n", ":2:"),
])
def test_load_parse_errors_carry_line_number(tmp_path, text, where):
    with pytest.raises(ParseError, match=where):
        load_csv(write(tmp_path, text))


def test_load_rejects_sensor_without_readings(tmp_path):
    with pytest.raises(ParseError, match="'b'"):
        load_csv(write(tmp_path, "a,b\n1,\n2,\n"))


def test_save_load_round_trip_is_exact(tmp_path):
    ds = generate_synthetic(3, 1, seed=4)
    ds.start_weekday = 3
    path, meta = save_csv(ds, tmp_path / "x.csv")
    assert read_meta(path) == {"name": "synthetic", "steps_per_day": "288", "start_weekday": "3"}
    back = load_csv(path)
    np.testing.assert_array_equal(back.values, ds.values)
    assert (back.steps_per_day, back.start_weekday, back.name) == (288, 3, "synthetic")
    save_csv(back, tmp_path / "y.csv")
    assert (tmp_path / "y.csv").read_bytes() == path.read_bytes()


def test_synthetic_shape_and_determinism():
    a = generate_synthetic(4, 14, seed=1)
    assert a.values.shape == (4032, 4, 1)
    np.testing.assert_array_equal(a.values, generate_synthetic(4, 14, seed=1).values)
    assert not np.array_equal(a.values, generate_synthetic(4, 14, seed=2).values)
    assert a.values.min() >= 0


def test_synthetic_noiseless_is_periodic_within_weekday_class():
    v = generate_synthetic(3, 14, seed=0, noise=0.0).values
    day = lambda k: v[288 * k:288 * (k + 1)]  # noqa: E731
    np.testing.assert_array_equal(day(0), day(1))  # two weekdays
    np.testing.assert_array_equal(day(5), day(6))  # weekend
    np.testing.assert_array_equal(day(0), day(7))  # one week apart
    assert not np.array_equal(day(4), day(5))


def test_split_bounds_chronological():
    assert SplitSpec().bounds(100) == [(0, 60), (60, 80), (80, 100)]
    assert SplitSpec.parse("7:1:2").bounds(10) == [(0, 7), (7, 8), (8, 10)]
    with pytest.raises(ValueError):
        SplitSpec.parse("6:2")
    with pytest.raises(ValueError):
        SplitSpec(0, 0, 0)


def ramp(n_frames, N=2):
    vals = np.arange(n_frames * N, dtype=float).reshape(n_frames, N, 1)
    return TrafficDataset(vals, steps_per_day=288, sensor_ids=[f"s{i}" for i in range(N)])


def test_window_count_and_alignment():
    tr, va, te = make_windows(ramp(30), 12, 12, SplitSpec(1, 0, 0))
    assert len(tr) == 7 and len(va) == 0 and len(te) == 0
    np.testing.assert_array_equal(tr.y[0], ramp(30).values[12:24])
    np.testing.assert_array_equal(tr.x[3], ramp(30).values[3:15])


def test_windows_never_straddle_splits():
    ds = ramp(200)
    split = SplitSpec()
    (a, b), (c, d), (e, f) = split.bounds(200)
    for ws, (lo, hi) in zip(make_windows(ds, 12, 12, split), [(a, b), (c, d), (e, f)]):
        assert len(ws) == hi - lo - 23
        assert ws.t0.min() >= lo and ws.t0.max() + 24 <= hi


def test_short_segment_gives_empty_collection():
    _, va, _ = make_windows(ramp(60), 12, 12)
    assert len(va) == 0
    assert va.x.shape == (0, 12, 2, 1)


def test_window_calendar_matches_embedding_helper():
    ds = generate_synthetic(2, 3, seed=0, start_weekday=5)
    tr, _, te = make_windows(ds, 12, 12)
    for ws in (tr, te):
        for i in (0, len(ws) // 2, len(ws) - 1):
            wk, tod = calendar_indices(int(ws.t0[i]), 12, 288, 5)
            np.testing.assert_array_equal(ws.weekday_idx[i], wk)
            np.testing.assert_array_equal(ws.tod_idx[i], tod)


def test_standardize_statistics_and_round_trip():
    ds = generate_synthetic(3, 4, seed=0)
    tr, va, te = make_windows(ds, 12, 12)
    (str_, sva, ste), scaler = standardize(tr, [tr, va, te])
    flat = str_.x.reshape(-1, 3, 1)
    assert np.abs(flat.mean(axis=0)).max() < 1e-9
    assert np.abs(flat.std(axis=0) - 1).max() < 1e-9
    np.testing.assert_allclose(scaler.inverse(ste.x), te.x, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(ste.y, te.y)  # targets stay raw


def test_zero_std_names_sensor():
    vals = np.random.default_rng(0).standard_normal((60, 3, 1))
    vals[:, 1] = 4.0
    ds = TrafficDataset(vals, sensor_ids=["n0", "flat", "n2"])
    tr, _, _ = make_windows(ds, 4, 4)
    with pytest.raises(ValueError, match="'flat'"):
        fit_scaler(tr, ds.sensor_ids)


def test_identity_scaler():
    x = np.arange(4.0)
    assert IdentityScaler().inverse(IdentityScaler().transform(x)) is not None
    np.testing.assert_array_equal(IdentityScaler().transform(x), x)
