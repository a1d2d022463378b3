import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urbanmind.errors import DatasetFormatError, DegenerateScaleError, InvalidArgument
from urbanmind.grid_data import (
    CityGrid,
    ClipRule,
    NormalizationScaler,
    Region,
    UrbanDynamicsTensor,
    clip_outliers,
    generate_synthetic,
    load_city,
    load_dataset,
    make_splits,
    minmax_normalize,
    partition_city,
    preprocess_city,
    save_city,
    save_dataset,
    split_region_array,
)

REGION = Region((1, 1), 10)


def raw_tensor(values, names=("speed",), side=None):
    values = np.asarray(values, dtype=np.float32)
    side = side or values.shape[-1]
    return UrbanDynamicsTensor(values, names, Region((1, 1), side), False)


# ---------------------------------------------------------------- partitioning


@pytest.mark.parametrize(
    "h,w,side,stride,count",
    [(40, 50, 10, 5, 63), (20, 20, 10, 10, 4), (10, 10, 10, 1, 1)],
)
def test_partition_counts(h, w, side, stride, count):
    regions = partition_city(CityGrid("c", h, w), side, stride)
    assert len(regions) == count
    assert all(r.fits(CityGrid("c", h, w)) for r in regions)


def test_partition_row_major():
    regions = partition_city(CityGrid("c", 20, 20), 10, 10)
    assert [r.top_left for r in regions] == [(1, 1), (1, 11), (11, 1), (11, 11)]


@given(
    h=st.integers(1, 30), w=st.integers(1, 30), side=st.integers(1, 12), stride=st.integers(1, 7)
)
def test_partition_count_formula(h, w, side, stride):
    grid = CityGrid("g", h, w)
    if side > min(h, w):
        with pytest.raises(InvalidArgument):
            partition_city(grid, side, stride)
        return
    expected = ((h - side) // stride + 1) * ((w - side) // stride + 1)
    assert len(partition_city(grid, side, stride)) == expected


def test_partition_rejects_oversized_side():
    with pytest.raises(InvalidArgument):
        partition_city(CityGrid("c", 8, 20), 10, 1)


# ---------------------------------------------------------------- clipping / normalization


def test_speed_cap():
    vals = np.full((1, 1, 1, 2, 2), 100.0)
    vals[0, 0, 0, 0, 0] = 155.0
    out = clip_outliers(raw_tensor(vals))
    assert out.values[0, 0, 0, 0, 0] == 140.0
    assert np.all(out.values <= vals)


def test_percentile_clip_matches_sort_and_index():
    vals = np.arange(100, dtype=np.float32).reshape(1, 1, 1, 10, 10)
    out = clip_outliers(raw_tensor(vals, names=("inflow",)))
    # linear-interpolated 90th percentile of 0..99 by hand: rank 0.9 * 99 = 89.1
    ordered = np.sort(vals.ravel())
    p90 = ordered[89] + 0.1 * (ordered[90] - ordered[89])
    above = vals.ravel() > p90
    assert np.allclose(out.values.ravel()[above], p90, atol=1e-4)
    assert np.array_equal(out.values.ravel()[~above], vals.ravel()[~above])


def test_percentile_clip_noop_below_bound():
    vals = np.full((1, 2, 1, 3, 3), 5.0, dtype=np.float32)
    out = clip_outliers(raw_tensor(vals, names=("inflow",)), {"inflow": ClipRule("cap", 10.0)})
    assert np.array_equal(out.values, vals)


def test_minmax_examples():
    vals = np.array([0.0, 35.0, 70.0, 140.0], dtype=np.float32).reshape(1, 1, 1, 2, 2)
    norm, scaler = minmax_normalize(raw_tensor(vals))
    assert norm.values.ravel().tolist() == [-1.0, -0.5, 0.0, 1.0]
    assert norm.normalized


def test_constant_channel_is_degenerate():
    with pytest.raises(DegenerateScaleError):
        minmax_normalize(raw_tensor(np.ones((1, 1, 1, 2, 2))))


@settings(max_examples=50)
@given(
    lo=st.floats(-1e3, 1e3), span=st.floats(1e-2, 1e3),
    seed=st.integers(0, 2**31 - 1),
)
def test_normalization_round_trip(lo, span, seed):
    scaler = NormalizationScaler((lo,), (lo + span,))
    x = np.random.default_rng(seed).uniform(lo, lo + span, size=(2, 3, 1, 2, 2))
    back = scaler.denormalize(scaler.normalize(x))
    assert np.max(np.abs(back - x)) < 1e-6 * max(1.0, abs(lo) + span)


def test_normalized_tensor_rejects_out_of_range():
    with pytest.raises(InvalidArgument):
        UrbanDynamicsTensor(np.full((1, 1, 1, 2, 2), 1.5, dtype=np.float32), ("speed",), Region((1, 1), 2), True)


def test_tensor_rejects_non_finite():
    vals = np.zeros((1, 1, 1, 2, 2), dtype=np.float32)
    vals[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(InvalidArgument):
        raw_tensor(vals)


def test_preprocess_city_range():
    regions = partition_city(CityGrid("c", 20, 20), 10, 10)
    raw = [generate_synthetic(r, 4, 12, 3, seed=k) for k, r in enumerate(regions)]
    normed, scaler = preprocess_city(raw)
    assert all(t.values.min() >= -1 and t.values.max() <= 1 for t in normed)
    assert scaler.per_channel_max[0] <= 140.0


# ---------------------------------------------------------------- splits


def test_zero_shot_split_disjoint():
    regions = partition_city(CityGrid("c", 20, 20), 10, 10)
    split = make_splits(regions, "zero_shot", 0.25, seed=3)
    assert len(split.train_regions) == 3 and len(split.test_regions) == 1
    assert not set(split.train_regions) & set(split.test_regions)
    assert make_splits(regions, "zero_shot", 0.25, seed=3) == split


def test_standard_split_is_temporal():
    regions = partition_city(CityGrid("c", 40, 50), 10, 5)
    split = make_splits(regions, "standard")
    assert set(split.test_regions) <= set(split.train_regions)
    train_days, test_days = split.day_split(30)
    assert len(train_days) == 24 and test_days[0] == 24


def test_zero_shot_needs_two_regions():
    with pytest.raises(InvalidArgument):
        make_splits([REGION], "zero_shot")


# ---------------------------------------------------------------- synthetic data


def test_synthetic_shape_and_determinism():
    a = generate_synthetic(REGION, 30, 12, 3, seed=7)
    b = generate_synthetic(REGION, 30, 12, 3, seed=7)
    c = generate_synthetic(REGION, 30, 12, 3, seed=8)
    assert a.shape == (30, 12, 3, 10, 10)
    assert np.array_equal(a.values, b.values)
    assert np.any(a.values != c.values)


def test_synthetic_noiseless_closed_form():
    t = generate_synthetic(REGION, 2, 12, 1, seed=0, noise=0.0)
    slots = np.arange(12)
    gi = 1 + np.arange(10)
    expected = (
        50 + 20 * np.sin(2 * np.pi * slots / 12)[:, None, None]
        + 0.5 * gi[None, :, None] - 0.3 * gi[None, None, :]
    )
    assert np.allclose(t.values[0, :, 0], expected, atol=1e-4)


def test_synthetic_lagged_correlation():
    lag = 1
    t = generate_synthetic(REGION, 30, 12, 2, seed=1, noise=0.05, coupling=1.0, lag=lag)
    series = t.values.reshape(-1, 2, 10, 10)
    x0 = series[:-lag, 0].ravel()
    x1 = series[lag:, 1].ravel()
    assert np.corrcoef(x0, x1)[0, 1] > 0.8


# ---------------------------------------------------------------- persistence


def test_dataset_round_trip(tmp_path):
    t = generate_synthetic(REGION, 3, 12, 3, seed=2)
    load = load_dataset(save_dataset(t, tmp_path / "ds"))
    assert np.array_equal(load.values, t.values)
    assert load.channel_names == t.channel_names and load.region == t.region


def test_dataset_short_payload(tmp_path):
    path = save_dataset(generate_synthetic(REGION, 30, 12, 3, seed=2), tmp_path / "ds")
    payload = np.fromfile(path / "values.f32", dtype="<f4")
    payload[:-1].tofile(path / "values.f32")
    with pytest.raises(DatasetFormatError):
        load_dataset(path)


def test_dataset_corrupt_header(tmp_path):
    path = save_dataset(generate_synthetic(REGION, 1, 12, 1, seed=2), tmp_path / "ds")
    (path / "meta").write_text("{not json")
    with pytest.raises(DatasetFormatError):
        load_dataset(path)


def test_city_export_layout(tmp_path):
    grid = CityGrid("shenzhen", 40, 50)
    regions = partition_city(grid, 10, 5)
    rng = np.random.default_rng(0)
    arrays = {"speed": rng.uniform(0, 100, (2, 12, 63, 10, 10)).astype(np.float32)}
    tensors = split_region_array(arrays, regions, "shenzhen")
    assert len(tensors) == 63
    assert np.array_equal(tensors[5].values[:, :, 0], arrays["speed"][:, :, 5])
    save_city(tensors, grid, tmp_path / "city")
    grid2, loaded = load_city(tmp_path / "city")
    assert grid2 == grid and len(loaded) == 63
    assert np.array_equal(loaded[62].values, tensors[62].values)
