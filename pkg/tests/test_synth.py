import numpy as np

from cstn.data import DEFAULT_WEATHER_VOCAB, GridSpec
from cstn.synth import SynthParams, synth_generate

GRID = GridSpec(0.0, 1.0, 0.0, 1.0, 2, 2)


def test_same_seed_same_data():
    a, b = synth_generate(3, GRID, 200), synth_generate(3, GRID, 200)
    assert a.counts.tobytes() == b.counts.tobytes()
    assert a.meteo_numeric.tobytes() == b.meteo_numeric.tobytes() and a.meteo_labels == b.meteo_labels
    assert not np.array_equal(a.counts, synth_generate(4, GRID, 200).counts)


def test_flat_noiseless_is_constant():
    p = SynthParams(rate_spread=0.0, daily_amplitude=0.0, day_sigma=0.0, weekend_factor=1.0,
                    weather_effect=0.0, noise=False, base_rate=6.0)
    ds = synth_generate(0, GRID, 120, p)
    assert np.all(ds.counts == 6.0)


def test_mean_count_matches_base_rate():
    p = SynthParams(rate_spread=0.0, day_sigma=0.0, weekend_factor=1.0, weather_effect=0.0, base_rate=8.0)
    ds = synth_generate(1, GRID, 48 * 30, p)  # whole days, so the daily cycle averages out
    per_pair = ds.counts.mean(axis=0)
    assert np.all(np.abs(per_pair / 8.0 - 1) < 0.05)


def test_shock_is_mean_one():
    p = SynthParams(rate_spread=0.0, day_sigma=0.0, weekend_factor=1.0, weather_effect=0.0,
                    base_rate=8.0, noise=False, shock_sigma=0.3, shock_persistence=0.5)
    ds = synth_generate(2, GRID, 48 * 40, p)
    assert abs(ds.counts.mean() / 8.0 - 1) < 0.05
    assert ds.counts.std() > 0


def test_weather_reduces_demand_and_is_visible_in_meteo():
    p = SynthParams(rate_spread=0.0, day_sigma=0.0, weekend_factor=1.0, noise=False, weather_lag=0)
    ds = synth_generate(5, GRID, 48 * 20, p)
    total = ds.counts.sum(axis=(1, 2, 3))
    wet = ds.meteo_numeric[:, 5] > 0  # precipitation
    assert wet.any() and (~wet).any()
    assert total[wet].mean() < 0.9 * total[~wet].mean()
    assert set(ds.meteo_labels) <= set(DEFAULT_WEATHER_VOCAB)


def test_lagged_weather_leads_demand():
    p = SynthParams(rate_spread=0.0, day_sigma=0.0, weekend_factor=1.0, daily_amplitude=0.0,
                    noise=False, weather_lag=2)
    ds = synth_generate(6, GRID, 48 * 10, p)
    total = ds.counts.sum(axis=(1, 2, 3))
    precip = ds.meteo_numeric[:, 5]
    lead = np.corrcoef(precip[:-2], total[2:])[0, 1]
    same = np.corrcoef(precip, total)[0, 1]
    assert lead < -0.5 and lead < same


def test_meteo_inside_observed_ranges_and_split_default():
    ds = synth_generate(0, GRID, 100)
    assert ds.split == 80
    lo, hi = ds.norm.meteo_min, ds.norm.meteo_max
    assert np.all(lo <= hi)
    assert np.all(ds.counts >= 0) and ds.counts.dtype.kind in "if"
