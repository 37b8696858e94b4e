import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from gapflow.data import (
    MaskPool,
    MaskSequence,
    OpticalSequence,
    SarSequence,
    SynthConfig,
    WindowSpec,
    build_mask_pool,
    compose_observed,
    denormalize_optical,
    generate_dataset,
    load_dataset,
    mask_query_frame,
    merge_windows,
    normalize_optical,
    normalize_sar,
    sample_mask,
    save_dataset,
    sliding_windows,
)


# -- normalization -------------------------------------------------------------


def test_normalize_optical_affine_endpoints():
    raw = np.array([0.0, 8000.0, 4000.0, 9000.0, 2000.0]).reshape(1, 1, 1, 5)
    seq = normalize_optical(raw, [0])
    np.testing.assert_allclose(seq.values.ravel(), [-1.0, 1.0, 0.0, 1.0, -0.5], atol=1e-12)


def test_normalize_optical_counts_negatives():
    counters = {}
    normalize_optical(np.full((1, 1, 2, 2), -5.0), [0], counters)
    assert counters["negative_optical_input"] == 4


def test_normalize_round_trip_is_clip():
    rng = np.random.default_rng(0)
    raw = rng.uniform(-100, 9000, size=(2, 1, 3, 3))
    seq = normalize_optical(raw, [0, 10])
    np.testing.assert_allclose(
        denormalize_optical(seq.values), np.clip(raw, 0, 8000), atol=1e-6
    )


def test_normalize_sar_formula():
    raw = np.zeros((1, 1, 1, 3))
    mean, std = np.array([10.0]), np.array([2.0])
    raw[0, 0, 0] = [10.0, 18.0, 12.0]  # mean, mean+4std, mean+1std
    seq = normalize_sar(raw, mean, std, [0])
    np.testing.assert_allclose(seq.values.ravel(), [0.0, 1.0, 0.5], atol=1e-12)


def test_normalize_sar_rejects_zero_std():
    with pytest.raises(ValueError):
        normalize_sar(np.zeros((1, 1, 2, 2)), [0.0], [0.0], [0])


# -- sequence types ----------------------------------------------------------------


def test_dates_must_strictly_increase():
    with pytest.raises(ValueError):
        OpticalSequence(np.zeros((2, 1, 2, 2)), [5, 5])
    with pytest.raises(ValueError):
        SarSequence(np.zeros((2, 1, 2, 2)), [9, 3])


def test_mask_sequence_must_be_binary():
    with pytest.raises(ValueError):
        MaskSequence(np.full((1, 1, 2, 2), 0.5))


# -- composition --------------------------------------------------------------------


def test_compose_observed_no_missingness_is_bitwise():
    rng = np.random.default_rng(1)
    y = rng.normal(size=(2, 3, 4, 4))
    x = compose_observed(y, np.zeros((2, 1, 4, 4)))
    np.testing.assert_array_equal(x, y)


def test_compose_observed_all_missing_is_fill():
    y = np.random.default_rng(2).normal(size=(2, 3, 4, 4))
    x = compose_observed(y, np.ones((2, 1, 4, 4)), v_fill=1.0)
    np.testing.assert_array_equal(x, np.ones_like(y))


def test_compose_observed_checkerboard_matches_formula():
    y = np.arange(8.0).reshape(1, 2, 2, 2)
    m = np.zeros((1, 1, 2, 2))
    m[0, 0] = [[1, 0], [0, 1]]
    x = compose_observed(y, m, v_fill=1.0)
    np.testing.assert_array_equal(x, (1 - m) * y + m * 1.0)


def test_compose_observed_rejects_non_binary():
    with pytest.raises(ValueError):
        compose_observed(np.zeros((1, 1, 2, 2)), np.full((1, 1, 2, 2), 0.3))


def test_compose_then_remask_idempotent():
    rng = np.random.default_rng(3)
    y = rng.normal(size=(3, 2, 4, 4))
    m = (rng.random((3, 1, 4, 4)) < 0.4).astype(float)
    once = compose_observed(y, m)
    twice = compose_observed(once, m)
    np.testing.assert_array_equal(once, twice)


# -- query-frame masking ----------------------------------------------------------------


def test_mask_query_frame_counts():
    y = np.zeros((4, 2, 3, 3))
    m = np.zeros((4, 1, 3, 3))
    x, m2 = mask_query_frame(y, m, 0)
    assert m2.sum() == 9  # exactly H*W new masked pixels in the query frame
    np.testing.assert_array_equal(x[0], 1.0)
    np.testing.assert_array_equal(x[1:], y[1:])


def test_mask_query_frame_idempotent_on_masked_frame():
    y = np.zeros((2, 1, 2, 2))
    m = np.zeros((2, 1, 2, 2))
    x1, m1 = mask_query_frame(y, m, 1)
    x2, m2 = mask_query_frame(x1, m1, 1)
    np.testing.assert_array_equal(x1, x2)
    np.testing.assert_array_equal(m1, m2)


def test_mask_query_frame_closure_over_all_frames():
    x = np.random.default_rng(4).normal(size=(3, 1, 2, 2))
    m = np.zeros((3, 1, 2, 2))
    for q in range(3):
        x, m = mask_query_frame(x, m, q)
    np.testing.assert_array_equal(m, np.ones_like(m))


def test_mask_query_frame_rejects_out_of_range():
    with pytest.raises(IndexError):
        mask_query_frame(np.zeros((2, 1, 2, 2)), np.zeros((2, 1, 2, 2)), 2)


# -- mask pool ----------------------------------------------------------------------------


def test_mask_pool_singleton_sampling():
    pattern = np.zeros((1, 1, 4, 4))
    pattern[0, 0, :2] = 1
    pool = MaskPool(pattern)
    out = sample_mask(pool, np.random.default_rng(0))
    np.testing.assert_array_equal(out, pattern[0])


def test_sample_mask_deterministic_under_seed():
    pool = build_mask_pool(8, 8, 8, np.random.default_rng(5))
    draws_a = [sample_mask(pool, np.random.default_rng(42)) for _ in range(5)]
    draws_b = [sample_mask(pool, np.random.default_rng(42)) for _ in range(5)]
    for a, b in zip(draws_a, draws_b):
        np.testing.assert_array_equal(a, b)


def test_sample_mask_uniform_frequencies():
    patterns = np.zeros((4, 1, 2, 2))
    for k in range(4):
        patterns[k, 0, k // 2, k % 2] = 1
    pool = MaskPool(patterns)
    rng = np.random.default_rng(6)
    counts = np.zeros(4)
    for _ in range(10000):
        drawn = sample_mask(pool, rng)
        counts[int(np.flatnonzero(drawn)[0])] += 1
    freq = counts / 10000
    sigma = np.sqrt(0.25 * 0.75 / 10000)
    assert np.all(np.abs(freq - 0.25) < 3 * sigma + 1e-9)


def test_mask_pool_patterns_non_empty_and_not_all_ones():
    pool = build_mask_pool(32, 16, 16, np.random.default_rng(7))
    sums = pool.patterns.sum(axis=(1, 2, 3))
    assert np.all(sums > 0)
    assert np.all(sums < 16 * 16)


def test_empty_pool_rejected():
    with pytest.raises(ValueError):
        MaskPool(np.zeros((0, 1, 2, 2)))


# -- synthetic generator -------------------------------------------------------------------


def test_synth_deterministic_under_seed():
    cfg = SynthConfig(n_sequences=3, seed=11)
    rec_a, pool_a = generate_dataset(cfg)
    rec_b, pool_b = generate_dataset(cfg)
    np.testing.assert_array_equal(pool_a.patterns, pool_b.patterns)
    for a, b in zip(rec_a, rec_b):
        np.testing.assert_array_equal(a.optical.values, b.optical.values)
        np.testing.assert_array_equal(a.sar.values, b.sar.values)
        np.testing.assert_array_equal(a.optical.dates, b.optical.dates)


def test_synth_frames_match_oracle_closed_form():
    records, _ = generate_dataset(SynthConfig(n_sequences=2, seed=12))
    for rec in records:
        for t, d in enumerate(rec.optical.dates):
            np.testing.assert_array_equal(rec.optical.values[t], rec.oracle.clean_frame(d))


def test_synth_oracle_manual_formula_one_pixel():
    records, _ = generate_dataset(SynthConfig(n_sequences=1, seed=13))
    oracle = records[0].oracle
    day, u, v, band = 123, 3, 7, 1
    region = oracle.region_map[u, v]
    latent = oracle.amplitudes[region] * np.sin(
        2 * np.pi * (day - oracle.phases[region]) / oracle.period
    )
    expected = oracle.band_base[band] + oracle.band_gain[band] * latent + oracle.texture[band, u, v]
    assert oracle.clean_frame(day)[band, u, v] == pytest.approx(expected, abs=1e-12)


def test_synth_values_in_normalized_range():
    records, _ = generate_dataset(SynthConfig(n_sequences=4, seed=14))
    for rec in records:
        assert rec.optical.values.min() >= -1.0 and rec.optical.values.max() <= 1.0
        assert rec.sar.values.min() >= -1.0 and rec.sar.values.max() <= 1.0


def test_synth_asynchronous_dates():
    records, _ = generate_dataset(SynthConfig(n_sequences=6, seed=15))
    assert any(
        not np.array_equal(rec.optical.dates, rec.sar.dates) for rec in records
    )
    for rec in records:
        assert np.all(np.diff(rec.optical.dates) > 0)
        assert np.all(np.diff(rec.sar.dates) > 0)


def test_synth_rejects_too_many_frames():
    with pytest.raises(ValueError):
        SynthConfig(frames_min=10, frames_max=40, span_days=20)


# -- sliding windows --------------------------------------------------------------------------


def test_single_window_when_lengths_match():
    assert sliding_windows(15, WindowSpec(15, 1)) == [(0, 15)]


def test_two_windows_cover_overlap_twice():
    wins = sliding_windows(16, WindowSpec(15, 1))
    assert wins == [(0, 15), (1, 16)]
    coverage = np.zeros(16)
    for s, e in wins:
        coverage[s:e] += 1
    np.testing.assert_array_equal(coverage[1:15], 2)


def test_windows_reject_short_sequences():
    with pytest.raises(ValueError):
        sliding_windows(10, WindowSpec(15, 1))


def test_window_spec_validates_stride():
    with pytest.raises(ValueError):
        WindowSpec(15, 0)
    with pytest.raises(ValueError):
        WindowSpec(15, 16)


def test_merge_identical_windows_is_identity():
    rng = np.random.default_rng(16)
    out = rng.normal(size=(15, 2, 2, 2))
    merged = merge_windows([out, out.copy()], [0, 0], 15)
    np.testing.assert_allclose(merged, out, atol=1e-15)


def test_merge_windows_averages_overlap():
    a = np.zeros((3, 1))
    b = np.ones((3, 1))
    merged = merge_windows([a, b], [0, 1], 4)
    np.testing.assert_allclose(merged.ravel(), [0, 0.5, 0.5, 1.0])


# -- dataset on disk -----------------------------------------------------------------------------


def _dir_digest(path):
    digest = hashlib.sha256()
    for p in sorted(Path(path).rglob("*")):
        if p.is_file():
            digest.update(p.name.encode())
            digest.update(p.read_bytes())
    return digest.hexdigest()


def test_dataset_round_trip(tmp_path):
    cfg = SynthConfig(n_sequences=3, seed=17)
    records, pool = generate_dataset(cfg)
    save_dataset(tmp_path / "ds", records, pool, cfg)
    loaded, loaded_pool, loaded_cfg = load_dataset(tmp_path / "ds")
    assert loaded_cfg == cfg
    np.testing.assert_array_equal(loaded_pool.patterns, pool.patterns)
    for a, b in zip(records, loaded):
        np.testing.assert_array_equal(a.optical.values, b.optical.values)
        np.testing.assert_array_equal(a.sar.values, b.sar.values)
        np.testing.assert_array_equal(a.mask.values, b.mask.values)
        np.testing.assert_array_equal(a.oracle.region_map, b.oracle.region_map)
        np.testing.assert_array_equal(a.oracle.texture, b.oracle.texture)
        for d in [0, 57, 333]:
            np.testing.assert_array_equal(a.oracle.clean_frame(d), b.oracle.clean_frame(d))


def test_dataset_files_present(tmp_path):
    cfg = SynthConfig(n_sequences=1, seed=18)
    records, pool = generate_dataset(cfg)
    save_dataset(tmp_path / "ds", records, pool, cfg)
    seq_dir = tmp_path / "ds" / "seq_0000"
    for name in ["optical.bin", "sar.bin", "masks.bin", "dates.json", "meta.json"]:
        assert (seq_dir / name).exists()
    with open(seq_dir / "dates.json") as f:
        dates = json.load(f)
    assert set(dates) == {"optical", "sar"}


def test_dataset_write_deterministic(tmp_path):
    cfg = SynthConfig(n_sequences=3, seed=19)
    for sub in ["a", "b"]:
        records, pool = generate_dataset(cfg)
        save_dataset(tmp_path / sub, records, pool, cfg)
    assert _dir_digest(tmp_path / "a") == _dir_digest(tmp_path / "b")
