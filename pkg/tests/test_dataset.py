import math

import numpy as np
import pytest

from anyvar import dataset as ds
from anyvar.dataset import (
    JsonlFormatError,
    RecordMasks,
    SamplerConfig,
    TimeSeriesRecord,
    VariateSeries,
    build_masks,
    collate,
    compute_dataset_weights,
    flatten_and_patch,
    instance_normalize,
    make_eval_batch,
    make_training_batch,
    normalize_record,
    prepare_sample,
    read_jsonl,
    sample_masking_ratio,
    sample_num_variates,
    write_jsonl,
)


class TestJsonl:
    def test_round_trip_with_nulls(self, tmp_path, record_factory):
        rec = record_factory([[1.0, np.nan, 3.0], [4.0, 5.0, 6.0]], record_id="r1")
        path = tmp_path / "data.jsonl"
        write_jsonl([rec], path)
        (loaded,) = read_jsonl(path)
        assert loaded.id == "r1"
        assert len(loaded.variates) == 2
        np.testing.assert_array_equal(np.isnan(loaded.variates[0].values), [False, True, False])
        np.testing.assert_array_equal(loaded.variates[0].values[[0, 2]], [1.0, 3.0])

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert read_jsonl(path) == []

    def test_missing_id_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "ok", "variates": [{"name": "x", "values": [1]}]}\n'
                        '{"variates": [{"name": "x", "values": [1]}]}\n')
        with pytest.raises(JsonlFormatError, match="line 2"):
            read_jsonl(path)

    def test_malformed_json_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("not json\n")
        with pytest.raises(JsonlFormatError, match="line 1"):
            read_jsonl(path)

    def test_duplicate_variate_names_rejected(self, tmp_path):
        path = tmp_path / "dup.jsonl"
        path.write_text('{"id": "r", "variates": [{"name": "x", "values": [1]},'
                        ' {"name": "x", "values": [2]}]}\n')
        with pytest.raises(JsonlFormatError, match="duplicate"):
            read_jsonl(path)


class TestInstanceNormalize:
    def test_hand_computed_three_points(self):
        # population std of [1,2,3] is sqrt(2/3); epsilon only nudges the scale
        result = instance_normalize(np.array([1.0, 2.0, 3.0]), np.ones(3, bool),
                                    min_observations=1)
        normalized, mean, std = result
        assert mean == 2.0
        assert abs(std - math.sqrt(2.0 / 3.0)) < 1e-12
        np.testing.assert_allclose(normalized, [-1.22474, 0.0, 1.22474], atol=1e-4)

    def test_short_series_filtered(self):
        assert instance_normalize(np.array([1.0, 2.0, 3.0]), np.ones(3, bool)) is None

    def test_constant_series_filtered(self):
        assert instance_normalize(np.full(5, 5.0), np.ones(5, bool)) is None

    def test_normalize_denormalize_inverts(self, rng):
        values = rng.normal(3.0, 2.0, size=50)
        normalized, mean, std = instance_normalize(values, np.ones(50, bool))
        np.testing.assert_allclose(ds.denormalize(normalized, mean, std), values, atol=1e-6)

    def test_stats_ignore_unobserved(self, rng):
        values = rng.normal(size=30)
        observed = np.ones(30, bool)
        observed[20:] = False
        _, mean, std = instance_normalize(values, observed)
        perturbed = values.copy()
        perturbed[20:] += 100.0
        _, mean2, std2 = instance_normalize(perturbed, observed)
        assert mean == mean2 and std == std2  # bit-identical


class TestMaskingSampler:
    def test_mean_ratio_near_one_third(self, rng):
        cfg = SamplerConfig()
        n = 100
        ks = np.array([sample_masking_ratio(cfg, n, rng) for _ in range(100_000)])
        assert 0.32 <= ks.mean() / n <= 0.35
        assert ks.min() >= 0 and ks.max() <= n

    def test_zero_positions(self, rng):
        assert sample_masking_ratio(SamplerConfig(), 0, rng) == 0


class TestBuildMasks:
    def test_zero_horizons_leave_no_targets(self, record_factory):
        rec = record_factory([[1, 2, 3], [4, 5, 6]])
        masks = build_masks(rec, horizons=[0, 0])
        assert not any(m.any() for m in masks.forecast)

    def test_missing_never_forecast(self, record_factory):
        rec = record_factory([[1.0, np.nan, 3.0, 4.0]])
        masks = build_masks(rec, horizons=[1])
        np.testing.assert_array_equal(masks.missing[0], [False, True, False, False])
        np.testing.assert_array_equal(masks.forecast[0], [False, False, False, True])

    def test_missing_inside_horizon_excluded(self, record_factory):
        rec = record_factory([[1.0, 2.0, 3.0, np.nan]])
        masks = build_masks(rec, horizons=[2])
        np.testing.assert_array_equal(masks.forecast[0], [False, False, True, False])

    def test_nowcasting_second_variate_fully_observed(self, record_factory):
        rec = record_factory([[1, 2, 3, 4], [5, 6, 7, 8]])
        masks = build_masks(rec, horizons=[2, 0])
        assert masks.forecast[0].sum() == 2
        assert masks.forecast[1].sum() == 0

    def test_horizon_must_be_shorter_than_series(self, record_factory):
        rec = record_factory([[1, 2, 3]])
        with pytest.raises(ValueError):
            build_masks(rec, horizons=[3])

    def test_training_mode_masks_tail(self, record_factory, rng):
        rec = record_factory([np.arange(50.0)])
        masks = build_masks(rec, cfg=SamplerConfig(), rng=rng)
        fmask = masks.forecast[0]
        if fmask.any():
            first = np.argmax(fmask)
            assert fmask[first:].all()  # contiguous tail

    def test_training_mode_independent_per_variate(self, record_factory):
        rec = record_factory([np.arange(200.0), np.arange(200.0)])
        rng = np.random.default_rng(3)
        counts = {tuple(m.sum() for m in build_masks(rec, cfg=SamplerConfig(), rng=rng).forecast)
                  for _ in range(20)}
        assert any(a != b for a, b in counts)


class TestFlattenAndPatch:
    def test_two_token_shape(self, record_factory):
        rec = record_factory([np.arange(64.0)])
        masks = build_masks(rec, horizons=[0])
        sample = flatten_and_patch(rec, masks, patch_size=32)
        assert sample.tokens.shape == (2, 32)
        np.testing.assert_array_equal(sample.time_indices, [0, 1])
        assert not sample.pad_mask.any()

    def test_three_variates_padding_counts(self, record_factory):
        rec = record_factory([np.arange(40.0)] * 3)
        masks = build_masks(rec, horizons=[0, 0, 0])
        sample = flatten_and_patch(rec, masks, patch_size=32)
        assert sample.tokens.shape == (6, 32)
        for j in range(3):
            rows = sample.variate_ids == j
            assert sample.pad_mask[rows].sum() == 64 - 40
        np.testing.assert_array_equal(sample.time_indices, [0, 1, 0, 1, 0, 1])

    def test_right_padding_after_all_data(self, record_factory):
        rec = record_factory([np.arange(40.0)])
        masks = build_masks(rec, horizons=[0])
        sample = flatten_and_patch(rec, masks, patch_size=32)
        final = sample.pad_mask[1]
        data_positions = np.where(~final)[0]
        pad_positions = np.where(final)[0]
        assert data_positions.max() < pad_positions.min()
        # padding is also flagged unobserved for the embedding
        assert sample.missing_mask[1][pad_positions].all()

    def test_permuting_variates_permutes_blocks(self, record_factory):
        rec = record_factory([np.arange(8.0), np.arange(8.0) + 100])
        masks = build_masks(rec, horizons=[0, 0])
        sample = flatten_and_patch(rec, masks, patch_size=4)
        swapped = TimeSeriesRecord(id=rec.id, variates=[rec.variates[1], rec.variates[0]])
        masks_sw = RecordMasks(forecast=masks.forecast[::-1], missing=masks.missing[::-1])
        sample_sw = flatten_and_patch(swapped, masks_sw, patch_size=4)
        np.testing.assert_array_equal(sample_sw.tokens[:2], sample.tokens[2:])
        np.testing.assert_array_equal(sample_sw.tokens[2:], sample.tokens[:2])
        np.testing.assert_array_equal(sample_sw.variate_ids, sample.variate_ids)


class TestDatasetWeights:
    def test_floor_inactive(self):
        np.testing.assert_allclose(compute_dataset_weights([8000, 1500, 500]),
                                   [0.8, 0.15, 0.05], atol=1e-12)

    def test_floor_active_two_stage_rule(self):
        # oracle: raw -> floored -> renormalized, computed literally
        raw = np.array([99980, 10, 10], dtype=float)
        floored = np.maximum(raw / raw.sum(), 0.001)
        expected = floored / floored.sum()
        got = compute_dataset_weights([99980, 10, 10])
        np.testing.assert_allclose(got, expected, atol=1e-12)
        np.testing.assert_allclose(got, [0.99800359, 0.00099820, 0.00099820], atol=1e-7)
        assert abs(got.sum() - 1.0) < 1e-12

    def test_single_dataset(self):
        np.testing.assert_array_equal(compute_dataset_weights([123]), [1.0])

    def test_lower_bound_invariant(self, rng):
        for _ in range(50):
            sizes = rng.uniform(0.0, 1.0, size=rng.integers(1, 8)) ** 8 + 1e-12
            w = compute_dataset_weights(sizes)
            n = sizes.size
            assert abs(w.sum() - 1.0) < 1e-12
            assert (w >= 0.001 / (1 + n * 0.001) - 1e-15).all()

    def test_rejects_empty_and_zero(self):
        with pytest.raises(ValueError):
            compute_dataset_weights([])
        with pytest.raises(ValueError):
            compute_dataset_weights([0, 0])


class TestVariateCountSampler:
    def test_mean_and_support(self, rng):
        cfg = SamplerConfig()
        ks = np.array([sample_num_variates(cfg, rng) for _ in range(100_000)])
        assert ks.min() >= 1 and ks.max() <= 128
        # beta-binomial mean 128 * 2/7, barely shifted by the clamp at 1
        assert abs(ks.mean() - 36.6) < 0.5

    def test_reproducible(self):
        cfg = SamplerConfig()
        a = [sample_num_variates(cfg, np.random.default_rng(7)) for _ in range(10)]
        b = [sample_num_variates(cfg, np.random.default_rng(7)) for _ in range(10)]
        assert a == b


def _valid_record(rng, T=16, rid="r"):
    return TimeSeriesRecord(
        id=rid, variates=[VariateSeries(name="x", values=rng.normal(size=T))]
    )


class TestTrainingBatch:
    def test_weighted_sampling_frequency(self, rng):
        ds_a = [_valid_record(rng, rid=f"a{i}") for i in range(5)]
        ds_b = [_valid_record(rng, rid=f"b{i}") for i in range(5)]
        cfg = SamplerConfig()
        counts = {"a": 0, "b": 0}
        for _ in range(200):
            batch = make_training_batch([ds_a, ds_b], [0.999, 0.001], cfg, 100, rng,
                                        patch_size=4)
            for rid in batch.record_ids:
                counts[rid[0]] += 1
        freq = counts["a"] / (counts["a"] + counts["b"])
        assert abs(freq - 0.999) < 0.002

    def test_filtered_records_never_emitted(self, rng):
        good = [_valid_record(rng, rid=f"good{i}") for i in range(3)]
        flat = [TimeSeriesRecord(id="flat", variates=[VariateSeries("x", np.full(16, 3.0))])]
        batch = make_training_batch([good + flat], [1.0], SamplerConfig(), 64, rng, patch_size=4)
        assert all(rid.startswith("good") for rid in batch.record_ids)

    def test_token_budget(self, rng):
        long = [TimeSeriesRecord(id="L", variates=[VariateSeries("x", rng.normal(size=4000))])]
        batch = make_training_batch([long], [1.0], SamplerConfig(), 4, rng,
                                    max_tokens=8, patch_size=32)
        assert batch.tokens.shape[1] <= 8
        # recency: the kept window is the tail of the series
        assert batch.n_tokens == 8

    def test_empty_corpus_rejected(self, rng):
        with pytest.raises(ValueError):
            make_training_batch([], [1.0], SamplerConfig(), 4, rng)
        with pytest.raises(ValueError):
            make_training_batch([[]], [1.0], SamplerConfig(), 4, rng)

    def test_all_filtered_rejected(self, rng):
        flat = [TimeSeriesRecord(id="flat", variates=[VariateSeries("x", np.full(16, 3.0))])]
        with pytest.raises(ValueError, match="filtered"):
            make_training_batch([flat], [1.0], SamplerConfig(), 2, rng, patch_size=4)


class TestEvalBatch:
    def test_masks_exact_horizon(self, rng):
        records = [_valid_record(rng, T=24, rid=f"r{i}") for i in range(3)]
        batch, kept = make_eval_batch(records, context=16, horizon=8, patch_size=8)
        assert kept == ["r0", "r1", "r2"]
        assert batch.tokens.shape == (3, 3, 8)
        assert int(batch.eval_mask.sum()) == 3 * 8
        # targets are exactly the trailing horizon slots of each row
        assert batch.forecast_mask[:, -1].all()

    def test_too_short_record_rejected(self, rng):
        with pytest.raises(ValueError, match="shorter"):
            make_eval_batch([_valid_record(rng, T=10)], context=16, horizon=8)


class TestCollateAndStats:
    def test_norm_stats_mask_independent_through_pipeline(self, rng):
        values = rng.normal(size=32)
        rec = TimeSeriesRecord(id="r", variates=[VariateSeries("x", values)])
        masks = build_masks(rec, horizons=[8])
        sample = prepare_sample(rec, masks, patch_size=8)

        tampered = values.copy()
        tampered[-8:] = 999.0  # only forecast-masked positions change
        rec2 = TimeSeriesRecord(id="r", variates=[VariateSeries("x", tampered)])
        sample2 = prepare_sample(rec2, build_masks(rec2, horizons=[8]), patch_size=8)
        np.testing.assert_array_equal(sample.norm_mean, sample2.norm_mean)
        np.testing.assert_array_equal(sample.norm_std, sample2.norm_std)

    def test_collate_pads_shorter_samples(self, rng):
        r1 = _valid_record(rng, T=16, rid="short")
        r2 = _valid_record(rng, T=32, rid="long")
        samples = []
        for rec in (r1, r2):
            masks = build_masks(rec, horizons=[4])
            samples.append(prepare_sample(rec, masks, patch_size=8))
        batch = collate(samples, patch_size=8)
        assert batch.tokens.shape == (2, 4, 8)
        assert batch.token_pad_mask[0].sum() == 2  # two alignment tokens on the short row
        assert batch.variate_ids[0, 2:].tolist() == [-1, -1]

    def test_eval_mask_excludes_missing_and_pad(self, record_factory):
        values = np.arange(10.0)
        values[8] = np.nan  # missing inside the horizon
        rec = record_factory([values])
        masks = build_masks(rec, horizons=[4])
        sample = prepare_sample(rec, masks, patch_size=4)
        batch = collate([sample], patch_size=4)
        # horizon covers positions 6..9, position 8 is missing, 10..11 is padding
        assert int(batch.eval_mask.sum()) == 3
        assert not (batch.forecast_mask & batch.missing_mask).any()
