import json
import math

import numpy as np
import pytest

from pidkit import pipeline
from pidkit.errors import DomainError, FormatError
from pidkit.pipeline import (
    Manifest,
    ModalityStats,
    SampleRecord,
    SplitSpec,
    aggregate_marginal,
    compute_modality_stats,
    length_normalized_score,
    pool_tokens,
    read_records,
    split_dataset,
    threshold_regularize,
    write_records,
)
from pidkit.synthetic import ContinuousSpec, GateSpec, gate_records, gen_continuous


class TestLengthNormalizedScore:
    def test_one_token(self):
        assert length_normalized_score(-1.0, 1) == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_normalization_equalizes_lengths(self):
        assert length_normalized_score(-2.0, 2) == pytest.approx(
            length_normalized_score(-1.0, 1), abs=1e-12)

    def test_certain_candidate(self):
        assert length_normalized_score(0.0, 3) == 1.0

    def test_zero_tokens_rejected(self):
        with pytest.raises(DomainError):
            length_normalized_score(-1.0, 0)

    def test_positive_loglik_rejected(self):
        with pytest.raises(DomainError):
            length_normalized_score(0.5, 1)


class TestThresholdRegularize:
    def test_renormalized_branch(self):
        pred = threshold_regularize(np.array([0.3, 0.2]), tau=0.3)
        assert not pred.fallback_used
        assert pred.vector == pytest.approx([0.6, 0.4], abs=1e-12)

    def test_fallback_branch(self):
        pred = threshold_regularize(np.array([0.05, 0.05]), tau=0.3)
        assert pred.fallback_used
        assert pred.vector == pytest.approx([0.5, 0.5], abs=1e-15)

    def test_boundary_sum_equals_tau_renormalizes(self):
        pred = threshold_regularize(np.array([0.2, 0.1]), tau=0.3)
        assert not pred.fallback_used

    def test_all_zero_scores_with_zero_tau_fall_back(self):
        pred = threshold_regularize(np.array([0.0, 0.0, 0.0]), tau=0.0)
        assert pred.fallback_used
        assert pred.vector == pytest.approx([1 / 3] * 3, abs=1e-15)

    def test_fallback_frequency_monotone_in_tau(self, rng):
        scores = rng.uniform(0.0, 0.4, size=(200, 3))
        rates = []
        for tau in (0.1, 0.3, 0.5, 0.8):
            rates.append(np.mean([threshold_regularize(s, tau).fallback_used
                                  for s in scores]))
        assert all(a <= b for a, b in zip(rates, rates[1:]))

    def test_single_candidate_rejected(self):
        with pytest.raises(DomainError):
            threshold_regularize(np.array([0.5]), tau=0.3)


class TestAggregateMarginal:
    def test_copies_return_same_distribution(self):
        pred = threshold_regularize(np.array([0.4, 0.1]), tau=0.3)
        agg = aggregate_marginal([pred] * 7)
        assert agg.probs == pytest.approx([0.8, 0.2], abs=1e-12)

    def test_opposite_one_hots_average_to_uniform(self):
        a = threshold_regularize(np.array([1.0, 0.0]), tau=0.3)
        b = threshold_regularize(np.array([0.0, 1.0]), tau=0.3)
        assert aggregate_marginal([a, b]).probs == pytest.approx([0.5, 0.5], abs=1e-15)

    def test_order_invariance(self, rng):
        preds = [threshold_regularize(rng.uniform(0.0, 1.0, 4), 0.3) for _ in range(101)]
        base = aggregate_marginal(preds).probs
        rng.shuffle(preds)
        assert aggregate_marginal(preds).probs == pytest.approx(base, abs=1e-12)

    def test_concatenation_weighting(self, rng):
        a = [threshold_regularize(rng.uniform(0, 1, 3), 0.3) for _ in range(13)]
        b = [threshold_regularize(rng.uniform(0, 1, 3), 0.3) for _ in range(29)]
        merged = aggregate_marginal(a + b).probs
        weighted = (13 * aggregate_marginal(a).probs + 29 * aggregate_marginal(b).probs) / 42
        assert merged == pytest.approx(weighted, abs=1e-12)

    def test_mixed_k_rejected(self):
        a = threshold_regularize(np.array([0.5, 0.5]), 0.3)
        b = threshold_regularize(np.array([0.3, 0.3, 0.3]), 0.3)
        with pytest.raises(DomainError):
            aggregate_marginal([a, b])


class TestPoolTokens:
    def test_single_token_identity_for_all_modes(self):
        token = np.array([1.5, -2.0])
        for mode in ("mean", "last", "max"):
            assert pool_tokens([token], mode) == pytest.approx(token)

    def test_mean(self):
        assert pool_tokens([np.array([0.0]), np.array([2.0])], "mean") == pytest.approx([1.0])

    def test_max(self):
        assert pool_tokens([np.array([0.0]), np.array([2.0])], "max") == pytest.approx([2.0])

    def test_last(self):
        assert pool_tokens([np.array([0.0]), np.array([2.0])], "last") == pytest.approx([2.0])

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            pool_tokens([], "mean")

    def test_unknown_mode_rejected(self):
        with pytest.raises(DomainError):
            pool_tokens([np.array([1.0])], "median")


class TestModalityStats:
    def test_two_point_sample(self):
        records = gate_records(GateSpec("UNQ1", n_samples=4, seed=0))
        records[0].x1 = np.array([0.0])
        records[1].x1 = np.array([2.0])
        stats = compute_modality_stats(records[:2], "vision")
        assert stats.mu == pytest.approx([1.0], abs=1e-12)
        assert stats.sigma == pytest.approx([math.sqrt(2.0)], abs=1e-12)

    def test_constant_dimension_is_floored_and_flagged(self):
        records = gate_records(GateSpec("UNQ1", n_samples=6, seed=0))
        for rec in records:
            rec.x2 = np.array([3.14])
        stats = compute_modality_stats(records, "text")
        assert stats.sigma[0] == pytest.approx(1e-8)
        assert stats.floored_dims == (0,)

    def test_order_invariance(self, rng):
        records = gen_continuous(ContinuousSpec("independent", dim=3, n_samples=40, seed=2))
        base = compute_modality_stats(records, "vision")
        shuffled = list(records)
        rng.shuffle(shuffled)
        again = compute_modality_stats(shuffled, "vision")
        assert again.mu == pytest.approx(base.mu, abs=1e-12)
        assert again.sigma == pytest.approx(base.sigma, abs=1e-12)

    def test_requires_two_records(self):
        records = gate_records(GateSpec("UNQ1", n_samples=1, seed=0))
        with pytest.raises(DomainError):
            compute_modality_stats(records, "vision")

    def test_json_round_trip(self):
        stats = ModalityStats("vision", np.array([1.0, 2.0]), np.array([0.5, 1.5]), 10, (1,))
        again = ModalityStats.from_json(stats.to_json())
        assert np.array_equal(again.mu, stats.mu)
        assert np.array_equal(again.sigma, stats.sigma)
        assert again.floored_dims == (1,)


class TestSplitDataset:
    @pytest.mark.parametrize("n,train,test", [
        (4329, 3246, 1083),
        (3000, 2250, 750),
        (2150, 1612, 538),
        (2000, 1500, 500),
    ])
    def test_published_split_sizes(self, n, train, test):
        records = gate_records(GateSpec("XOR", n_samples=n, seed=0))
        tr, te = split_dataset(records, SplitSpec(seed=0))
        assert (len(tr), len(te)) == (train, test)

    def test_same_seed_identical_partition(self):
        records = gate_records(GateSpec("XOR", n_samples=100, seed=1))
        a = split_dataset(records, SplitSpec(seed=42))
        b = split_dataset(records, SplitSpec(seed=42))
        assert [r.id for r in a[0]] == [r.id for r in b[0]]

    def test_disjoint_and_covering(self):
        records = gate_records(GateSpec("XOR", n_samples=50, seed=1))
        tr, te = split_dataset(records, SplitSpec(seed=7))
        ids = {r.id for r in tr} | {r.id for r in te}
        assert len(ids) == 50
        assert not ({r.id for r in tr} & {r.id for r in te})

    def test_too_few_records_rejected(self):
        records = gate_records(GateSpec("XOR", n_samples=3, seed=1))
        with pytest.raises(DomainError):
            split_dataset(records, SplitSpec(seed=0))


class TestWireFormat:
    def test_round_trip_is_bit_exact(self, tmp_path, rng):
        records = gen_continuous(ContinuousSpec("synergy", dim=5, n_samples=20, seed=3))
        path = tmp_path / "records.jsonl"
        write_records(records, path)
        back, manifest = read_records(path)
        assert manifest.n_records == 20
        for a, b in zip(records, back):
            assert a.id == b.id
            assert np.array_equal(a.x1, b.x1)
            assert np.array_equal(a.x2, b.x2)
            assert np.array_equal(a.scores_mm, b.scores_mm)
            assert a.gold == b.gold and a.pred == b.pred

    def test_malformed_line_names_line_number(self, tmp_path):
        records = gate_records(GateSpec("XOR", n_samples=5, seed=0))
        path = tmp_path / "records.jsonl"
        write_records(records, path)
        lines = path.read_text().splitlines()
        lines[2] = "{not json"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(FormatError, match="line 3"):
            read_records(path)

    def test_non_finite_forbidden_at_construction(self):
        with pytest.raises(FormatError):
            SampleRecord(id="x", dataset="d", model="m",
                         x1=np.array([np.inf]), x2=np.zeros(1),
                         scores_mm=np.array([0.5, 0.5]), scores_v=np.array([0.5, 0.5]),
                         scores_t=np.array([0.5, 0.5]))

    def test_non_finite_forbidden_on_write(self, tmp_path):
        records = gate_records(GateSpec("XOR", n_samples=2, seed=0))
        records[0].x1 = np.array([np.inf])  # bypasses construction checks
        with pytest.raises(FormatError):
            write_records(records, tmp_path / "records.jsonl")

    def test_non_finite_forbidden_on_read(self, tmp_path):
        records = gate_records(GateSpec("XOR", n_samples=2, seed=0))
        path = tmp_path / "records.jsonl"
        write_records(records, path)
        text = path.read_text().replace('"x1": [0.0]', '"x1": [Infinity]', 1)
        path.write_text(text)
        with pytest.raises(FormatError):
            read_records(path)

    def test_manifest_k_mismatch_detected(self, tmp_path):
        records = gate_records(GateSpec("XOR", n_samples=3, seed=0))
        path = tmp_path / "records.jsonl"
        write_records(records, path)
        mpath = pipeline.manifest_path(path)
        data = json.loads(mpath.read_text())
        data["k"] = 5
        mpath.write_text(json.dumps(data))
        with pytest.raises(FormatError):
            read_records(path)

    def test_record_count_mismatch_detected(self, tmp_path):
        records = gate_records(GateSpec("XOR", n_samples=3, seed=0))
        path = tmp_path / "records.jsonl"
        write_records(records, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:2]) + "\n")
        with pytest.raises(FormatError, match="promises 3"):
            read_records(path)

    def test_feature_sidecar_round_trip(self, tmp_path):
        records = gate_records(GateSpec("XOR", n_samples=4, seed=0))
        for rec in records:
            rec.x1 = np.arange(3, dtype=float)
            rec.x2 = np.arange(2, dtype=float) + 0.5
        path = tmp_path / "records.jsonl"
        manifest = pipeline.manifest_for(records)
        write_records(records, path, manifest, use_sidecar=True)
        assert (tmp_path / "records.features.f32").exists()
        back, m2 = read_records(path)
        assert m2.feature_sidecar == "records.features.f32"
        for a, b in zip(records, back):
            # Sidecar stores float32, so values survive an f32 round trip.
            assert np.array_equal(a.x1.astype(np.float32), b.x1.astype(np.float32))

    def test_unknown_field_rejected(self, tmp_path):
        records = gate_records(GateSpec("XOR", n_samples=2, seed=0))
        path = tmp_path / "records.jsonl"
        write_records(records, path)
        lines = path.read_text().splitlines()
        obj = json.loads(lines[0])
        obj["surprise"] = 1
        lines[0] = json.dumps(obj)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(FormatError, match="line 1"):
            read_records(path)


class TestSampleRecordValidation:
    def test_k_bounds(self):
        with pytest.raises(FormatError):
            SampleRecord(id="x", dataset="d", model="m",
                         x1=np.zeros(2), x2=np.zeros(2),
                         scores_mm=np.array([1.0]), scores_v=np.array([1.0]),
                         scores_t=np.array([1.0]))

    def test_gold_range(self):
        with pytest.raises(FormatError):
            SampleRecord(id="x", dataset="d", model="m",
                         x1=np.zeros(2), x2=np.zeros(2),
                         scores_mm=np.array([0.5, 0.5]), scores_v=np.array([0.5, 0.5]),
                         scores_t=np.array([0.5, 0.5]), gold=2)
