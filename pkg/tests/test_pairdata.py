"""Pair combinatorics, synthetic generation, the Bayes oracle, samplers,
folds, and the dataset file format."""
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsmm.metrics import roc_auc
from dsmm.numerics import ContractError, Rng
from dsmm.pairdata import (
    Batch,
    FoldSpec,
    GeneratorMeta,
    PairSample,
    SamplerConfig,
    balanced_eval_pairs,
    bayes_llr,
    bayes_scores,
    generate_synthetic,
    load_dataset,
    make_folds,
    negative_count,
    sample_balanced_batch,
    sample_unbalanced_batch,
    save_dataset,
)


class TestNegativeCount:
    @pytest.mark.parametrize("n,expected", [(533, 283556), (1, 0), (1000, 999000)])
    def test_reference_values(self, n, expected):
        assert negative_count(n) == expected

    def test_matches_enumeration_up_to_fifty(self):
        for n in range(1, 51):
            brute = sum(
                1 for i in range(n) for j in range(n) if i != j
            )
            assert negative_count(n) == brute

    def test_contract(self):
        with pytest.raises(ContractError):
            negative_count(0)


class TestGenerator:
    def test_deterministic_in_seed(self):
        a = generate_synthetic(n_families=30, dim=5, seed=9)
        b = generate_synthetic(n_families=30, dim=5, seed=9)
        assert np.array_equal(a.parents, b.parents)
        assert np.array_equal(a.children, b.children)
        assert not np.array_equal(
            a.parents, generate_synthetic(n_families=30, dim=5, seed=10).parents
        )

    def test_degenerate_correlation_copies_parent(self):
        ds = generate_synthetic(n_families=20, dim=6, rho=1 - 1e-12, sigma=0.0, seed=1)
        assert np.allclose(ds.parents, ds.children, atol=1e-4)

    def test_positive_pair_correlation_matches_rho(self):
        ds = generate_synthetic(n_families=2000, dim=8, rho=0.8, sigma=0.0, seed=3)
        corr = [
            np.corrcoef(ds.parents[:, i], ds.children[:, i])[0, 1] for i in range(8)
        ]
        assert abs(np.mean(corr) - 0.8) < 0.03

    def test_negative_pair_correlation_near_zero(self):
        ds = generate_synthetic(n_families=2000, dim=8, rho=0.8, sigma=0.0, seed=4)
        shifted = np.roll(np.arange(2000), 1)
        corr = [
            np.corrcoef(ds.parents[:, i], ds.children[shifted, i])[0, 1]
            for i in range(8)
        ]
        assert abs(np.mean(corr)) < 0.03

    def test_positive_pair_covariance_matches_model(self):
        rho, sigma = 0.8, 0.25
        ds = generate_synthetic(n_families=10000, dim=4, rho=rho, sigma=sigma, seed=5)
        a = 1.0 + sigma**2
        for i in range(4):
            cov = np.cov(ds.parents[:, i], ds.children[:, i])
            assert abs(cov[0, 0] - a) < 0.05
            assert abs(cov[1, 1] - a) < 0.05
            assert abs(cov[0, 1] - rho) < 0.05

    def test_nonlinear_mode_bounds_features(self):
        ds = generate_synthetic(n_families=50, dim=4, nonlinear=True, seed=2)
        assert np.all(np.abs(ds.parents) < 1.0)
        assert ds.meta.nonlinear

    def test_config_contracts(self):
        with pytest.raises(ContractError):
            generate_synthetic(n_families=10, dim=4, rho=1.0)
        with pytest.raises(ContractError):
            generate_synthetic(n_families=10, dim=0)
        with pytest.raises(ContractError):
            generate_synthetic(n_families=10, dim=4, sigma=-0.1)
        with pytest.raises(ContractError):
            generate_synthetic(n_families=1, dim=4)

    def test_entities_have_one_parent_one_child_per_family(self):
        ds = generate_synthetic(n_families=7, dim=3, seed=0)
        seen = {}
        for e in ds.entities():
            seen.setdefault(e.family_id, []).append(e.role)
        assert all(sorted(v) == ["child", "parent"] for v in seen.values())
        assert len(seen) == 7


class TestBayesOracle:
    def test_zero_rho_gives_identically_zero_llr(self):
        meta = GeneratorMeta(10, 4, rho=0.0, sigma=0.3, nonlinear=False, seed=0)
        for s in range(10):
            u = Rng(s, "u").normal(4)
            v = Rng(s, "v").normal(4)
            assert bayes_llr(u, v, meta) == 0.0

    def test_origin_value_closed_form(self):
        rho, sigma, d = 0.8, 0.25, 16
        meta = GeneratorMeta(10, d, rho, sigma, False, 0)
        a = 1.0 + sigma**2
        expected = -0.5 * d * np.log(1.0 - rho**2 / a**2)
        got = bayes_llr(np.zeros(d), np.zeros(d), meta)
        assert got > 0.0
        assert np.isclose(got, expected, rtol=1e-12)

    def test_rejects_nonlinear_mode(self):
        meta = GeneratorMeta(10, 4, 0.8, 0.1, nonlinear=True, seed=0)
        with pytest.raises(ContractError):
            bayes_llr(np.zeros(4), np.zeros(4), meta)

    def test_positive_pairs_score_higher_on_average(self):
        ds = generate_synthetic(n_families=500, dim=6, rho=0.8, sigma=0.25, seed=6)
        pos = np.mean(
            [bayes_llr(ds.parents[i], ds.children[i], ds.meta) for i in range(500)]
        )
        neg = np.mean(
            [
                bayes_llr(ds.parents[i], ds.children[(i + 7) % 500], ds.meta)
                for i in range(500)
            ]
        )
        assert pos > 0 > neg

    def test_llr_beats_every_single_feature_score(self):
        ds = generate_synthetic(n_families=400, dim=6, rho=0.8, sigma=0.25, seed=7)
        pairs = balanced_eval_pairs(ds, range(400), Rng(1, "eval"))
        labels = pairs.labels
        llr_auc = roc_auc(
            bayes_scores(ds, pairs.parent_idx, pairs.child_idx), labels
        )[1]
        for i in range(6):
            # a natural one-feature score: negative squared difference
            single = -(
                ds.parents[pairs.parent_idx, i] - ds.children[pairs.child_idx, i]
            ) ** 2
            assert llr_auc > roc_auc(single, labels)[1]


class TestUnbalancedSampler:
    def test_batch_shape_and_mix(self):
        ds = generate_synthetic(n_families=100, dim=4, seed=0)
        batch = sample_unbalanced_batch(
            range(100), SamplerConfig(8, 4), Rng(0, "s")
        )
        assert len(batch) == 40
        assert int(np.sum(batch.labels == 1)) == 8
        assert batch.m_pos == 8 and batch.c_ratio == 4

    def test_balanced_is_c_equal_one(self):
        batch = sample_balanced_batch(range(20), 5, Rng(1, "s"))
        assert len(batch) == 10
        assert int(np.sum(batch.labels == 1)) == 5
        assert batch.c_ratio == 1

    def test_positive_pairs_match_family_and_negatives_do_not(self):
        for s in range(20):
            batch = sample_unbalanced_batch(
                range(15), SamplerConfig(4, 3), Rng(s, "t")
            )
            for sample in batch:
                if sample.label == 1:
                    assert sample.parent_index == sample.child_index
                else:
                    assert sample.parent_index != sample.child_index

    def test_no_duplicate_pairs_within_batch(self):
        for s in range(20):
            batch = sample_unbalanced_batch(
                range(10), SamplerConfig(5, 4), Rng(s, "d")
            )
            pairs = list(zip(batch.parent_idx.tolist(), batch.child_idx.tolist()))
            assert len(set(pairs)) == len(pairs)

    def test_positives_drawn_without_replacement(self):
        batch = sample_balanced_batch(range(8), 8, Rng(3, "p"))
        pos = batch.parent_idx[batch.labels == 1]
        assert sorted(pos.tolist()) == list(range(8))

    def test_negative_space_is_sampled_uniformly(self):
        # 100k negative draws over the 90 ordered pairs of 10 families
        rng = Rng(123, "freq")
        counts = np.zeros((10, 10))
        while counts.sum() < 100_000:
            batch = sample_unbalanced_batch(range(10), SamplerConfig(1, 8), rng)
            neg = batch.labels == 0
            np.add.at(counts, (batch.parent_idx[neg], batch.child_idx[neg]), 1)
        total = counts.sum()
        off_diagonal = counts[~np.eye(10, dtype=bool)]
        expected = total / 90.0
        assert np.all(np.abs(off_diagonal - expected) <= 0.10 * expected)
        assert np.all(np.diag(counts) == 0)

    def test_balanced_label_counts_over_many_draws(self):
        rng = Rng(5, "b")
        for _ in range(1000):
            batch = sample_balanced_batch(range(6), 3, rng)
            assert int(np.sum(batch.labels == 1)) == 3
            assert int(np.sum(batch.labels == 0)) == 3

    def test_tiny_exhaustive_case(self):
        seen = set()
        rng = Rng(8, "tiny")
        for _ in range(200):
            batch = sample_balanced_batch(range(2), 1, rng)
            neg = [s for s in batch if s.label == 0][0]
            seen.add((neg.parent_index, neg.child_index))
        assert seen == {(0, 1), (1, 0)}

    def test_insufficient_families_contract(self):
        with pytest.raises(ContractError):
            sample_unbalanced_batch(range(3), SamplerConfig(4, 1), Rng(0, "x"))

    def test_negative_budget_contract(self):
        with pytest.raises(ContractError):
            sample_unbalanced_batch(range(2), SamplerConfig(2, 2), Rng(0, "x"))

    def test_sampler_is_deterministic(self):
        a = sample_unbalanced_batch(range(30), SamplerConfig(4, 2), Rng(7, "q"))
        b = sample_unbalanced_batch(range(30), SamplerConfig(4, 2), Rng(7, "q"))
        assert np.array_equal(a.parent_idx, b.parent_idx)
        assert np.array_equal(a.child_idx, b.child_idx)
        assert np.array_equal(a.labels, b.labels)


class TestPairSample:
    def test_label_consistency_enforced(self):
        with pytest.raises(ContractError):
            PairSample(1, 1, 0)
        with pytest.raises(ContractError):
            PairSample(1, 2, 1)


class TestFolds:
    def test_even_split(self):
        ds = generate_synthetic(n_families=10, dim=3, seed=0)
        folds = make_folds(ds, 5, seed=1)
        assert [len(f) for f in folds.folds] == [2, 2, 2, 2, 2]

    def test_partition_property(self):
        ds = generate_synthetic(n_families=23, dim=3, seed=0)
        folds = make_folds(ds, 5, seed=2)
        joined = np.sort(np.concatenate(folds.folds))
        assert np.array_equal(joined, np.arange(23))

    def test_uneven_sizes_bookkeeping(self):
        ds = generate_synthetic(n_families=533, dim=2, seed=0)
        folds = make_folds(ds, 5, seed=3)
        assert sorted((len(f) for f in folds.folds), reverse=True) == [
            107, 107, 107, 106, 106,
        ]

    def test_too_few_families(self):
        ds = generate_synthetic(n_families=4, dim=2, seed=0)
        with pytest.raises(ContractError):
            make_folds(ds, 5)

    def test_train_families_exclude_test_fold(self):
        ds = generate_synthetic(n_families=20, dim=2, seed=0)
        folds = make_folds(ds, 4, seed=4)
        for i in range(4):
            train = set(folds.train_families(i).tolist())
            test = set(folds.test_families(i).tolist())
            assert not train & test
            assert train | test == set(range(20))

    def test_no_leakage_into_training_batches(self):
        # exhaustive at small N: no test family ever appears in any batch
        # drawn from the training split, on either side of a pair
        ds = generate_synthetic(n_families=20, dim=2, seed=0)
        folds = make_folds(ds, 5, seed=5)
        for fold in range(5):
            train = folds.train_families(fold)
            test = set(folds.test_families(fold).tolist())
            rng = Rng(fold, "leak")
            for _ in range(50):
                batch = sample_unbalanced_batch(train, SamplerConfig(4, 3), rng)
                assert not (set(batch.parent_idx.tolist()) & test)
                assert not (set(batch.child_idx.tolist()) & test)

    def test_overlapping_folds_rejected(self):
        with pytest.raises(ContractError):
            FoldSpec([np.array([0, 1]), np.array([1, 2])])


class TestEvalPairs:
    def test_balanced_with_all_positives(self):
        ds = generate_synthetic(n_families=30, dim=3, seed=1)
        pairs = balanced_eval_pairs(ds, range(10, 22), Rng(0, "e"))
        assert int(np.sum(pairs.labels == 1)) == 12
        assert int(np.sum(pairs.labels == 0)) == 12
        pos = np.sort(pairs.parent_idx[pairs.labels == 1])
        assert np.array_equal(pos, np.arange(10, 22))


class TestDatasetFile:
    def test_round_trip_is_exact(self, tmp_path):
        ds = generate_synthetic(n_families=17, dim=5, rho=0.73, sigma=0.31, seed=99)
        path = tmp_path / "pairs.csv"
        save_dataset(path, ds)
        loaded = load_dataset(path)
        assert np.array_equal(loaded.parents, ds.parents)
        assert np.array_equal(loaded.children, ds.children)
        assert loaded.meta == ds.meta

    def test_regeneration_is_byte_identical(self, tmp_path):
        ds = generate_synthetic(n_families=9, dim=3, seed=5)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        save_dataset(a, ds)
        save_dataset(b, generate_synthetic(n_families=9, dim=3, seed=5))
        assert a.read_bytes() == b.read_bytes()

    def test_header_fields_parse_back(self, tmp_path):
        ds = generate_synthetic(
            n_families=8, dim=4, rho=0.65, sigma=0.125, nonlinear=True, seed=21
        )
        path = tmp_path / "nl.csv"
        save_dataset(path, ds)
        meta = load_dataset(path).meta
        assert meta.rho == 0.65 and meta.sigma == 0.125
        assert meta.nonlinear and meta.seed == 21

    def test_missing_row_rejected(self, tmp_path):
        ds = generate_synthetic(n_families=4, dim=2, seed=1)
        path = tmp_path / "broken.csv"
        save_dataset(path, ds)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(ContractError):
            load_dataset(path)

    def test_foreign_file_rejected(self, tmp_path):
        path = tmp_path / "other.csv"
        path.write_text("id,role\n")
        with pytest.raises(ContractError):
            load_dataset(path)


@given(st.integers(min_value=2, max_value=40), st.integers(min_value=0, max_value=50))
@settings(max_examples=30, deadline=None)
def test_fold_sizes_differ_by_at_most_one(n, seed):
    ds = generate_synthetic(n_families=max(n, 2), dim=2, seed=0)
    k = min(5, n)
    folds = make_folds(ds, k, seed=seed)
    sizes = [len(f) for f in folds.folds]
    assert max(sizes) - min(sizes) <= 1
    assert sum(sizes) == n
