"""Baseline selectors: hand-checked strides, sort oracles, and the
shared contract (b unique in-range indices)."""
import numpy as np
import pytest

from kvcoreset import (
    BudgetError,
    CandidatePool,
    SelectorConfig,
    d2_select,
    greedy_shortlist,
    kmeans_representative,
    random_select,
    uniform_select,
    value_norm_topk,
)


def make_pool(n=20, d=4, seed=0):
    rng = np.random.default_rng(seed)
    return CandidatePool(rng.standard_normal((n, d)), rng.standard_normal((n, d)))


class TestUniform:
    def test_hand_stride(self):
        # floor(j*7/3) for j=0,1,2 -> {0, 2, 4}
        np.testing.assert_array_equal(uniform_select(7, 3), [0, 2, 4])

    def test_full_budget(self):
        np.testing.assert_array_equal(uniform_select(5, 5), np.arange(5))

    def test_single(self):
        np.testing.assert_array_equal(uniform_select(9, 1), [0])

    def test_budget_validation(self):
        with pytest.raises(BudgetError):
            uniform_select(4, 5)
        with pytest.raises(BudgetError):
            uniform_select(4, 0)

    def test_always_b_unique(self):
        for n in range(1, 30):
            for b in range(1, n + 1):
                out = uniform_select(n, b)
                assert len(out) == b == len(set(out.tolist()))
                assert out.min() >= 0 and out.max() < n


class TestValueNorm:
    def test_sort_oracle(self):
        pool = make_pool(seed=1)
        got = value_norm_topk(pool, 6)
        norms = (pool.values**2).sum(axis=1)
        expect = sorted(sorted(range(pool.size), key=lambda i: (-norms[i], i))[:6])
        assert got.tolist() == expect

    def test_tie_prefers_lowest_index(self):
        vals = np.array([[1.0], [2.0], [1.0], [2.0]])
        pool = CandidatePool(np.zeros((4, 1)), vals)
        assert value_norm_topk(pool, 2).tolist() == [1, 3]
        assert value_norm_topk(pool, 3).tolist() == [0, 1, 3]


class TestRandom:
    def test_seeded_and_deterministic(self):
        a = random_select(100, 10, seed=5)
        b = random_select(100, 10, seed=5)
        np.testing.assert_array_equal(a, b)
        assert len(set(a.tolist())) == 10
        assert not np.array_equal(a, random_select(100, 10, seed=6))

    def test_sorted_output(self):
        out = random_select(50, 20, seed=0)
        assert np.all(np.diff(out) > 0)


class TestKmeans:
    def test_contract(self):
        pool = make_pool(n=30, seed=2)
        out = kmeans_representative(pool, 8)
        assert len(out) == 8 == len(set(out.tolist()))
        assert np.all(np.diff(out) > 0)

    def test_deterministic(self):
        pool = make_pool(n=30, seed=3)
        a = kmeans_representative(pool, 8)
        b = kmeans_representative(pool, 8)
        np.testing.assert_array_equal(a, b)

    def test_recovers_separated_clusters(self):
        # 3 tight, well-separated blobs: one representative lands in each
        rng = np.random.default_rng(4)
        centers = np.array([[0.0, 0.0], [50.0, 0.0], [0.0, 50.0]])
        labels = np.repeat(np.arange(3), 10)
        feats = centers[labels] + 0.01 * rng.standard_normal((30, 2))
        pool = CandidatePool(feats, np.zeros((30, 2)))
        out = kmeans_representative(pool, 3)
        assert sorted(set(labels[out])) == [0, 1, 2]

    def test_b_equals_n(self):
        pool = make_pool(n=6, seed=5)
        np.testing.assert_array_equal(kmeans_representative(pool, 6), np.arange(6))


class TestShortlist:
    def test_infinite_multiplier_equals_d2(self):
        pool = make_pool(n=25, seed=6)
        full = d2_select(pool, 7, 0.25).selected
        got = greedy_shortlist(pool, 7, m=1000, alpha=0.25)
        assert got == list(full)

    def test_shortlist_restricts_to_top_norms(self):
        pool = make_pool(n=40, seed=7)
        got = greedy_shortlist(pool, 4, m=2, alpha=0.25)
        norms = pool.joint_sq_norms()
        top8 = set(np.argsort(-norms, kind="stable")[:8].tolist())
        assert set(got) <= top8
        assert len(got) == 4 == len(set(got))

    def test_multiplier_validation(self):
        pool = make_pool()
        with pytest.raises(BudgetError):
            greedy_shortlist(pool, 3, m=0)


class TestSharedContract:
    @pytest.mark.parametrize("b", [1, 3, 10])
    def test_every_baseline_returns_b_unique(self, b):
        pool = make_pool(n=15, seed=8)
        cfg = SelectorConfig()
        outs = [
            uniform_select(pool.size, b),
            random_select(pool.size, b, cfg.rng_seed),
            value_norm_topk(pool, b),
            kmeans_representative(pool, b, cfg),
            np.array(greedy_shortlist(pool, b)),
        ]
        for out in outs:
            assert len(out) == b == len(set(np.asarray(out).tolist()))
            assert np.asarray(out).min() >= 0 and np.asarray(out).max() < pool.size
