import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from deskbert import evalstats as E
from deskbert.evalstats import (ScoreTable, accuracy, borda_rank, bucket_means, f1_entity, fertility_bins,
                                ndcg_at_k, paired_pvalue, quantile_buckets, rank_systems, significance_clusters,
                                spearman)


def brute_ndcg(ranking, rel, k):
    dcg = sum(rel.get(d, 0) / math.log2(i + 2) for i, d in enumerate(ranking[:k]))
    best = max(sum(rel.get(d, 0) / math.log2(i + 2) for i, d in enumerate(p[:k]))
               for p in itertools.permutations(list(rel)))
    return dcg / best if best else 0.0


class TestMetrics:
    def test_ndcg_perfect_and_reversed(self):
        rel = {"a": 3, "b": 2, "c": 1}
        assert ndcg_at_k(["a", "b", "c"], rel) == 1.0
        expected = (1 + 2 / math.log2(3) + 3 / 2) / (3 + 2 / math.log2(3) + 1 / 2)
        assert ndcg_at_k(["c", "b", "a"], rel) == pytest.approx(expected, abs=1e-12)
        assert ndcg_at_k(["x"], {}) == 0.0

    def test_ndcg_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(150):
            n = int(rng.integers(1, 8))
            docs = [f"d{i}" for i in range(n)]
            rel = {d: int(rng.integers(0, 4)) for d in docs}
            ranking = list(rng.permutation(docs))
            k = int(rng.integers(1, 11))
            assert abs(ndcg_at_k(ranking, rel, k) - brute_ndcg(ranking, rel, k)) < 1e-9

    def test_spearman_ties(self):
        assert spearman([1, 2, 2, 3], [1, 3, 2, 4]) == pytest.approx(4.5 / math.sqrt(22.5), abs=1e-12)

    def test_spearman_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(150):
            n = int(rng.integers(3, 9))
            x, y = rng.integers(0, 4, n).astype(float), rng.integers(0, 4, n).astype(float)
            if np.ptp(x) == 0 or np.ptp(y) == 0:
                continue
            assert abs(spearman(x, y) - stats.spearmanr(x, y).statistic) < 1e-9

    def test_spearman_errors(self):
        with pytest.raises(ValueError):
            spearman([1, 1, 1], [1, 2, 3])
        with pytest.raises(ValueError):
            spearman([1], [1])

    def test_f1_cases(self):
        assert f1_entity([[(0, 2, 1)]], [[(0, 2, 1), (3, 5, 2)]]) == pytest.approx(2 / 3)
        assert f1_entity([[(0, 2, 1), (4, 6, 1)]], [[(0, 2, 1), (3, 5, 2)]]) == 0.5
        assert f1_entity([[]], [[]]) == 1.0
        assert f1_entity([[(0, 1, 1)]], [[(0, 1, 2)]]) == 0.0

    def test_f1_oracle(self):
        rng = np.random.default_rng(2)
        pool = [(s, s + w, lab) for s in range(4) for w in (1, 2) for lab in (1, 2)]
        for _ in range(150):
            n_docs = int(rng.integers(1, 4))
            pred = [[pool[i] for i in rng.choice(len(pool), rng.integers(0, 5), replace=False)] for _ in range(n_docs)]
            gold = [[pool[i] for i in rng.choice(len(pool), rng.integers(0, 5), replace=False)] for _ in range(n_docs)]
            tp = sum(1 for p, g in zip(pred, gold) for e in p if e in g)
            npred, ngold = sum(map(len, pred)), sum(map(len, gold))
            if npred == ngold == 0:
                ref = 1.0
            else:
                ref = 2 * tp / (npred + ngold)
            assert abs(f1_entity(pred, gold) - ref) < 1e-9

    def test_accuracy(self):
        assert accuracy([1, 0, 1, 1], [1, 1, 1, 0]) == 0.5
        with pytest.raises(ValueError):
            accuracy([1], [1, 2])


def table_from(rows, lang="xx"):
    t = ScoreTable()
    for name, scores in rows.items():
        for i, s in enumerate(scores):
            t.add(name, lang, str(i), s)
    return t


def exhaustive_clusters(rows, alpha):
    """Leader-chain clustering with p-values over every one of the n^n paired resamples."""
    names = sorted(rows, key=lambda s: (-sum(rows[s]) / len(rows[s]), s))
    n = len(rows[names[0]])

    def p_exact(a, b):
        diff = [x - y for x, y in zip(rows[a], rows[b])]
        hits = sum(1 for idx in itertools.product(range(n), repeat=n) if sum(diff[i] for i in idx) <= 0)
        return hits / n**n

    out, leader, c = {names[0]: 1}, names[0], 1
    for s in names[1:]:
        if p_exact(leader, s) < alpha:
            c, leader = c + 1, s
        out[s] = c
    return out


class TestSignificance:
    def test_exhaustive_oracle(self, monkeypatch):
        n = 5
        every = np.array(list(itertools.product(range(n), repeat=n)))
        monkeypatch.setattr(E, "bootstrap_indices", lambda *_: every)
        rng = np.random.default_rng(3)
        for _ in range(25):
            rows = {f"s{j}": rng.integers(0, 4, n).tolist() for j in range(4)}
            t = table_from(rows)
            for conf in (0.9, 0.95):
                assert significance_clusters(t, "xx", conf) == exhaustive_clusters(rows, 1 - conf)

    def test_bootstrap_approximates_exact(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(0.3, 1, 6), rng.normal(0, 1, 6)
        n = 6
        diff = a - b
        exact = np.mean([diff[list(idx)].mean() <= 0 for idx in itertools.product(range(n), repeat=n)])
        assert abs(paired_pvalue(a, b, resamples=20_000, seed=0) - exact) < 0.01

    def test_clear_separation(self):
        rows = {"good": [0.9] * 20, "bad": [0.1] * 20, "mid": [0.5] * 10 + [0.6] * 10}
        assert significance_clusters(table_from(rows), "xx") == {"good": 1, "mid": 2, "bad": 3}

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=2, max_size=12), st.integers(0, 1000))
    def test_identical_systems_share_first_cluster(self, scores, seed):
        rows = {"a": scores, "b": list(scores), "c": [s - 0.5 for s in scores]}
        cl = significance_clusters(table_from(rows), "xx", seed=seed, resamples=200)
        assert cl["a"] == cl["b"] == 1

    def test_permutation_test(self):
        p = paired_pvalue(np.ones(30), np.zeros(30), test="permutation", resamples=999)
        assert p == pytest.approx(1 / 1000)
        with pytest.raises(ValueError):
            paired_pvalue(np.ones(3), np.zeros(3), test="sign")

    def test_misaligned_ids(self):
        t = table_from({"a": [1, 2, 3]})
        t.add("b", "xx", "0", 1)
        with pytest.raises(ValueError, match="differ"):
            t.matrix("xx")


class TestBorda:
    def test_two_by_two(self):
        r = borda_rank({"l1": {"A": 1, "B": 2}, "l2": {"A": 2, "B": 1}})
        assert r.borda == {"A": 1.5, "B": 1.5} and r.ties == [["A", "B"]] and r.majority_winner is None

    def test_crafted_three_by_three(self):
        clusters = {"de": {"A": 1, "B": 2, "C": 3},
                    "en": {"A": 1, "B": 1, "C": 2},
                    "fr": {"A": 2, "B": 1, "C": 2}}
        r = borda_rank(clusters)
        assert r.borda == {"A": 4 / 3, "B": 4 / 3, "C": 7 / 3}
        assert r.ordering == ["A", "B", "C"]
        assert r.majority_winner is None
        assert "A" in r.table() and len(r.records()) == 9 + 3 + 1

    def test_majority_winner(self):
        r = borda_rank({"a": {"X": 1, "Y": 2}, "b": {"X": 1, "Y": 2}, "c": {"X": 2, "Y": 1}})
        assert r.majority_winner == "X"

    def test_ragged(self):
        with pytest.raises(ValueError, match="ragged"):
            borda_rank({"a": {"X": 1}, "b": {"Y": 1}})

    def test_rank_systems_end_to_end(self):
        t = ScoreTable.from_records(
            [{"system": s, "language": lang, "example_id": str(i), "score": v}
             for lang in ("en", "fr") for s, v in (("A", 0.9), ("B", 0.1)) for i in range(10)])
        r = rank_systems(t)
        assert r.borda == {"A": 1.0, "B": 2.0} and r.majority_winner == "A"

    def test_ndcg_records(self):
        t = ScoreTable.from_records([{"system": "s", "language": "en", "example_id": "q",
                                      "ranking": ["d1", "d2"], "relevance": {"d2": 1}}])
        assert t.scores[("s", "en")]["q"] == pytest.approx(1 / math.log2(3))


class TestAnalysis:
    def test_quantile_buckets(self):
        assert quantile_buckets(list(range(10)), 5).tolist() == [1, 1, 2, 2, 3, 3, 4, 4, 5, 5]
        assert quantile_buckets([5, 1, 1, 1, 9], 2).tolist() == [2, 1, 1, 1, 2]
        with pytest.raises(ValueError):
            quantile_buckets([1, 2], 5)

    def test_bucket_means(self):
        assert bucket_means([1, 1, 3], [0.2, 0.4, 1.0], 3) == [pytest.approx(0.3), None, 1.0]

    def test_fertility_bins(self):
        bins = fertility_bins([1.0, 1.5, 2.0, 3.0], [1, 1, 0, 0], [0, 1, 1, 0], [1, 2, 3])
        assert [b.count for b in bins] == [2, 2]
        assert [b.difference for b in bins] == [0.5, -0.5]
        with pytest.raises(ValueError):
            fertility_bins([1], [1], [1], [2, 1])
