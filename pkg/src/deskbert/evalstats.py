"""Task metrics, significance clustering and normalized Borda ranking."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np


# -- metrics -------------------------------------------------------------

def ndcg_at_k(ranking: Sequence[Hashable], relevance: Mapping[Hashable, float], k: int = 10) -> float:
    """nDCG@k with gain ``rel`` and discount ``log2(rank + 1)``; 0 when nothing is relevant."""
    if k < 1:
        raise ValueError("k must be at least 1")
    gains = [float(relevance.get(doc, 0.0)) for doc in list(ranking)[:k]]
    dcg = sum(g / math.log2(i + 2) for i, g in enumerate(gains))
    ideal = sorted((float(r) for r in relevance.values() if r > 0), reverse=True)[:k]
    idcg = sum(g / math.log2(i + 2) for i, g in enumerate(ideal))
    return dcg / idcg if idcg > 0 else 0.0


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise ValueError("spearman needs at least two observations")
    rx, ry = average_ranks(x), average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0:
        raise ValueError("spearman correlation undefined for a constant vector")
    return float(rx @ ry) / denom


def accuracy(pred: Sequence, gold: Sequence) -> float:
    if len(pred) != len(gold):
        raise ValueError(f"length mismatch: {len(pred)} vs {len(gold)}")
    if not gold:
        raise ValueError("accuracy over zero examples")
    return sum(p == g for p, g in zip(pred, gold)) / len(gold)


Entity = tuple  # (start, end, label)


def f1_entity(predicted: Sequence[Iterable[Entity]], gold: Sequence[Iterable[Entity]]) -> float:
    """Micro-averaged exact-match entity F1 over a corpus.

    Both sides empty counts as a perfect score.
    """
    if len(predicted) != len(gold):
        raise ValueError(f"length mismatch: {len(predicted)} vs {len(gold)}")
    tp = n_pred = n_gold = 0
    for p, g in zip(predicted, gold):
        p, g = set(map(tuple, p)), set(map(tuple, g))
        tp += len(p & g)
        n_pred += len(p)
        n_gold += len(g)
    if n_pred == 0 and n_gold == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision, recall = tp / n_pred, tp / n_gold
    return 2 * precision * recall / (precision + recall)


# -- score tables --------------------------------------------------------

@dataclass
class ScoreTable:
    """Per-example scores keyed by (system, language), aligned by example id."""

    scores: dict[tuple[str, str], dict[str, float]] = field(default_factory=dict)

    def add(self, system: str, language: str, example_id: str, score: float) -> None:
        cell = self.scores.setdefault((system, language), {})
        if example_id in cell:
            raise ValueError(f"duplicate example {example_id!r} for {system}/{language}")
        cell[example_id] = float(score)

    @property
    def systems(self) -> list[str]:
        return sorted({s for s, _ in self.scores})

    @property
    def languages(self) -> list[str]:
        return sorted({lang for _, lang in self.scores})

    def matrix(self, language: str) -> tuple[list[str], np.ndarray]:
        """Systems scored on ``language`` and their [systems, examples] score matrix."""
        systems = [s for s in self.systems if (s, language) in self.scores]
        if not systems:
            raise KeyError(f"no scores for language {language!r}")
        ids = sorted(self.scores[(systems[0], language)])
        for s in systems[1:]:
            other = set(self.scores[(s, language)])
            if other != set(ids):
                diff = sorted(other.symmetric_difference(ids))[:3]
                raise ValueError(f"{language}: example ids of {s} differ from {systems[0]} (e.g. {diff})")
        return systems, np.array([[self.scores[(s, language)][i] for i in ids] for s in systems])

    def check_rectangular(self) -> None:
        missing = [(s, lang) for s in self.systems for lang in self.languages if (s, lang) not in self.scores]
        if missing:
            raise ValueError(f"ragged score table, missing e.g. {missing[:3]}")

    @classmethod
    def from_records(cls, records: Iterable[Mapping], k: int = 10) -> "ScoreTable":
        table = cls()
        for n, rec in enumerate(records, start=1):
            try:
                system, language, ex = str(rec["system"]), str(rec["language"]), str(rec["example_id"])
            except KeyError as exc:
                raise ValueError(f"record {n}: missing field {exc.args[0]!r}") from None
            if "score" in rec:
                score = float(rec["score"])
            elif "ranking" in rec and "relevance" in rec:
                score = ndcg_at_k(rec["ranking"], rec["relevance"], k)
            else:
                raise ValueError(f"record {n}: needs 'score' or 'ranking' + 'relevance'")
            table.add(system, language, ex, score)
        return table

    @classmethod
    def load(cls, paths: str | Path | Sequence[str | Path], k: int = 10) -> "ScoreTable":
        if isinstance(paths, (str, Path)):
            paths = [paths]

        def records():
            for path in paths:
                with open(path, encoding="utf-8") as fh:
                    for lineno, line in enumerate(fh, start=1):
                        if not line.strip():
                            continue
                        try:
                            yield json.loads(line)
                        except json.JSONDecodeError as exc:
                            raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None

        return cls.from_records(records(), k)


# -- significance clustering ---------------------------------------------

def bootstrap_indices(n: int, resamples: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, n, size=(resamples, n))


def paired_pvalue(better: np.ndarray, worse: np.ndarray, *, test: str = "bootstrap",
                  resamples: int = 1000, seed: int = 0, indices: np.ndarray | None = None) -> float:
    """One-sided p-value that ``better`` does not outscore ``worse`` on average.

    ``bootstrap`` resamples example indices jointly for both systems and returns
    the share of resamples whose mean difference is <= 0. ``permutation`` flips
    the sign of each paired difference at random.
    """
    diff = np.asarray(better, dtype=np.float64) - np.asarray(worse, dtype=np.float64)
    if test == "bootstrap":
        idx = bootstrap_indices(len(diff), resamples, seed) if indices is None else indices
        means = diff[idx].mean(axis=1)
        return float(np.mean(means <= 0))
    if test == "permutation":
        rng = np.random.default_rng(seed)
        signs = rng.choice([-1.0, 1.0], size=(resamples, len(diff)))
        observed = diff.mean()
        return float((np.sum((signs * diff).mean(axis=1) >= observed) + 1) / (resamples + 1))
    raise ValueError(f"unknown significance test {test!r}")


def significance_clusters(table: ScoreTable, language: str, confidence: float = 0.95, resamples: int = 1000,
                          seed: int = 0, test: str = "bootstrap") -> dict[str, int]:
    """Greedy top-down clusters: sort by mean score, open a new cluster whenever
    the next system is significantly worse than the current cluster's leader."""
    systems, scores = table.matrix(language)
    if scores.shape[1] < 2:
        raise ValueError(f"{language}: need at least 2 examples for significance testing")
    means = scores.mean(axis=1)
    order = sorted(range(len(systems)), key=lambda i: (-means[i], systems[i]))
    idx = bootstrap_indices(scores.shape[1], resamples, seed) if test == "bootstrap" else None
    alpha = 1.0 - confidence
    clusters = {systems[order[0]]: 1}
    leader, current = order[0], 1
    for i in order[1:]:
        p = paired_pvalue(scores[leader], scores[i], test=test, resamples=resamples, seed=seed, indices=idx)
        if p < alpha:
            current += 1
            leader = i
        clusters[systems[i]] = current
    return clusters


# -- Borda ranking -------------------------------------------------------

@dataclass
class RankingReport:
    clusters: dict[str, dict[str, int]]
    borda: dict[str, float]
    ordering: list[str]
    ties: list[list[str]]
    majority_winner: str | None
    meta: dict = field(default_factory=dict)

    def records(self) -> list[dict]:
        out = [{"type": "cluster", "language": lang, "system": s, "cluster": c}
               for lang, cl in sorted(self.clusters.items()) for s, c in sorted(cl.items())]
        out += [{"type": "borda", "system": s, "value": self.borda[s], "rank": i + 1}
                for i, s in enumerate(self.ordering)]
        out.append({"type": "meta", **self.meta, "ties": self.ties, "majority_winner": self.majority_winner})
        return out

    def table(self) -> str:
        langs = sorted(self.clusters)
        width = max([len(s) for s in self.ordering] + [6])
        lines = ["system".ljust(width) + "  borda  " + "  ".join(f"{lang:>5}" for lang in langs)]
        for s in self.ordering:
            cells = "  ".join(f"{self.clusters[lang][s]:>5}" for lang in langs)
            lines.append(f"{s.ljust(width)}  {self.borda[s]:5.2f}  {cells}")
        return "\n".join(lines)


def borda_rank(clusters: Mapping[str, Mapping[str, int]]) -> RankingReport:
    """Normalized Borda count: each system's mean cluster index over languages (lower is better)."""
    if not clusters:
        raise ValueError("no languages to rank")
    systems = set(next(iter(clusters.values())))
    for lang, cl in clusters.items():
        if set(cl) != systems:
            raise ValueError(f"ragged clusters: language {lang!r} covers {sorted(cl)}, expected {sorted(systems)}")
    langs = sorted(clusters)
    values = {s: math.fsum(clusters[lang][s] for lang in langs) / len(langs) for s in systems}
    ordering = sorted(systems, key=lambda s: (values[s], s))
    groups: dict[float, list[str]] = {}
    for s in ordering:
        groups.setdefault(values[s], []).append(s)
    ties = [g for g in groups.values() if len(g) > 1]
    winner = None
    for s in ordering:
        sole_first = sum(1 for lang in langs if clusters[lang][s] == 1
                         and sum(1 for c in clusters[lang].values() if c == 1) == 1)
        if sole_first > len(langs) / 2:
            winner = s
            break
    return RankingReport({lang: dict(clusters[lang]) for lang in langs}, values, ordering, ties, winner)


def rank_systems(table: ScoreTable, confidence: float = 0.95, resamples: int = 1000, seed: int = 0,
                 test: str = "bootstrap") -> RankingReport:
    table.check_rectangular()
    clusters = {lang: significance_clusters(table, lang, confidence, resamples, seed, test) for lang in table.languages}
    report = borda_rank(clusters)
    report.meta = {"confidence": confidence, "resamples": resamples, "seed": seed, "test": test, "one_sided": True}
    return report


# -- analysis helpers ------------------------------------------------------

def quantile_buckets(lengths: Sequence[float], q: int = 5) -> np.ndarray:
    """1-based equal-mass bucket per example; tied lengths share the lowest bucket among them."""
    if q < 2:
        raise ValueError("need at least 2 buckets")
    lengths = np.asarray(lengths)
    n = len(lengths)
    if n < q:
        raise ValueError(f"{n} examples cannot fill {q} buckets")
    order = np.argsort(lengths, kind="mergesort")
    nominal = (np.arange(n) * q) // n + 1
    out = np.empty(n, dtype=np.int64)
    sorted_len = lengths[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_len[j + 1] == sorted_len[i]:
            j += 1
        out[order[i:j + 1]] = nominal[i]
        i = j + 1
    return out


def bucket_means(buckets: Sequence[int], metric: Sequence[float], q: int) -> list[float | None]:
    buckets, metric = np.asarray(buckets), np.asarray(metric, dtype=np.float64)
    return [float(metric[buckets == b].mean()) if np.any(buckets == b) else None for b in range(1, q + 1)]


@dataclass
class FertilityBin:
    lo: float
    hi: float
    count: int
    mean_a: float | None
    mean_b: float | None

    @property
    def difference(self) -> float | None:
        return None if self.count == 0 else self.mean_a - self.mean_b


def fertility_bins(fertility: Sequence[float], metric_a: Sequence[float], metric_b: Sequence[float],
                   edges: Sequence[float]) -> list[FertilityBin]:
    """Per-bin mean metric of two systems; bins are [lo, hi) except the last, which is closed."""
    f = np.asarray(fertility, dtype=np.float64)
    a = np.asarray(metric_a, dtype=np.float64)
    b = np.asarray(metric_b, dtype=np.float64)
    if not len(f) == len(a) == len(b):
        raise ValueError("fertility and metric vectors must be aligned")
    if len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing with at least two values")
    out = []
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        last = i == len(edges) - 2
        m = (f >= lo) & ((f <= hi) if last else (f < hi))
        n = int(m.sum())
        out.append(FertilityBin(lo, hi, n, float(a[m].mean()) if n else None, float(b[m].mean()) if n else None))
    return out
