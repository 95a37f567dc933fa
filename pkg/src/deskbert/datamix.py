"""Corpus ingestion, mixture sampling, parallel pairs, packing and cropping."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
import yaml

from .tokenizer import BOS, EOS, PAD, PARALLEL_SEP, Vocab

KINDS = ("mono", "parallel-pair", "code", "math", "instruction")
PRETRAIN_SEQ_LEN = 2048
CROP_MIN_LEN = 12
CROP_MAX_LEN = 8192
ANNEAL_MIN_QUALITY = 3


class CorpusFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class PoolExhausted(RuntimeError):
    pass


@dataclass
class Document:
    text: str
    lang: str
    source: str
    quality: int | None = None
    kind: str = "mono"
    src: str | None = None
    tgt: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown document kind {self.kind!r}")
        if self.kind == "parallel-pair" and (not self.src or self.tgt is None):
            raise ValueError("parallel-pair documents need a non-empty src and a tgt")
        if self.quality is not None and self.quality not in (1, 2, 3, 4):
            raise ValueError(f"quality bucket must be 1-4, got {self.quality}")


def parse_record(rec: Mapping) -> Document:
    """Build a Document from one decoded corpus record; raises ValueError on schema problems."""
    if not isinstance(rec, Mapping):
        raise ValueError("record is not an object")
    kind = rec.get("kind", "mono")
    for key in ("lang", "source"):
        if not isinstance(rec.get(key), str):
            raise ValueError(f"missing or non-string field {key!r}")
    quality = rec.get("quality")
    if quality is not None and (isinstance(quality, bool) or not isinstance(quality, int)):
        raise ValueError("quality must be an integer 1-4")
    known = {"text", "lang", "source", "quality", "kind", "src", "tgt"}
    extra = {k: v for k, v in rec.items() if k not in known}
    if kind == "parallel-pair":
        src, tgt = rec.get("src"), rec.get("tgt")
        if not isinstance(src, str) or not isinstance(tgt, str):
            raise ValueError("parallel-pair records need string fields 'src' and 'tgt'")
        return Document(text=f"{src}\n{tgt}", lang=rec["lang"], source=rec["source"], quality=quality,
                        kind=kind, src=src, tgt=tgt, extra=extra)
    if not isinstance(rec.get("text"), str):
        raise ValueError("missing or non-string field 'text'")
    return Document(text=rec["text"], lang=rec["lang"], source=rec["source"], quality=quality, kind=kind, extra=extra)


def ingest(path: str | Path) -> Iterator[Document]:
    """Stream documents from a line-delimited JSON corpus file.

    Blank lines are skipped. The first malformed record raises CorpusFormatError
    carrying its 1-based line number.
    """
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(path, lineno, f"invalid JSON ({exc.msg})") from None
            try:
                yield parse_record(rec)
            except ValueError as exc:
                raise CorpusFormatError(path, lineno, str(exc)) from None


def make_parallel(src: str, tgt: str, vocab: Vocab) -> list[int]:
    if not src or not tgt:
        raise ValueError("both sides of a parallel pair must be non-empty")
    return vocab.encode(src).ids + [PARALLEL_SEP] + vocab.encode(tgt).ids


def doc_tokens(doc: Document, vocab: Vocab) -> list[int]:
    if doc.kind == "parallel-pair":
        return make_parallel(doc.src, doc.tgt, vocab)
    return vocab.encode(doc.text).ids


def quality_filter(docs: Iterable[Document], min_bucket: int, unlabeled_pass: bool = True) -> Iterator[Document]:
    if min_bucket not in (1, 2, 3, 4):
        raise ValueError(f"quality threshold must be 1-4, got {min_bucket}")
    for doc in docs:
        if doc.quality is None:
            if unlabeled_pass:
                yield doc
        elif doc.quality >= min_bucket:
            yield doc


# -- mixture specifications ---------------------------------------------

SELECTOR_KEYS = ("source", "lang", "kind", "min_quality")


@dataclass(frozen=True)
class MixEntry:
    match: Mapping[str, object]
    weight: float

    def matches(self, doc: Document, unlabeled_pass: bool = True) -> bool:
        for key, want in self.match.items():
            if key == "min_quality":
                if doc.quality is None:
                    if not unlabeled_pass:
                        return False
                elif doc.quality < want:
                    return False
            elif getattr(doc, key) != want:
                return False
        return True

    def label(self) -> str:
        return ",".join(f"{k}={v}" for k, v in self.match.items())


@dataclass
class MixSpec:
    name: str
    entries: list[MixEntry]

    def __post_init__(self):
        problems = []
        for i, e in enumerate(self.entries):
            bad = set(e.match) - set(SELECTOR_KEYS)
            if bad:
                problems.append(f"entry {i}: unknown selector keys {sorted(bad)}")
            if not e.match:
                problems.append(f"entry {i}: empty selector")
            if not e.weight > 0:
                problems.append(f"entry {i}: weight must be positive")
        total = math.fsum(e.weight for e in self.entries)
        if not self.entries:
            problems.append("mix has no entries")
        elif abs(total - 1.0) > 1e-9:
            problems.append(f"weights sum to {total!r}, expected 1")
        if problems:
            raise ValueError(f"mix {self.name!r}: " + "; ".join(problems))

    @property
    def weights(self) -> np.ndarray:
        return np.array([e.weight for e in self.entries])

    @classmethod
    def from_weights(cls, name: str, entries: Sequence[tuple[Mapping, float]]) -> "MixSpec":
        """Build a mix from unnormalized weights (token counts, percentages)."""
        total = math.fsum(w for _, w in entries)
        normed = [w / total for _, w in entries]
        # push rounding residue into the largest entry so the sum is exactly 1
        big = int(np.argmax(normed))
        normed[big] = 1.0 - math.fsum(w for i, w in enumerate(normed) if i != big)
        return cls(name, [MixEntry(dict(m), w) for (m, _), w in zip(entries, normed)])

    @classmethod
    def load(cls, path: str | Path) -> "MixSpec":
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if not isinstance(raw, dict) or not isinstance(raw.get("entries"), list):
            raise ValueError(f"{path}: mix file needs an 'entries' list")
        unknown = set(raw) - {"name", "entries"}
        if unknown:
            raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
        entries = []
        for i, e in enumerate(raw["entries"]):
            if not isinstance(e, dict) or set(e) != {"match", "weight"} or not isinstance(e["match"], dict):
                raise ValueError(f"{path}: entry {i} must have exactly 'match' (mapping) and 'weight'")
            entries.append(MixEntry(dict(e["match"]), float(e["weight"])))
        return cls(str(raw.get("name", Path(path).stem)), entries)

    def save(self, path: str | Path) -> None:
        data = {"name": self.name, "entries": [{"match": dict(e.match), "weight": e.weight} for e in self.entries]}
        Path(path).write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")

    def check_sources(self, docs: Sequence[Document], unlabeled_pass: bool = True) -> None:
        dead = [e.label() for e in self.entries if not any(e.matches(d, unlabeled_pass) for d in docs)]
        if dead:
            raise ValueError(f"mix {self.name!r}: selectors match no documents: {'; '.join(dead)}")


# Pre-training sources with token counts in millions.
PRETRAIN_TOKENS_M: list[tuple[str, str, str, int]] = [
    ("fineweb", "en", "mono", 2_002_327),
    ("culturax", "fr", "mono", 295_113),
    ("culturax", "de", "mono", 291_514),
    ("culturax", "es", "mono", 290_489),
    ("culturax", "zh", "mono", 238_467),
    ("culturax", "it", "mono", 120_128),
    ("culturax", "ru", "mono", 116_797),
    ("culturax", "pt", "mono", 112_321),
    ("culturax", "ja", "mono", 112_242),
    ("culturax", "pl", "mono", 111_659),
    ("culturax", "tr", "mono", 53_126),
    ("culturax", "ar", "mono", 52_413),
    ("culturax", "vi", "mono", 50_661),
    ("culturax", "nl", "mono", 50_646),
    ("culturax", "hi", "mono", 25_544),
    ("eurollm-parallel", "es-en", "parallel-pair", 50_613),
    ("eurollm-parallel", "fr-en", "parallel-pair", 44_891),
    ("eurollm-parallel", "de-en", "parallel-pair", 30_541),
    ("eurollm-parallel", "it-en", "parallel-pair", 18_702),
    ("eurollm-parallel", "ru-en", "parallel-pair", 13_808),
    ("eurollm-parallel", "nl-en", "parallel-pair", 12_666),
    ("eurollm-parallel", "pl-en", "parallel-pair", 7_280),
    ("eurollm-parallel", "ar-en", "parallel-pair", 6_414),
    ("eurollm-parallel", "zh-en", "parallel-pair", 6_206),
    ("eurollm-parallel", "cs-en", "parallel-pair", 5_458),
    ("eurollm-parallel", "hu-en", "parallel-pair", 4_599),
    ("eurollm-parallel", "vi-en", "parallel-pair", 3_395),
    ("eurollm-parallel", "tr-en", "parallel-pair", 2_975),
    ("eurollm-parallel", "ja-en", "parallel-pair", 2_687),
    ("eurollm-parallel", "hi-en", "parallel-pair", 1_136),
    ("proof-pile-2", "arxiv", "math", 121_503),
    ("proof-pile-2", "open-web-math", "math", 54_168),
    ("proof-pile-2", "algebraic-stack", "math", 35_985),
    ("the-stack-v2", "c++", "code", 120_085),
    ("the-stack-v2", "sql", "code", 75_348),
    ("the-stack-v2", "c", "code", 59_404),
    ("the-stack-v2", "javascript", "code", 58_440),
    ("the-stack-v2", "php", "code", 25_620),
    ("the-stack-v2", "c#", "code", 24_842),
    ("the-stack-v2", "python", "code", 21_521),
    ("the-stack-v2", "java", "code", 20_950),
    ("the-stack-v2", "go", "code", 14_766),
    ("the-stack-v2", "typescript", "code", 11_307),
    ("the-stack-v2", "html", "code", 7_962),
    ("the-stack-v2", "lua", "code", 7_733),
    ("the-stack-v2", "ruby", "code", 5_524),
    ("the-stack-v2", "vue", "code", 5_411),
    ("the-stack-v2", "r", "code", 5_287),
    ("the-stack-v2", "shell", "code", 4_793),
    ("the-stack-v2", "swift", "code", 3_766),
    ("the-stack-v2", "restructuredtext", "code", 3_761),
    ("the-stack-v2", "json", "code", 3_586),
    ("the-stack-v2", "rust", "code", 3_152),
    ("the-stack-v2", "yaml", "code", 2_716),
    ("the-stack-v2", "dart", "code", 2_678),
    ("the-stack-v2", "rmarkdown", "code", 2_058),
    ("the-stack-v2", "hcl", "code", 1_423),
    ("the-stack-v2", "powershell", "code", 1_027),
    ("the-stack-v2", "vba", "code", 1_027),
    ("the-stack-v2", "asciidoc", "code", 970),
    ("the-stack-v2", "groovy", "code", 540),
    ("the-stack-v2", "cuda", "code", 406),
    ("the-stack-v2", "dockerfile", "code", 281),
    ("the-stack-v2", "cython", "code", 103),
    ("the-stack-v2", "cobol", "code", 96),
    ("the-stack-v2", "graphql", "code", 83),
    ("the-stack-v2", "http", "code", 82),
    ("the-stack-v2", "abap", "code", 71),
    ("the-stack-v2", "rdoc", "code", 16),
    ("the-stack-v2", "metal", "code", 8),
    ("the-stack-v2", "applescript", "code", 7),
]


def reference_pretrain_mix() -> MixSpec:
    """Full pre-training mix, weights proportional to per-source token counts."""
    return MixSpec.from_weights(
        "pretrain-reference",
        [({"source": s, "lang": lang}, tokens) for s, lang, _, tokens in PRETRAIN_TOKENS_M],
    )


ANNEAL_LANGS = ("en", "fr", "de", "nl", "hi", "it", "ja", "pl", "pt", "ru", "es", "ar", "zh", "tr")
ANNEAL_COLUMNS = ANNEAL_LANGS + ("code", "math", "parallel", "instruction")

# Annealing ablation mixes, percentages per column of ANNEAL_COLUMNS.
ANNEAL_ABLATIONS: dict[str, tuple[float, ...]] = {
    "reference": (46.3, 5.8, 5.7, 1.0, 0.3, 1.5, 0.8, 1.0, 1.4, 1.0, 5.7, 0.4, 4.7, 1.0, 8.7, 8.2, 5.2, 1.2),
    "english-26": (26.0, 6.0, 6.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 6.0, 4.0, 6.0, 4.0, 4.0, 4.0, 5.0, 1.0),
    "english-17": (17.0, 6.0, 6.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 6.0, 5.0, 6.0, 5.0, 4.0, 4.0, 5.0, 1.0),
    "math-4": (46.3, 5.8, 5.7, 1.0, 0.3, 1.5, 0.8, 1.0, 1.4, 1.0, 5.7, 0.4, 4.7, 1.0, 8.7, 4.0, 5.2, 1.2),
    "math-2": (46.3, 5.8, 5.7, 1.0, 0.3, 1.5, 0.8, 1.0, 1.4, 1.0, 5.7, 0.4, 4.7, 1.0, 8.7, 2.0, 5.2, 1.2),
    "code-8": (46.3, 5.8, 5.7, 1.0, 0.3, 1.5, 0.8, 1.0, 1.4, 1.0, 5.7, 0.4, 4.7, 1.0, 6.0, 8.2, 5.2, 1.2),
    "code-4": (46.3, 5.8, 5.7, 1.0, 0.3, 1.5, 0.8, 1.0, 1.4, 1.0, 5.7, 0.4, 4.7, 1.0, 4.0, 8.2, 5.2, 1.2),
    "code-2": (46.3, 5.8, 5.7, 1.0, 0.3, 1.5, 0.8, 1.0, 1.4, 1.0, 5.7, 0.4, 4.7, 1.0, 2.0, 8.2, 5.2, 1.2),
    "parallel-8": (46.3, 5.8, 5.7, 1.0, 0.3, 1.5, 0.8, 1.0, 1.4, 1.0, 5.7, 0.4, 4.7, 1.0, 8.7, 8.2, 8.0, 1.2),
    "ift-0": (46.3, 5.8, 5.7, 1.0, 0.3, 1.5, 0.8, 1.0, 1.4, 1.0, 5.7, 0.4, 4.7, 1.0, 8.7, 8.2, 5.2, 0.0),
}


def _column_selector(column: str, min_quality: int | None) -> dict:
    if column in ANNEAL_LANGS:
        sel: dict = {"kind": "mono", "lang": column}
    else:
        sel = {"kind": {"parallel": "parallel-pair"}.get(column, column)}
    if min_quality is not None:
        sel["min_quality"] = min_quality
    return sel


def anneal_mix(percentages: Mapping[str, float] | Sequence[float], name: str = "anneal",
               min_quality: int | None = ANNEAL_MIN_QUALITY) -> MixSpec:
    if not isinstance(percentages, Mapping):
        percentages = dict(zip(ANNEAL_COLUMNS, percentages))
    entries = [(_column_selector(c, min_quality), w) for c, w in percentages.items() if w > 0]
    return MixSpec.from_weights(name, entries)


def ablation_mix(name: str, min_quality: int | None = None) -> MixSpec:
    return anneal_mix(ANNEAL_ABLATIONS[name], name=f"ablation-{name}", min_quality=min_quality)


def final_anneal_mix() -> MixSpec:
    """English 26%, math 6%, code 4%, parallel 6%, no instructions.

    The other 58% goes to the remaining languages in the proportions of the
    "english-26" ablation row.
    """
    row = dict(zip(ANNEAL_COLUMNS, ANNEAL_ABLATIONS["english-26"]))
    others = {lang: row[lang] for lang in ANNEAL_LANGS if lang != "en"}
    scale = 58.0 / sum(others.values())
    pct = {"en": 26.0, **{k: v * scale for k, v in others.items()}, "code": 4.0, "math": 6.0, "parallel": 6.0}
    return anneal_mix(pct, name="anneal-final")


# -- sampling -----------------------------------------------------------

class MixSampler:
    """Draws documents from per-entry pools according to mixture weights.

    ``weighting="tokens"`` treats weights as token-mass targets: entry ``e`` is
    drawn with probability proportional to ``weight / mean_length(e)``.
    ``weighting="documents"`` draws entries with probability equal to weight.
    A pool is read in file order on its first pass and reshuffled on every
    later pass.
    """

    def __init__(
        self,
        spec: MixSpec,
        docs: Sequence[Document] | None = None,
        *,
        pools: Sequence[Sequence[Document]] | None = None,
        seed: int = 0,
        weighting: str = "tokens",
        length_fn: Callable[[Document], int] | None = None,
        recycle: bool = True,
        reshuffle: bool = True,
        unlabeled_pass: bool = True,
    ):
        if weighting not in ("tokens", "documents"):
            raise ValueError(f"unknown weighting {weighting!r}")
        if pools is None:
            if docs is None:
                raise ValueError("need documents or explicit pools")
            docs = list(docs)
            pools = [[d for d in docs if e.matches(d, unlabeled_pass)] for e in spec.entries]
        if len(pools) != len(spec.entries):
            raise ValueError(f"{len(pools)} pools for {len(spec.entries)} mix entries")
        empty = [spec.entries[i].label() for i, p in enumerate(pools) if not p]
        if empty:
            raise ValueError(f"mix {spec.name!r}: empty pools for {'; '.join(empty)}")
        self.spec = spec
        self.pools = [list(p) for p in pools]
        self.seed = seed
        self.weighting = weighting
        self.length_fn = length_fn or (lambda d: len(d.text))
        self.recycle = recycle
        self.reshuffle = reshuffle
        self.mean_lengths = np.array([np.mean([max(self.length_fn(d), 1) for d in p]) for p in self.pools])
        w = spec.weights
        p = w / self.mean_lengths if weighting == "tokens" else w
        self.probs = p / p.sum()
        self._cum = np.cumsum(self.probs)
        self._rng = np.random.default_rng(seed)
        self._cursor = [0] * len(self.pools)
        self._epoch = [0] * len(self.pools)
        self._order: list[np.ndarray | None] = [None] * len(self.pools)
        self.draws = np.zeros(len(self.pools), dtype=np.int64)
        self.tokens = np.zeros(len(self.pools), dtype=np.int64)

    def _pool_order(self, e: int) -> np.ndarray | None:
        if self._epoch[e] == 0 or not self.reshuffle:
            return None
        if self._order[e] is None:
            rng = np.random.default_rng([self.seed, e, self._epoch[e]])
            self._order[e] = rng.permutation(len(self.pools[e]))
        return self._order[e]

    def draw(self) -> tuple[int, Document]:
        e = int(np.searchsorted(self._cum, self._rng.random(), side="right"))
        e = min(e, len(self.pools) - 1)
        pool = self.pools[e]
        if self._cursor[e] >= len(pool):
            if not self.recycle:
                raise PoolExhausted(f"pool for {self.spec.entries[e].label()} exhausted")
            self._cursor[e] = 0
            self._epoch[e] += 1
            self._order[e] = None
        order = self._pool_order(e)
        i = self._cursor[e]
        doc = pool[i if order is None else int(order[i])]
        self._cursor[e] += 1
        self.draws[e] += 1
        self.tokens[e] += self.length_fn(doc)
        return e, doc

    def __iter__(self) -> Iterator[Document]:
        while True:
            yield self.draw()[1]

    def report(self) -> list[dict]:
        n, t = max(self.draws.sum(), 1), max(self.tokens.sum(), 1)
        return [
            {
                "entry": e.label(),
                "weight": e.weight,
                "draw_share": self.draws[i] / n,
                "token_share": self.tokens[i] / t,
                "drift": self.tokens[i] / t - e.weight,
            }
            for i, e in enumerate(self.spec.entries)
        ]

    def state_dict(self) -> dict:
        return {
            "rng": self._rng.bit_generator.state,
            "cursor": list(self._cursor),
            "epoch": list(self._epoch),
            "draws": self.draws.tolist(),
            "tokens": self.tokens.tolist(),
        }

    def load_state_dict(self, state: Mapping) -> None:
        self._rng.bit_generator.state = state["rng"]
        self._cursor = list(state["cursor"])
        self._epoch = list(state["epoch"])
        self._order = [None] * len(self.pools)
        self.draws = np.array(state["draws"], dtype=np.int64)
        self.tokens = np.array(state["tokens"], dtype=np.int64)


def sample_mix(spec: MixSpec, pools: Sequence[Sequence[Document]], rng_seed: int = 0, **kwargs) -> Iterator[Document]:
    return iter(MixSampler(spec, pools=pools, seed=rng_seed, **kwargs))


# -- packing and cropping ---------------------------------------------

@dataclass
class PackedBatch:
    ids: np.ndarray
    pad_mask: np.ndarray
    boundaries: list[list[int]]

    @property
    def n_tokens(self) -> int:
        return int((~self.pad_mask).sum())


class Packer:
    """Concatenates documents (``[BOS] doc [EOS]``) and cuts exact-length rows."""

    def __init__(self, length: int, add_bos: bool = True):
        if length < 2:
            raise ValueError("packed length must be at least 2")
        self.length = length
        self.add_bos = add_bos
        self.buffer: list[int] = []
        self.starts: list[int] = []

    def feed(self, tokens: Sequence[int]) -> list[tuple[np.ndarray, list[int]]]:
        self.starts.append(len(self.buffer))
        if self.add_bos:
            self.buffer.append(BOS)
        self.buffer.extend(int(t) for t in tokens)
        self.buffer.append(EOS)
        rows = []
        L = self.length
        while len(self.buffer) >= L:
            row = np.array(self.buffer[:L], dtype=np.int64)
            rows.append((row, [s for s in self.starts if s < L]))
            self.buffer = self.buffer[L:]
            self.starts = [s - L for s in self.starts if s >= L]
        return rows

    def flush(self) -> tuple[np.ndarray, int, list[int]] | None:
        if not self.buffer:
            return None
        n = len(self.buffer)
        row = np.full(self.length, PAD, dtype=np.int64)
        row[:n] = self.buffer
        out = (row, n, list(self.starts))
        self.buffer, self.starts = [], []
        return out

    def state_dict(self) -> dict:
        return {"buffer": list(self.buffer), "starts": list(self.starts)}

    def load_state_dict(self, state: Mapping) -> None:
        self.buffer = list(state["buffer"])
        self.starts = list(state["starts"])


def pack(docs: Iterable[Sequence[int]], length: int = PRETRAIN_SEQ_LEN, batch_size: int = 1,
         add_bos: bool = True) -> Iterator[PackedBatch]:
    """Pack token sequences into [batch_size, length] batches.

    Only the very last row may contain padding.
    """
    packer = Packer(length, add_bos)
    rows: list[tuple[np.ndarray, int, list[int]]] = []

    def emit():
        ids = np.stack([r for r, _, _ in rows])
        pad = np.arange(length)[None, :] >= np.array([n for _, n, _ in rows])[:, None]
        return PackedBatch(ids, pad, [b for _, _, b in rows])

    for doc in docs:
        for row, bounds in packer.feed(doc):
            rows.append((row, length, bounds))
            if len(rows) == batch_size:
                yield emit()
                rows = []
    tail = packer.flush()
    if tail is not None:
        rows.append(tail)
    if rows:
        yield emit()


def random_crop(tokens: Sequence[int], rng: np.random.Generator, min_len: int = CROP_MIN_LEN,
                max_len: int = CROP_MAX_LEN, distribution: str = "uniform") -> np.ndarray:
    """Contiguous crop whose length is drawn from [min_len, min(max_len, len)].

    Documents shorter than ``min_len`` come back whole.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.shape[0]
    if n < 1:
        raise ValueError("cannot crop an empty document")
    if min_len < 1 or max_len < min_len:
        raise ValueError(f"invalid crop bounds [{min_len}, {max_len}]")
    if n < min_len:
        return tokens.copy()
    hi = min(max_len, n)
    if distribution == "uniform":
        length = int(rng.integers(min_len, hi + 1))
    elif distribution == "log-uniform":
        length = int(np.floor(np.exp(rng.uniform(np.log(min_len), np.log(hi + 1)))))
        length = min(max(length, min_len), hi)
    else:
        raise ValueError(f"unknown crop distribution {distribution!r}")
    start = int(rng.integers(0, n - length + 1))
    return tokens[start:start + length].copy()


# -- batch sources for the trainer --------------------------------------

def _pad_rows(rows: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    pad = np.ones((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
        pad[i, :len(r)] = False
    return ids, pad


class ArraySource:
    """Fixed set of sequences; each batch samples rows without replacement."""

    def __init__(self, rows, batch_size: int, seed: int = 0, pad_mask=None):
        self.rows = np.asarray(rows, dtype=np.int64)
        self.pad = np.zeros(self.rows.shape, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
        self.batch_size = min(batch_size, len(self.rows))
        self.seed = seed
        self.calls = 0

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, self.calls])
        idx = np.sort(rng.choice(len(self.rows), self.batch_size, replace=False))
        self.calls += 1
        return self.rows[idx], self.pad[idx]

    def state_dict(self) -> dict:
        return {"calls": self.calls}

    def load_state_dict(self, state: Mapping) -> None:
        self.calls = int(state["calls"])


class PackedSource:
    """Mixture-sampled documents packed into full-length rows."""

    def __init__(self, sampler: MixSampler, vocab: Vocab, seq_len: int, batch_size: int, add_bos: bool = True):
        self.sampler = sampler
        self.vocab = vocab
        self.batch_size = batch_size
        self.packer = Packer(seq_len, add_bos)
        self._ready: list[np.ndarray] = []

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        while len(self._ready) < self.batch_size:
            _, doc = self.sampler.draw()
            self._ready.extend(row for row, _ in self.packer.feed(doc_tokens(doc, self.vocab)))
        rows, self._ready = self._ready[:self.batch_size], self._ready[self.batch_size:]
        ids = np.stack(rows)
        return ids, np.zeros(ids.shape, dtype=bool)

    def state_dict(self) -> dict:
        return {"sampler": self.sampler.state_dict(), "packer": self.packer.state_dict(),
                "ready": [r.tolist() for r in self._ready]}

    def load_state_dict(self, state: Mapping) -> None:
        self.sampler.load_state_dict(state["sampler"])
        self.packer.load_state_dict(state["packer"])
        self._ready = [np.array(r, dtype=np.int64) for r in state["ready"]]


class CroppedSource:
    """Mixture-sampled documents, each randomly cropped, padded per batch."""

    def __init__(self, sampler: MixSampler, vocab: Vocab, batch_size: int, max_len: int = CROP_MAX_LEN,
                 min_len: int = CROP_MIN_LEN, seed: int = 0, add_bos: bool = True, distribution: str = "uniform"):
        self.sampler = sampler
        self.vocab = vocab
        self.batch_size = batch_size
        self.add_bos = add_bos
        self.max_len = max_len
        self.min_len = min_len
        self.distribution = distribution
        self.rng = np.random.default_rng([seed, 1])

    def next_row(self) -> np.ndarray:
        _, doc = self.sampler.draw()
        budget = self.max_len - (1 if self.add_bos else 0)
        crop = random_crop(doc_tokens(doc, self.vocab) or [EOS], self.rng, min(self.min_len, budget), budget,
                           self.distribution)
        return np.concatenate([[BOS], crop]) if self.add_bos else crop

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        return _pad_rows([self.next_row() for _ in range(self.batch_size)])

    def state_dict(self) -> dict:
        return {"sampler": self.sampler.state_dict(), "rng": self.rng.bit_generator.state}

    def load_state_dict(self, state: Mapping) -> None:
        self.sampler.load_state_dict(state["sampler"])
        self.rng.bit_generator.state = state["rng"]
