"""Byte-level BPE tokenizer with reserved special tokens.

Ids 0..4 are the special tokens (pad, mask, bos, eos, parallel_sep), ids 5..260
the 256 raw bytes, and merged tokens follow in the order they were learned.
Special-token strings that occur in raw text are tokenized as ordinary bytes.
"""

from __future__ import annotations

import bisect
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import regex

PAD, MASK, BOS, EOS, PARALLEL_SEP = range(5)
SPECIAL_TOKENS = ("<|pad|>", "<|mask|>", "<|bos|>", "<|eos|>", "<|parallel_sep|>")
SPECIAL_IDS = frozenset(range(len(SPECIAL_TOKENS)))
BYTE_OFFSET = len(SPECIAL_TOKENS)
MIN_VOCAB_SIZE = BYTE_OFFSET + 256 + 1
DEFAULT_VOCAB_SIZE = 1024
UNUSED_TOKEN = "<|unused|>"
VOCAB_FORMAT_VERSION = 1

# GPT-4 style pre-tokenization: merges never cross these chunk boundaries
SPLIT_PATTERN = regex.compile(
    r"""'(?i:[sdmt]|ll|ve|re)|[^\r\n\p{L}\p{N}]?+\p{L}+|\p{N}{1,3}| ?[^\s\p{L}\p{N}]++[\r\n]*|\s*[\r\n]|\s+(?!\S)|\s+"""
)


@dataclass
class Encoding:
    """Token ids with character spans into the source text.

    Spans use a round-up convention for tokens that end inside a multi-byte
    character: the character is credited to the token holding its last byte,
    so spans never overlap and fragments may be empty.
    """

    ids: list[int]
    offsets: list[tuple[int, int]]
    text_len: int = 0

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Vocab:
    vocab_size: int
    merges: list[tuple[int, int]]
    token_bytes: list[bytes] = field(repr=False)
    _ranks: dict[tuple[int, int], int] = field(default_factory=dict, repr=False)
    _cache: dict[str, tuple[list[int], list[int]]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._ranks = {pair: BYTE_OFFSET + 256 + i for i, pair in enumerate(self.merges)}

    @classmethod
    def from_merges(cls, merges: Sequence[tuple[int, int]], vocab_size: int) -> "Vocab":
        if vocab_size < MIN_VOCAB_SIZE:
            raise ValueError(f"vocab_size must be at least {MIN_VOCAB_SIZE} (256 bytes + {BYTE_OFFSET} specials + 1)")
        if BYTE_OFFSET + 256 + len(merges) > vocab_size:
            raise ValueError("more merges than the vocabulary can hold")
        table = [s.encode() for s in SPECIAL_TOKENS] + [bytes([b]) for b in range(256)]
        for left, right in merges:
            table.append(table[left] + table[right])
        return cls(vocab_size, [tuple(m) for m in merges], table)

    @property
    def special_ids(self) -> dict[str, int]:
        return {"pad": PAD, "mask": MASK, "bos": BOS, "eos": EOS, "parallel_sep": PARALLEL_SEP}

    def piece(self, token_id: int) -> bytes:
        """Raw bytes of a non-special token (empty for unused slots)."""
        if token_id < BYTE_OFFSET:
            raise ValueError(f"token {token_id} is special")
        return self.token_bytes[token_id] if token_id < len(self.token_bytes) else b""

    # -- encoding -------------------------------------------------------
    def _encode_chunk(self, chunk: str) -> tuple[list[int], list[int]]:
        hit = self._cache.get(chunk)
        if hit is not None:
            return hit
        ids = [b + BYTE_OFFSET for b in chunk.encode("utf-8")]
        lens = [1] * len(ids)
        ranks = self._ranks
        while len(ids) > 1:
            best, best_rank = -1, None
            for i in range(len(ids) - 1):
                r = ranks.get((ids[i], ids[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best_rank is None:
                break
            pair = (ids[best], ids[best + 1])
            new_ids, new_lens, i = [], [], 0
            while i < len(ids):
                if i < len(ids) - 1 and (ids[i], ids[i + 1]) == pair:
                    new_ids.append(best_rank)
                    new_lens.append(lens[i] + lens[i + 1])
                    i += 2
                else:
                    new_ids.append(ids[i])
                    new_lens.append(lens[i])
                    i += 1
            ids, lens = new_ids, new_lens
        if len(self._cache) < 200_000:
            self._cache[chunk] = (ids, lens)
        return ids, lens

    def encode(self, text: str) -> Encoding:
        ids: list[int] = []
        offsets: list[tuple[int, int]] = []
        for m in SPLIT_PATTERN.finditer(text):
            chunk = m.group()
            chunk_ids, chunk_lens = self._encode_chunk(chunk)
            # byte offset at which each character of the chunk starts, plus the end
            starts = [0]
            for ch in chunk:
                starts.append(starts[-1] + len(ch.encode("utf-8")))
            pos = 0
            for tid, n in zip(chunk_ids, chunk_lens):
                a = bisect.bisect_left(starts, pos)
                b = bisect.bisect_left(starts, pos + n)
                ids.append(tid)
                offsets.append((m.start() + a, m.start() + b))
                pos += n
        return Encoding(ids, offsets, len(text))

    def decode(self, ids: Iterable[int], skip_special: bool = False) -> str:
        out = bytearray()
        for tid in ids:
            tid = int(tid)
            if tid < BYTE_OFFSET:
                if not skip_special:
                    out += SPECIAL_TOKENS[tid].encode()
            elif tid < self.vocab_size:
                out += self.piece(tid)
            else:
                raise ValueError(f"token id {tid} outside vocabulary of size {self.vocab_size}")
        return out.decode("utf-8", errors="replace")

    # -- persistence ----------------------------------------------------
    def save(self, path: str | Path) -> None:
        lines = [
            f"#deskbert-vocab version={VOCAB_FORMAT_VERSION} vocab_size={self.vocab_size} "
            f"specials={','.join(SPECIAL_TOKENS)}"
        ]
        lines.extend(SPECIAL_TOKENS)
        lines.extend(_escape(bytes([b])) for b in range(256))
        for (left, right), tid in zip(self.merges, range(BYTE_OFFSET + 256, self.vocab_size)):
            lines.append(f"{_escape(self.token_bytes[tid])}\t{left} {right}")
        lines.extend([UNUSED_TOKEN] * (self.vocab_size - BYTE_OFFSET - 256 - len(self.merges)))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines or not lines[0].startswith("#deskbert-vocab "):
            raise ValueError(f"{path}: not a vocabulary file")
        header = dict(kv.split("=", 1) for kv in lines[0].split()[1:] if "=" in kv)
        if int(header.get("version", -1)) != VOCAB_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported vocabulary version {header.get('version')}")
        if tuple(header.get("specials", "").split(",")) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: special tokens differ from {SPECIAL_TOKENS}")
        vocab_size = int(header["vocab_size"])
        body = lines[1:]
        if len(body) != vocab_size:
            raise ValueError(f"{path}: header says {vocab_size} tokens, file has {len(body)}")
        merges = []
        for lineno, line in enumerate(body[BYTE_OFFSET + 256:], start=BYTE_OFFSET + 258):
            if line == UNUSED_TOKEN:
                break
            try:
                _, pair = line.split("\t")
                left, right = map(int, pair.split())
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed merge line") from None
            merges.append((left, right))
        return cls.from_merges(merges, vocab_size)


def _escape(b: bytes) -> str:
    return "".join(chr(c) if 0x21 <= c <= 0x7E and c != 0x5C else f"\\x{c:02x}" for c in b)


def train_bpe(corpus: Iterable[str], vocab_size: int = DEFAULT_VOCAB_SIZE) -> Vocab:
    """Learn byte-level BPE merges greedily by pair frequency.

    Ties go to the lexicographically smallest (left bytes, right bytes) pair. If
    the corpus runs out of pairs before the vocabulary is full, the remaining
    ids stay reserved and are never produced by ``encode``.
    """
    if vocab_size < MIN_VOCAB_SIZE:
        raise ValueError(
            f"vocab_size {vocab_size} too small: need at least {MIN_VOCAB_SIZE} "
            f"(256 bytes + {BYTE_OFFSET} special tokens + 1 merge)"
        )
    chunks: Counter[tuple[int, ...]] = Counter()
    for text in corpus:
        for m in SPLIT_PATTERN.finditer(text):
            chunks[tuple(b + BYTE_OFFSET for b in m.group().encode("utf-8"))] += 1
    if not chunks:
        raise ValueError("cannot train a tokenizer on an empty corpus")

    table = [s.encode() for s in SPECIAL_TOKENS] + [bytes([b]) for b in range(256)]
    words = [list(w) for w in chunks]
    freqs = list(chunks.values())
    counts: Counter[tuple[int, int]] = Counter()
    where: dict[tuple[int, int], set[int]] = {}
    for k, (w, f) in enumerate(zip(words, freqs)):
        for pair in zip(w, w[1:]):
            counts[pair] += f
            where.setdefault(pair, set()).add(k)

    merges: list[tuple[int, int]] = []
    while BYTE_OFFSET + 256 + len(merges) < vocab_size and counts:
        top = max(counts.values())
        pair = min((p for p, c in counts.items() if c == top), key=lambda p: (table[p[0]], table[p[1]]))
        new_id = len(table)
        table.append(table[pair[0]] + table[pair[1]])
        merges.append(pair)
        for k in sorted(where.pop(pair, ())):
            w, f = words[k], freqs[k]
            for old in zip(w, w[1:]):
                counts[old] -= f
                if counts[old] <= 0:
                    del counts[old]
            out, i = [], 0
            while i < len(w):
                if i < len(w) - 1 and w[i] == pair[0] and w[i + 1] == pair[1]:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            words[k] = out
            for new in zip(out, out[1:]):
                counts[new] += f
                where.setdefault(new, set()).add(k)
    return Vocab.from_merges(merges, vocab_size)


def encode(text: str, vocab: Vocab) -> Encoding:
    return vocab.encode(text)


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    return vocab.decode(ids)


def _touches(token: tuple[int, int], span: tuple[int, int]) -> bool:
    a, b = token
    s, e = span
    if a == b:
        # zero-width fragment of a multi-byte character ending at position a
        return s < a <= e
    return a < e and b > s


def tokens_in_span(encoding: Encoding, span: tuple[int, int]) -> list[int]:
    """Indices of the tokens whose offsets intersect a character span."""
    s, e = span
    if not (0 <= s < e <= encoding.text_len):
        raise ValueError(f"span {span} outside text of length {encoding.text_len}")
    return [i for i, off in enumerate(encoding.offsets) if _touches(off, span)]


def fertility(encoding: Encoding, word_spans: Sequence[tuple[int, int]]) -> list[float]:
    """Number of tokens intersecting each span; a straddling token counts for both."""
    return [float(len(tokens_in_span(encoding, span))) for span in word_spans]


def mean_fertility(encoding: Encoding, word_spans: Sequence[tuple[int, int]]) -> float:
    values = fertility(encoding, word_spans)
    if not values:
        raise ValueError("no spans given")
    return sum(values) / len(values)
