import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskbert.tokenizer import (BYTE_OFFSET, MIN_VOCAB_SIZE, SPECIAL_TOKENS, Vocab, decode, encode, fertility,
                                mean_fertility, tokens_in_span, train_bpe)

CORPUS = ["the cat sat on the mat", "le chat est sur le tapis", "die Katze sitzt auf der Matte",
          "naïve café – 東京 😀 emoji"] * 5


@pytest.fixture(scope="module")
def vocab():
    return train_bpe(CORPUS, vocab_size=320)


def test_special_ids_fixed(vocab):
    assert vocab.special_ids == {"pad": 0, "mask": 1, "bos": 2, "eos": 3, "parallel_sep": 4}
    assert BYTE_OFFSET == len(SPECIAL_TOKENS) == 5


def test_first_merge_is_aa():
    v = train_bpe(["aaaa aaaa"], vocab_size=MIN_VOCAB_SIZE)
    a = ord("a") + BYTE_OFFSET
    assert v.merges == [(a, a)]
    assert v.piece(BYTE_OFFSET + 256) == b"aa"


def test_merge_ranking_by_frequency():
    v = train_bpe(["ab ab ab cd"], vocab_size=MIN_VOCAB_SIZE + 1)
    assert v.piece(v.merges[0][0]) + v.piece(v.merges[0][1]) == b"ab"


def test_vocab_floor_and_empty_corpus():
    with pytest.raises(ValueError, match="too small"):
        train_bpe(["aaaa aaaa"], vocab_size=260)
    with pytest.raises(ValueError, match="empty"):
        train_bpe([], vocab_size=300)


def test_exhausted_corpus_reserves_slots(tmp_path):
    v = train_bpe(["ab"], vocab_size=300)
    assert len(v.merges) == 1 and v.vocab_size == 300
    ids = encode("ab ab ba", v).ids
    assert max(ids) < BYTE_OFFSET + 257
    v.save(tmp_path / "v.txt")
    assert (tmp_path / "v.txt").read_text().count("<|unused|>") == 300 - 262


def test_empty_string(vocab):
    enc = encode("", vocab)
    assert enc.ids == [] and enc.offsets == []


def test_every_byte_encodable(vocab):
    text = bytes(range(256)).decode("latin-1")
    assert decode(encode(text, vocab).ids, vocab) == text


def test_special_strings_are_plain_text(vocab):
    ids = encode("<|mask|> <|pad|>", vocab).ids
    assert all(i >= BYTE_OFFSET for i in ids)
    assert decode(ids, vocab) == "<|mask|> <|pad|>"


def test_merges_compress(vocab):
    text = "the cat sat on the mat"
    assert len(encode(text, vocab).ids) < len(text.encode())


@settings(max_examples=1000, deadline=None)
@given(st.text(max_size=40))
def test_round_trip(text):
    v = _shared_vocab()
    assert decode(encode(text, v).ids, v) == text


_CACHE = {}


def _shared_vocab():
    if "v" not in _CACHE:
        _CACHE["v"] = train_bpe(CORPUS, vocab_size=320)
    return _CACHE["v"]


def test_offsets_cover_text(vocab):
    text = "naïve café 東京"
    enc = encode(text, vocab)
    assert enc.offsets[0][0] == 0 and enc.offsets[-1][1] == len(text)
    for (a, b), (c, _) in zip(enc.offsets, enc.offsets[1:]):
        assert a <= b == c


def test_save_load_identical(vocab, tmp_path):
    vocab.save(tmp_path / "v.txt")
    loaded = Vocab.load(tmp_path / "v.txt")
    assert loaded.merges == vocab.merges and loaded.vocab_size == vocab.vocab_size
    for text in CORPUS[:4]:
        assert encode(text, loaded).ids == encode(text, vocab).ids


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("hello\n")
    with pytest.raises(ValueError, match="not a vocabulary"):
        Vocab.load(p)


def test_decode_rejects_out_of_range(vocab):
    with pytest.raises(ValueError):
        decode([vocab.vocab_size], vocab)


class TestFertility:
    def test_single_token_word(self):
        v = train_bpe(["hello hello hello"], vocab_size=MIN_VOCAB_SIZE + 4)
        enc = encode("hello", v)
        assert len(enc.ids) == 1
        assert fertility(enc, [(0, 5)]) == [1.0]

    def test_byte_level_word(self):
        v = train_bpe(["zz"], vocab_size=MIN_VOCAB_SIZE)
        enc = encode("abc", v)
        assert fertility(enc, [(0, 3)]) == [3.0]

    def test_counting_oracle(self, vocab):
        text = "le chat sat sur la mat"
        enc = encode(text, vocab)
        spans, pos = [], 0
        for w in text.split(" "):
            spans.append((pos, pos + len(w)))
            pos += len(w) + 1
        # oracle: a token touches a word if their character ranges overlap
        oracle = [sum(1 for a, b in enc.offsets if a < e and b > s) for s, e in spans]
        assert fertility(enc, spans) == [float(x) for x in oracle]
        assert mean_fertility(enc, spans) == pytest.approx(np.mean(oracle))

    def test_span_validation(self, vocab):
        enc = encode("abc", vocab)
        with pytest.raises(ValueError):
            tokens_in_span(enc, (2, 9))
        with pytest.raises(ValueError):
            mean_fertility(enc, [])
