import pytest
from hypothesis import given, settings, strategies as st

from mint.tokenizer import (CLS, DEC, EOS, PAD, SPECIAL_TOKENS, UNK, TokenSequence, Vocabulary, build_vocabulary,
                            collate, decode, encode)


@pytest.fixture
def vocab():
    return build_vocabulary(["a b", "a c"], 8)


def test_specials_fixed_order():
    assert (PAD, CLS, DEC, EOS, UNK) == (0, 1, 2, 3, 4)
    v = build_vocabulary(["x"], 6)
    assert v.tokens[:5] == SPECIAL_TOKENS


def test_frequency_order(vocab):
    assert vocab.tokens[5:] == ("a", "b", "c")
    assert vocab.id("a") == 5


def test_specials_only_vocab():
    v = build_vocabulary([""], 6)
    assert len(v) == 5
    assert encode(v, "anything", None, False, 1).ids == (UNK,)


def test_count_then_lexicographic():
    # x appears twice, y once
    v = build_vocabulary(["x x y"], 7)
    assert v.id("x") < v.id("y")
    w = build_vocabulary(["b a"], 7)
    assert w.tokens[5:] == ("a", "b")


def test_max_size_truncates():
    v = build_vocabulary(["a a a b b c"], 7)
    assert v.tokens[5:] == ("a", "b")


def test_empty_corpus():
    with pytest.raises(ValueError, match="empty corpus"):
        build_vocabulary([], 8)


def test_encode_examples(vocab):
    a, b = vocab.id("a"), vocab.id("b")
    s = encode(vocab, "a b", CLS, False, 5)
    assert s.ids == (CLS, a, b, PAD, PAD)
    assert s.valid == (True, True, True, False, False)
    assert encode(vocab, "", DEC, True, 4).ids == (DEC, EOS, PAD, PAD)
    assert encode(vocab, "a a a a", None, False, 2).ids == (a, a)


def test_encode_lowercases_and_maps_oov(vocab):
    assert encode(vocab, "A Zebra", None, False, 3).ids == (vocab.id("a"), UNK, PAD)


def test_decode_examples(vocab):
    a, b = vocab.id("a"), vocab.id("b")
    assert decode(vocab, TokenSequence.from_ids([CLS, a, b], 4)) == "a b"
    assert decode(vocab, [DEC, EOS]) == ""
    with pytest.raises(ValueError, match="unknown id"):
        decode(vocab, [99])


def test_round_trip_sentence():
    v = build_vocabulary(["dog barking loudly"], 10)
    assert decode(v, encode(v, "Dog barking loudly", CLS, True, 10)) == "dog barking loudly"


def test_vocab_file_round_trip(tmp_path, vocab):
    vocab.save(tmp_path / "v.txt")
    lines = (tmp_path / "v.txt").read_text().splitlines()
    assert lines[:5] == list(SPECIAL_TOKENS)
    assert Vocabulary.load(tmp_path / "v.txt") == vocab


def test_token_sequence_rejects_inner_padding():
    with pytest.raises(ValueError, match="suffix"):
        TokenSequence((1, 0, 5), (True, False, True))


def test_collate_trims_to_longest(vocab):
    seqs = [encode(vocab, "a", CLS, False, 6), encode(vocab, "a b c", CLS, False, 6)]
    ids, valid = collate(seqs)
    assert ids.shape == (2, 4)
    assert valid.sum(1).tolist() == [2, 4]


words = st.lists(st.sampled_from(["a", "b", "c", "dog", "Cat"]), max_size=12)


@settings(max_examples=200, deadline=None)
@given(words, st.integers(1, 16), st.sampled_from([None, CLS, DEC]), st.booleans())
def test_padding_is_suffix(ws, max_len, prepend, eos):
    v = build_vocabulary(["a b c dog cat"], 16)
    s = encode(v, " ".join(ws), prepend, eos, max_len)
    assert len(s.ids) == len(s.valid) == max_len
    n = s.n_valid
    assert all(s.valid[:n]) and not any(s.valid[n:])
    assert all(i == PAD for i in s.ids[n:])


@settings(max_examples=200, deadline=None)
@given(words)
def test_round_trip_property(ws):
    v = build_vocabulary(["a b c dog cat"], 16)
    text = " ".join(ws)
    assert decode(v, encode(v, text, CLS, True, len(ws) + 2)) == text.lower()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text(alphabet="abc ", max_size=10), min_size=1, max_size=5))
def test_vocabulary_deterministic(corpus):
    assert build_vocabulary(corpus, 10) == build_vocabulary(list(corpus), 10)
