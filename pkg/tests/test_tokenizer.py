import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lkt.tokenizer import (CLS, CORRECT, MASK, PAD, SPECIAL_TOKENS, UNK, Vocabulary, build_vocab,
                           tokenize)


def test_reserved_ids():
    v = build_vocab(["hello"])
    assert v.tokens[:7] == list(SPECIAL_TOKENS)
    assert v.encode("[CLS]") == [1]
    assert v.encode("[CORRECT] [MASK]") == [5, 3]


def test_frequency_then_alphabetical():
    v = build_vocab(["a a b"])
    assert v.tokens[7:] == ["a", "b"]
    v = build_vocab(["cat ant dog dog"], max_size=9)
    assert v.tokens[7:] == ["dog", "ant"]


def test_punctuation_split_and_lowercase():
    assert build_vocab(["x? x"]).tokens[7:] == ["x", "?"]
    assert tokenize("What IS a Set?") == ["what", "is", "a", "set", "?"]


def test_unknown_word_is_one_unk():
    v = build_vocab(["sets"])
    assert v.encode("zzzz-never-seen") == [UNK]


def test_min_freq():
    v = build_vocab(["a a b"], min_freq=2)
    assert "b" not in v and "a" in v


def test_decode():
    v = build_vocab(["set of odd"])
    assert v.decode([1, 2]) == "[CLS] [EOS]"
    assert v.decode(v.encode("set of odd")) == "set of odd"
    with pytest.raises(IndexError):
        v.decode([9999])


def test_empty_corpus_warns(caplog):
    v = build_vocab([])
    assert len(v) == 7
    assert "empty corpus" in caplog.text


def test_bad_arguments():
    with pytest.raises(ValueError):
        build_vocab(["a"], min_freq=0)
    with pytest.raises(ValueError):
        build_vocab(["a"], max_size=7)


def test_save_load_round_trip(tmp_path):
    v = build_vocab(["the cat, the dog."])
    v.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text(encoding="utf-8").splitlines()
    assert lines[:7] == list(SPECIAL_TOKENS)
    assert Vocabulary.load(tmp_path / "vocab.txt") == v


def test_load_rejects_missing_reserved(tmp_path):
    (tmp_path / "v.txt").write_text("a\nb\n")
    with pytest.raises(ValueError):
        Vocabulary.load(tmp_path / "v.txt")


words = st.text(alphabet="abcdefgh-?,.", min_size=1, max_size=30)


@settings(max_examples=100, deadline=None)
@given(st.lists(words, min_size=1, max_size=5))
def test_in_vocab_round_trip(corpus):
    v = build_vocab(corpus)
    for line in corpus:
        toks = tokenize(line)
        ids = v.encode(line)
        assert v.decode(ids) == " ".join(toks)
        assert PAD not in ids


@settings(max_examples=50, deadline=None)
@given(st.lists(words, max_size=5))
def test_build_is_deterministic_and_dense(corpus):
    a, b = build_vocab(corpus), build_vocab(list(corpus))
    assert a == b
    assert sorted(a.index.values()) == list(range(len(a)))


@settings(max_examples=50, deadline=None)
@given(st.text(max_size=60))
def test_encode_never_emits_pad(text):
    v = build_vocab(["some words here"])
    ids = v.encode(text)
    assert PAD not in ids
    assert all(0 < i < len(v) for i in ids)


def test_special_tokens_are_not_split_inside_text():
    v = build_vocab(["[CLS] sets what is a set [CORRECT] [EOS]"])
    assert v.encode("sets [MASK]") == [v.index["sets"], MASK]
    assert CLS not in v.encode("cls") and CORRECT not in v.encode("correct")
