from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossalign.data import (
    CIPHER_SUFFIX,
    EOS_ID,
    GO_ID,
    PAD_ID,
    SPECIALS,
    UNK_ID,
    CipherKey,
    Corpus,
    SentenceBatch,
    Vocabulary,
    apply_cipher,
    build_vocab,
    empirical_bigram_matrix,
    gen_cipher_key,
    load_and_filter,
    shuffle_words,
    split_disjoint,
    stationary_distribution,
    synth_bigram_corpus,
    synth_sentiment_corpora,
    token_names,
    write_corpus,
)
from crossalign.errors import ContractError, DataError


def test_build_vocab_orders_by_count_then_token():
    v = build_vocab([["b", "a", "c"], ["a", "c"], ["c"]], min_count=1)
    assert v.tokens == list(SPECIALS) + ["c", "a", "b"]
    assert build_vocab([["b", "a", "a"]], min_count=2).content == ["a"]


def test_encode_decode_roundtrip_and_unk():
    v = build_vocab([["x", "y"]], min_count=1)
    ids = v.encode(["x", "zz", "y"])
    assert ids[1] == UNK_ID
    assert v.decode(ids + [EOS_ID, v.id("x")]) == ["x", "<unk>", "y"]


def test_vocab_save_load_and_hash(tmp_path):
    v = build_vocab([["x", "y", "y"]], min_count=1)
    v.save(tmp_path / "v.txt")
    w = Vocabulary.load(tmp_path / "v.txt")
    assert w.tokens == v.tokens and w.content_hash() == v.content_hash()
    assert build_vocab([["x", "q"]], 1).content_hash() != v.content_hash()
    with pytest.raises(ContractError):
        Vocabulary(["a", "b"])


def test_load_and_filter(tmp_path):
    p = tmp_path / "c.txt"
    p.write_bytes(b"a b\r\n\r\n" + b" ".join([b"w"] * 16) + b"\nc d e\n")
    c = load_and_filter(p, max_len=15)
    assert c.sentences == [["a", "b"], ["c", "d", "e"]]
    with pytest.raises(DataError):
        load_and_filter(tmp_path / "missing.txt")


def test_write_corpus_roundtrip(tmp_path):
    c = Corpus([["a", "b"], ["c"]])
    write_corpus(c, tmp_path / "c.txt")
    assert load_and_filter(tmp_path / "c.txt").sentences == c.sentences


def test_sentence_batch_layout():
    b = SentenceBatch.from_ids([[5, 6, 7], [8]], min_width=6)
    assert b.width == 6 and list(b.lengths) == [3, 1]
    assert list(b.ids[0]) == [5, 6, 7, EOS_ID, PAD_ID, PAD_ID]
    assert list(b.decoder_inputs()[1]) == [GO_ID, 8, PAD_ID, PAD_ID, PAD_ID, PAD_ID]
    assert list(b.decoder_targets()[1]) == [8, EOS_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]
    assert list(b.target_pad_mask()[1]) == [False, False, True, True, True, True]


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 1000))
def test_cipher_key_properties(rate, seed):
    names = token_names(30)
    key = gen_cipher_key(names, rate, seed)
    assert len(key.mapping) == int(np.ceil(round(rate * 30, 9)))
    images = list(key.mapping.values())
    assert len(set(images)) == len(images)
    assert all(img.endswith(CIPHER_SUFFIX) for img in images)
    if len(images) > 1:
        assert all(img[:-1] != src for src, img in key.mapping.items())
    assert not set(images) & set(names)
    inv = key.inverse()
    assert all(inv(key(t)) == t for t in key.mapping)


def test_cipher_rate_zero_is_identity_and_outside_domain_raises():
    names = token_names(10)
    key = gen_cipher_key(names, 0.0, 1)
    c = Corpus([names[:3]])
    assert apply_cipher(c, key).sentences == c.sentences
    with pytest.raises(ContractError):
        key("not-a-token")
    with pytest.raises(ContractError):
        gen_cipher_key(names, 1.5, 0)


def test_cipher_key_save_load(tmp_path):
    key = gen_cipher_key(token_names(12), 0.5, 3)
    key.save(tmp_path / "k.tsv")
    assert CipherKey.load(tmp_path / "k.tsv").mapping == key.mapping


def test_shuffle_preserves_multisets():
    c, _ = synth_bigram_corpus(20, 200, seed=3)
    s = shuffle_words(c, seed=0)
    assert all(Counter(a) == Counter(b) for a, b in zip(c, s))
    assert any(a != b for a, b in zip(c, s))
    assert shuffle_words(c, seed=0).sentences == s.sentences


def test_synthetic_language_is_markov_with_distinct_stationary_mass():
    c, m = synth_bigram_corpus(15, 3000, seed=2, max_len=12)
    assert np.allclose(m.sum(axis=1), 1.0)
    pi = stationary_distribution(m)
    assert np.allclose(pi @ m, pi, atol=1e-10)
    assert len(np.unique(np.round(pi, 8))) == 15
    assert all(3 <= len(s) <= 12 for s in c)
    emp = empirical_bigram_matrix(c, token_names(15))
    assert np.abs(emp - m)[m > 0.2].max() < 0.1


def test_sentiment_corpora_carry_one_marker_each():
    pos, neg = synth_sentiment_corpora(20, 100, seed=1)
    assert all(sum(t.startswith("pos") for t in s) == 1 for s in pos)
    assert all(sum(t.startswith("neg") for t in s) == 1 for s in neg)
    assert pos.style == 1 and neg.style == 2


def test_split_disjoint():
    sents = [[str(i)] for i in range(10)]
    a, b = split_disjoint(sents, [4, 5], seed=0)
    assert len(a) == 4 and len(b) == 5
    assert not {s[0] for s in a} & {s[0] for s in b}
    with pytest.raises(ContractError):
        split_disjoint(sents, [6, 5], seed=0)
