import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_task
from mmscript.corpus import Corpus, TrainingExample
from mmscript.text import (
    SPECIAL_TOKENS,
    Tokenizer,
    assemble_input,
    build_vocab,
    encode_target,
    normalize,
)


@pytest.fixture
def tok():
    corpus = Corpus("train", [
        make_task("a", ["cut the thread", "thread the bobbin", "pull the thread out"], goal="sew a dress",
                  subgoal="prepare the machine"),
    ])
    return build_vocab(corpus)


def example(n_pairs, subgoal="prepare the machine", caption_len=3):
    history = tuple((f"step {i} text", " ".join(["cap"] * caption_len)) for i in range(n_pairs))
    return TrainingExample("sew a dress", subgoal, history, "thread the bobbin", "a", n_pairs)


def test_special_tokens_fixed_and_first(tok):
    assert tok.itos[: len(SPECIAL_TOKENS)] == list(SPECIAL_TOKENS)
    assert (tok.pad_id, tok.cls_id, tok.template_id) == (0, 4, 10)


def test_vocab_contains_corpus_words_and_is_deterministic():
    corpus = Corpus("train", [make_task("a", ["cut the thread"] * 4)])
    a, b = build_vocab(corpus), build_vocab(corpus)
    assert {"cut", "the", "thread"} <= set(a.itos)
    assert a.itos == b.itos


def test_min_freq_maps_rare_to_unk():
    corpus = Corpus("train", [make_task("a", ["cut the thread", "cut the hem"])])
    tok = build_vocab(corpus, min_freq=2)
    assert "hem" not in tok.stoi
    assert tok.encode("hem")[-1] == tok.unk_id


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        build_vocab(Corpus("train", []))


def test_encode_lowercases(tok):
    assert tok.encode("Cut The Thread") == [tok.stoi["cut"], tok.stoi["the"], tok.stoi["thread"]]
    assert tok.encode("") == []
    assert tok.encode("zyzzyva") == [tok.unk_id]


def test_normalize_splits_punctuation():
    assert normalize("Don't stop, Sew!") == ["don", "'", "t", "stop", ",", "sew", "!"]


def test_assemble_one_pair(tok):
    seq = assemble_input(tok, example(1))
    labels = [s[0] for s in seq.segments]
    assert labels == ["CLS", "GOAL_SUBGOAL", "STEP", "CAPTION"]
    assert seq.segment_count == 3
    assert seq.token_ids[0] == tok.cls_id
    goal_span = seq.segments[1]
    ids = seq.token_ids[goal_span[1]:goal_span[2]]
    assert ids[0] == tok.title_id and tok.method_id in ids


def test_assemble_without_subgoal(tok):
    seq = assemble_input(tok, example(1, subgoal=None))
    _, start, end = seq.segments[1]
    assert list(seq.token_ids[start:end]) == [tok.title_id] + tok.encode("sew a dress")


def test_caption_truncated_to_30(tok):
    seq = assemble_input(tok, example(1, caption_len=35))
    _, start, end = seq.segments[3]
    assert end - start == 1 + 30


def test_encode_target(tok):
    ids = encode_target(tok, "thread the bobbin")
    assert ids == [tok.bos_id] + tok.encode("thread the bobbin") + [tok.eos_id]
    long = encode_target(tok, " ".join(["thread"] * 45))
    assert len(long) == 42


def test_vocab_file_round_trip(tok, tmp_path):
    tok.save(tmp_path / "vocab.txt")
    again = Tokenizer.load(tmp_path / "vocab.txt")
    assert again.itos == tok.itos
    assert (tmp_path / "vocab.txt").read_text().splitlines()[0] == "<pad>"


words = st.lists(st.sampled_from(["cut", "the", "thread", "bobbin", "pull", "out", "dress"]), min_size=1, max_size=40)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 11), st.integers(0, 1000))
def test_segments_partition_tokens(n, seed):
    rng = random.Random(seed)
    corpus = Corpus("train", [make_task("a", ["cut the thread", "thread the bobbin"])])
    tok = build_vocab(corpus)
    history = tuple((" ".join(rng.choices(["cut", "the", "x"], k=rng.randint(0, 40))),
                     " ".join(rng.choices(["thread", "y"], k=rng.randint(0, 40)))) for _ in range(n))
    ex = TrainingExample("goal", rng.choice([None, "sub goal"]), history, "t", "a", n)
    seq = assemble_input(tok, ex)
    assert seq.segment_count == 2 * n + 1
    covered = []
    for _, start, end in seq.segments:
        assert end > start
        covered.extend(range(start, end))
    assert covered == list(range(len(seq.token_ids)))


@settings(max_examples=60, deadline=None)
@given(words)
def test_decode_encode_identity(ws):
    corpus = Corpus("train", [make_task("a", ["cut the thread bobbin pull out dress"] * 2)])
    tok = build_vocab(corpus)
    text = " ".join(ws)
    ids = tok.encode(text)
    assert tok.decode(ids) == text
    assert tok.encode(tok.decode(ids)) == ids


@settings(max_examples=30, deadline=None)
@given(words, words)
def test_truncation_idempotent(step, caption):
    corpus = Corpus("train", [make_task("a", ["cut the thread bobbin pull out dress"] * 2)])
    tok = build_vocab(corpus)
    ex = TrainingExample("dress", None, ((" ".join(step), " ".join(caption)),), "t", "a", 1)
    seq = assemble_input(tok, ex)
    # rebuild the example from the truncated spans and assemble again
    (_, s1, e1), (_, s2, e2) = seq.segments[2], seq.segments[3]
    trunc = TrainingExample("dress", None, ((tok.decode(seq.token_ids[s1:e1]), tok.decode(seq.token_ids[s2:e2])),),
                            "t", "a", 1)
    assert assemble_input(tok, trunc) == seq
