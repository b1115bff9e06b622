import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridnmt.config import (ConfigError, RunConfig, config_path, dump_config, load_config,
                              parse_config)
from hybridnmt.data import (BUCKET_WIDTH, Vocab, build_vocab, encode_pairs, gen_toy_corpus,
                            make_batches, toy_vocab, write_lines)
from hybridnmt.model import BOS, EOS, PAD, UNK
from hybridnmt.tensor import Rng

# ---------------------------------------------------------------------- vocab


def test_build_vocab_frequency_then_lexicographic():
    v = build_vocab([["a a b"]], 6)
    assert v.encode("a b") == [4, 5]
    v = build_vocab([["c b b a c"]], 6)
    assert v.encode("b c a") == [4, 5, UNK]


def test_build_vocab_of_size_four_is_all_unk():
    v = build_vocab([["a a b"]], 4)
    assert len(v) == 4
    assert v.encode("a b zzz") == [UNK, UNK, UNK]


def test_vocab_errors():
    with pytest.raises(ValueError):
        build_vocab([["a"]], 3)
    with pytest.raises(ValueError):
        build_vocab([[""]], 10)
    with pytest.raises(ValueError):
        Vocab(["a", "a"])


def test_reserved_ids_and_decode():
    v = Vocab(["x", "y"])
    assert v.itos[:4] == ["<pad>", "<s>", "</s>", "<unk>"]
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)
    assert v.decode([BOS, 4, PAD, 5, EOS, 4]) == ["x", "y"]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["w4", "w5", "w6", "w7", "w8"]), min_size=1, max_size=12))
def test_encode_decode_round_trip(tokens):
    v = toy_vocab(9)
    ids = v.encode(tokens)
    assert v.decode(ids) == tokens
    assert v.encode(v.decode(ids)) == ids


def test_vocab_file_round_trip(tmp_path):
    v = build_vocab([["the cat sat on the mat", "a cat"]], 20)
    v.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt").itos == v.itos


def test_build_vocab_from_files(tmp_path):
    write_lines(tmp_path / "a.txt", ["x y", "y"])
    write_lines(tmp_path / "b.txt", ["z"])
    v = build_vocab([tmp_path / "a.txt", tmp_path / "b.txt"], 10)
    assert v.itos[4:] == ["y", "x", "z"]


# ----------------------------------------------------------------- toy corpus


def test_toy_reverse_and_copy():
    src, tgt = gen_toy_corpus("reverse", 50, 6, 12, 3)
    for s, t in zip(src, tgt):
        assert t.split() == s.split()[::-1]
        assert 1 <= len(s.split()) <= 6
        assert all(4 <= int(w[1:]) < 12 for w in s.split())
    src, tgt = gen_toy_corpus("copy", 20, 6, 12, 3)
    assert src == tgt


def test_toy_corpus_deterministic(tmp_path):
    assert gen_toy_corpus("reverse", 30, 5, 10, 9) == gen_toy_corpus("reverse", 30, 5, 10, 9)
    assert gen_toy_corpus("reverse", 30, 5, 10, 9) != gen_toy_corpus("reverse", 30, 5, 10, 8)


def test_toy_corpus_errors():
    with pytest.raises(ValueError):
        gen_toy_corpus("sort", 3, 3, 10, 1)
    with pytest.raises(ValueError):
        gen_toy_corpus("copy", 3, 3, 4, 1)


def test_encode_pairs_reverse_example():
    v = toy_vocab(10)
    (src, tgt), = encode_pairs(["w5 w6 w7"], ["w7 w6 w5"], v)
    assert src == [5, 6, 7] and tgt == [7, 6, 5]
    assert encode_pairs(["", "w4"], ["w4", "w4"], v) == [([4], [4])]
    with pytest.raises(ValueError):
        encode_pairs(["w4"], [], v)


# ------------------------------------------------------------------- batching


def test_batches_are_bucketed_by_source_length():
    src, tgt = gen_toy_corpus("reverse", 200, 12, 20, 1)
    pairs = encode_pairs(src, tgt, toy_vocab(20))
    batches = make_batches(pairs, 16, Rng(2))
    assert sum(len(b) for b in batches) == len(pairs)
    for b in batches:
        lengths = (b.src != PAD).sum(axis=1)
        assert len({(n - 1) // BUCKET_WIDTH for n in lengths}) == 1
        assert len(b) <= 16


def test_batching_is_deterministic_under_seed():
    src, tgt = gen_toy_corpus("reverse", 60, 8, 20, 1)
    pairs = encode_pairs(src, tgt, toy_vocab(20))
    a = make_batches(pairs, 8, Rng(5))
    b = make_batches(pairs, 8, Rng(5))
    assert all(np.array_equal(x.src, y.src) for x, y in zip(a, b))


# --------------------------------------------------------------------- config


def test_default_config_is_valid_and_round_trips():
    cfg = RunConfig()
    assert parse_config(dump_config(cfg)) == cfg


configs = st.builds(
    RunConfig,
    vocab_size=st.integers(5, 1000), emb_size=st.integers(1, 64),
    hidden_size=st.integers(1, 128), depth=st.integers(1, 6),
    variant=st.sampled_from(["input_feeding", "no_input_feeding"]),
    dropout=st.floats(0.0, 0.9), precision=st.sampled_from([32, 64]),
    strategy=st.sampled_from(["serial", "data_parallel", "hybrid"]),
    batch_size=st.integers(1, 512), seed=st.integers(0, 2**31),
    lr=st.floats(1e-6, 1.0), lr_decay=st.floats(0.01, 1.0),
    train_src=st.sampled_from(["", "data/train.src", "x y.txt"]),
    sync_cost=st.floats(0.0, 1e6), softmax_factor=st.floats(0.0, 10.0))


@settings(max_examples=80, deadline=None)
@given(configs)
def test_config_round_trip(cfg):
    assert parse_config(dump_config(cfg)) == cfg


def test_comments_and_blank_lines():
    cfg = parse_config("# desk run\n\nhidden_size = 16   # small\ndepth=4\n")
    assert cfg.hidden_size == 16 and cfg.depth == 4


@pytest.mark.parametrize("text", [
    "bogus = 1\n",
    "depth = two\n",
    "depth = 2\ndepth = 3\n",
    "depth\n",
    "depth = 0\n",
    "strategy = warp\n",
    "variant = sideways\n",
    "lr = -1\n",
    "toy_task = sort\n",
    "sync_cost = -5\n",
])
def test_invalid_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_env_var_overrides_config_path(tmp_path, monkeypatch):
    a, b = tmp_path / "a.conf", tmp_path / "b.conf"
    a.write_text("depth = 3\n")
    b.write_text("depth = 5\n")
    monkeypatch.delenv("HYBRIDNMT_CONFIG", raising=False)
    assert load_config(str(a)).depth == 3
    assert load_config(None) == RunConfig()
    monkeypatch.setenv("HYBRIDNMT_CONFIG", str(b))
    assert config_path(str(a)) == str(b)
    assert load_config(str(a)).depth == 5


def test_missing_config_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "nope.conf"))


def test_config_builds_model_and_cost_model():
    cfg = parse_config("hidden_size = 16\nsync_cost = 2.5\nvariant = no_input_feeding\n")
    assert cfg.model_config().hidden_size == 16
    assert not cfg.model_config().input_feeding
    assert cfg.cost_model().sync_cost == 2.5
