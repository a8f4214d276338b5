import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import randomize, tiny_config
from dtrnet.data import (
    BOS,
    SEP,
    ByteTokenizer,
    CorpusDataset,
    SyntheticTask,
    bigram_baseline,
    decision_records,
    gen_copy,
    gen_induction,
    load_checkpoint,
    load_corpus,
    read_decision_log,
    read_manifest,
    save_checkpoint,
    write_decision_log,
)
from dtrnet.errors import CheckpointError, ConfigError
from dtrnet.model import build_model, forward
from dtrnet.routing import RoutingConfig


def test_tokenizer_round_trip_many():
    tok = ByteTokenizer()
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        raw = rng.integers(0, 256, size=int(rng.integers(0, 40))).astype(np.uint8).tobytes()
        assert tok.decode(tok.encode(raw)) == raw


@settings(max_examples=100, deadline=None)
@given(st.text(max_size=30))
def test_tokenizer_text_round_trip(text):
    tok = ByteTokenizer()
    ids = tok.encode(text, bos=True)
    assert ids[0] == BOS and tok.decode(ids).decode("utf-8") == text


def test_copy_layout():
    e = gen_copy(9, seed=3, alphabet=4)
    assert e.tokens[0] == BOS and e.tokens[5] == SEP
    np.testing.assert_array_equal(e.tokens[1:5], e.targets[5:])
    np.testing.assert_array_equal(e.targets[:-1], e.tokens[1:])
    np.testing.assert_array_equal(e.mask, [0, 0, 0, 0, 0, 1, 1, 1, 1])
    assert set(e.tokens[1:5]) <= set(range(ord("a"), ord("a") + 4))


def test_copy_is_seeded():
    a, b = gen_copy(11, seed=5), gen_copy(11, seed=5)
    np.testing.assert_array_equal(a.tokens, b.tokens)
    assert not np.array_equal(a.tokens, gen_copy(11, seed=6).tokens)


def test_copy_length_checks():
    with pytest.raises(ConfigError):
        gen_copy(10)
    with pytest.raises(ConfigError):
        SyntheticTask("sort")


def test_copy_answers_are_uniform():
    examples = SyntheticTask("copy", 33, 16).fixed(500, 0)
    answers = np.concatenate([e.targets[e.mask > 0] for e in examples])
    counts = np.bincount(answers - ord("a"), minlength=16)
    # chi-square with 15 dof; 37.7 is the 0.999 quantile
    expected = len(answers) / 16
    assert np.sum((counts - expected) ** 2 / expected) < 37.7


def test_bigram_baseline_is_near_log_alphabet():
    task = SyntheticTask("copy", 33, 16)
    ce = bigram_baseline(task.fixed(2000, 0), task.fixed(500, 1))
    assert abs(ce - math.log(16)) < 0.05


def test_induction_example():
    e = gen_induction(12, seed=2, alphabet=8)
    body = e.tokens[1:-1]
    key = e.tokens[-1]
    where = np.flatnonzero(body == key)
    assert len(where) == 1 and e.targets[-1] == body[where[0] + 1]
    assert e.mask.sum() == 1 and e.mask[-1] == 1


def test_corpus_windows(tmp_path):
    path = tmp_path / "c.bin"
    path.write_bytes(bytes(range(256)) * 4)
    windows = load_corpus(path, 128)
    assert len(windows) == 8
    for w in windows:
        assert w.tokens[0] == BOS
        np.testing.assert_array_equal(w.targets[:-1], w.tokens[1:])
    np.testing.assert_array_equal(windows[1].targets, np.arange(128, 256))


def test_corpus_partial_and_empty(tmp_path):
    (tmp_path / "p").write_bytes(b"x" * 300)
    assert len(load_corpus(tmp_path / "p", 128)) == 2
    (tmp_path / "e").write_bytes(b"")
    assert load_corpus(tmp_path / "e", 16) == []
    with pytest.raises(ConfigError):
        CorpusDataset([])
    with pytest.raises(OSError):
        load_corpus(tmp_path / "missing", 16)


def test_corpus_dataset_samples(tmp_path):
    (tmp_path / "c").write_bytes(b"abcdefgh" * 8)
    ds = CorpusDataset(load_corpus(tmp_path / "c", 8))
    batch = ds.sample(np.random.default_rng(0), 5)
    assert len(batch) == 5 and all(len(e.tokens) == 8 for e in batch)


# -- checkpoints ----------------------------------------------------------------------


@pytest.fixture
def model(rng):
    return randomize(build_model(tiny_config(router_attention_bias=0.5, routing=RoutingConfig(gating="soft_mixture"))), rng)


def test_checkpoint_round_trip(model, tmp_path):
    save_checkpoint(model, tmp_path / "a")
    loaded = load_checkpoint(tmp_path / "a")
    assert loaded.config == model.config
    assert list(loaded.params) == list(model.params)
    for k, p in model.params.items():
        assert loaded.params[k].dtype == p.dtype
        np.testing.assert_array_equal(loaded.params[k].data, p.data)
    tokens = [1, 5, 2, 9, 3]
    np.testing.assert_array_equal(forward(loaded, tokens)[0].data, forward(model, tokens)[0].data)
    save_checkpoint(loaded, tmp_path / "b")
    for name in ("manifest.json", "params.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_manifest_lengths(model, tmp_path):
    save_checkpoint(model, tmp_path)
    manifest = read_manifest(tmp_path)
    offset = 0
    for entry in manifest["parameters"]:
        assert entry["byte_offset"] == offset
        assert entry["byte_length"] == np.dtype(entry["dtype"]).itemsize * int(np.prod(entry["shape"]))
        offset += entry["byte_length"]
    assert offset == (tmp_path / "params.bin").stat().st_size


def test_float32_checkpoint(tmp_path):
    m = build_model(tiny_config(precision="float32"))
    loaded = load_checkpoint(save_checkpoint(m, tmp_path))
    assert loaded.params["embed"].dtype == np.float32


def test_truncated_payload_names_parameter(model, tmp_path):
    save_checkpoint(model, tmp_path)
    payload = tmp_path / "params.bin"
    payload.write_bytes(payload.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="'head'"):
        load_checkpoint(tmp_path)


def test_trailing_bytes_rejected(model, tmp_path):
    save_checkpoint(model, tmp_path)
    with open(tmp_path / "params.bin", "ab") as fh:
        fh.write(b"\0" * 8)
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path)


def test_version_mismatch(model, tmp_path):
    save_checkpoint(model, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["version"] = 2
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="version 2"):
        load_checkpoint(tmp_path)


def test_missing_parameter(model, tmp_path):
    save_checkpoint(model, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    dropped = manifest["parameters"].pop()
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    payload = tmp_path / "params.bin"
    payload.write_bytes(payload.read_bytes()[: dropped["byte_offset"]])
    with pytest.raises(CheckpointError, match="lacks"):
        load_checkpoint(tmp_path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")


def test_decision_log_round_trip(model, tmp_path):
    from dtrnet.model import forward_batch

    out = forward_batch(model, [[1, 2, 3], [4, 5]])
    records = decision_records(out.decisions)
    assert len(records) == 4 and {r["n"] for r in records} == {2, 3}
    write_decision_log(records, tmp_path / "d.jsonl")
    assert read_decision_log(tmp_path / "d.jsonl") == records
