"""Byte tokenizer, synthetic tasks, corpus windows, checkpoints, and decision logs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import Model, ModelConfig, build_model
from .routing import RoutingDecision
from .tensor import Tensor

BOS, SEP, PAD = 256, 257, 258
VOCAB_SIZE = 259


class ByteTokenizer:
    """256 byte values plus ``BOS``, ``SEP`` and ``PAD``."""

    bos, sep, pad = BOS, SEP, PAD
    vocab_size = VOCAB_SIZE

    def encode(self, text: bytes | str, bos: bool = False) -> list[int]:
        if isinstance(text, str):
            text = text.encode("utf-8")
        ids = list(text)
        return [BOS] + ids if bos else ids

    def decode(self, ids: Iterable[int]) -> bytes:
        return bytes(int(i) for i in ids if 0 <= int(i) < 256)


@dataclass
class Example:
    tokens: np.ndarray  # [n] input ids
    targets: np.ndarray  # [n] next-token ids
    mask: np.ndarray  # [n] 1.0 where the target is supervised


def alphabet_symbols(size: int) -> np.ndarray:
    if not 2 <= size <= 26:
        raise ConfigError(f"alphabet size must be in [2, 26], got {size}")
    return np.arange(ord("a"), ord("a") + size)


def _rng(seed, rng) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(seed)


def gen_copy(seq_len: int, seed: int | None = None, alphabet: int = 16, rng: np.random.Generator | None = None) -> Example:
    """``BOS, s_1..s_m, SEP, s_1..s_m`` as a next-token example; only the repeat is supervised.

    ``seq_len`` counts input tokens and must be odd (``m = (seq_len - 1) / 2``).
    """
    if seq_len < 3 or seq_len % 2 == 0:
        raise ConfigError(f"copy task needs an odd seq_len >= 3, got {seq_len}")
    m = (seq_len - 1) // 2
    segment = _rng(seed, rng).choice(alphabet_symbols(alphabet), size=m)
    full = np.concatenate([[BOS], segment, [SEP], segment]).astype(np.int64)
    mask = np.zeros(seq_len)
    mask[m + 1 :] = 1.0
    return Example(full[:-1], full[1:], mask)


def gen_induction(
    seq_len: int, seed: int | None = None, alphabet: int = 16, rng: np.random.Generator | None = None
) -> Example:
    """Random symbols, then a repeat of one earlier symbol; the target is the symbol that followed it."""
    if seq_len < 5:
        raise ConfigError(f"induction task needs seq_len >= 5, got {seq_len}")
    gen = _rng(seed, rng)
    symbols = alphabet_symbols(alphabet)
    body = gen.choice(symbols, size=seq_len - 2)
    p = int(gen.integers(0, len(body) - 1))
    key = body[p]
    others = symbols[symbols != key]
    for i in range(len(body)):
        if i != p and body[i] == key:
            body[i] = gen.choice(others)
    value = body[p + 1]
    tokens = np.concatenate([[BOS], body, [key]]).astype(np.int64)
    targets = np.concatenate([tokens[1:], [value]]).astype(np.int64)
    mask = np.zeros(seq_len)
    mask[-1] = 1.0
    return Example(tokens, targets, mask)


class SyntheticTask:
    """Infinite sampler for ``copy`` or ``induction`` examples."""

    def __init__(self, kind: str = "copy", seq_len: int = 33, alphabet: int = 16):
        if kind not in ("copy", "induction"):
            raise ConfigError(f"task kind must be 'copy' or 'induction', got {kind!r}")
        self.kind, self.seq_len, self.alphabet = kind, seq_len, alphabet
        self._gen = gen_copy if kind == "copy" else gen_induction
        self._gen(seq_len, seed=0, alphabet=alphabet)  # validates parameters

    def sample(self, rng: np.random.Generator, batch_size: int) -> list[Example]:
        return [self._gen(self.seq_len, alphabet=self.alphabet, rng=rng) for _ in range(batch_size)]

    def fixed(self, count: int, seed: int) -> list[Example]:
        return self.sample(np.random.default_rng(seed), count)


def bigram_baseline(train: Sequence[Example], held_out: Sequence[Example], smoothing: float = 0.01) -> float:
    """CE of an additively smoothed bigram model on the supervised positions of ``held_out``.

    Counts come from the supervised positions of ``train``. On the copy task
    this sits near ``ln(alphabet)``: a bigram sees only the previous symbol.
    """
    counts: dict[int, dict[int, float]] = {}
    vocab = set()
    for e in train:
        for prev, nxt in zip(e.tokens[e.mask > 0], e.targets[e.mask > 0]):
            row = counts.setdefault(int(prev), {})
            row[int(nxt)] = row.get(int(nxt), 0.0) + 1.0
            vocab.add(int(nxt))
    v = max(len(vocab), 1)
    nll, n = 0.0, 0
    for e in held_out:
        for prev, nxt in zip(e.tokens[e.mask > 0], e.targets[e.mask > 0]):
            row = counts.get(int(prev), {})
            p = (row.get(int(nxt), 0.0) + smoothing) / (sum(row.values()) + smoothing * v)
            nll -= np.log(p)
            n += 1
    return float(nll / n)


def load_corpus(path, seq_len: int) -> list[Example]:
    """Non-overlapping ``seq_len``-byte windows; input is ``BOS`` + window[:-1], targets the window."""
    if seq_len < 1:
        raise ConfigError("seq_len must be positive")
    raw = Path(path).read_bytes()
    out = []
    for start in range(0, len(raw) - seq_len + 1, seq_len):
        chunk = np.frombuffer(raw[start : start + seq_len], dtype=np.uint8).astype(np.int64)
        tokens = np.concatenate([[BOS], chunk[:-1]])
        out.append(Example(tokens, chunk, np.ones(seq_len)))
    return out


class CorpusDataset:
    def __init__(self, examples: Sequence[Example]):
        if not examples:
            raise ConfigError("corpus yields no complete window")
        self.examples = list(examples)

    def sample(self, rng: np.random.Generator, batch_size: int) -> list[Example]:
        idx = rng.integers(0, len(self.examples), size=batch_size)
        return [self.examples[i] for i in idx]


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "dtrnet-checkpoint"
CHECKPOINT_VERSION = 1
MANIFEST = "manifest.json"
PAYLOAD = "params.bin"


def save_checkpoint(model: Model, path) -> Path:
    """Write ``manifest.json`` and a raw little-endian ``params.bin`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, p in model.params.items():
        blob = np.ascontiguousarray(p.data, dtype=p.dtype.newbyteorder("<")).tobytes()
        entries.append(
            {"name": name, "shape": list(p.shape), "dtype": p.dtype.name, "byte_offset": offset, "byte_length": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "parameters": entries,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    (path / PAYLOAD).write_bytes(b"".join(blobs))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint manifest at {path / MANIFEST}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed manifest {path / MANIFEST}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} directory")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {manifest.get('version')} is not supported (expected {CHECKPOINT_VERSION})"
        )
    return manifest


def load_checkpoint(path) -> Model:
    path = Path(path)
    manifest = read_manifest(path)
    try:
        payload = (path / PAYLOAD).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing payload {path / PAYLOAD}") from exc
    config = ModelConfig.from_dict(manifest["config"])
    params: dict[str, Tensor] = {}
    expected_offset = 0
    for entry in manifest["parameters"]:
        name = entry["name"]
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["byte_offset"] != expected_offset or entry["byte_length"] != count * dtype.itemsize:
            raise CheckpointError(f"manifest entry for {name!r} has inconsistent offset or length")
        end = expected_offset + entry["byte_length"]
        if end > len(payload):
            raise CheckpointError(f"payload truncated inside parameter {name!r} ({len(payload)} < {end} bytes)")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=expected_offset).reshape(entry["shape"])
        params[name] = Tensor(arr.astype(dtype.newbyteorder("=")), requires_grad=True, name=name)
        expected_offset = end
    if expected_offset != len(payload):
        raise CheckpointError(f"payload has {len(payload) - expected_offset} unexpected trailing bytes")
    missing = sorted(set(build_model(config).params) - set(params))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing}")
    return Model(config, params)


# ---------------------------------------------------------------------------
# decision logs


def decision_records(decisions: Sequence[RoutingDecision]) -> list[dict]:
    """One record per (sequence, DTR layer) with its attention load and length."""
    out = []
    for d in decisions:
        for seq, (n, load) in enumerate(zip(d.lengths, d.per_sequence_loads())):
            out.append({"sequence": seq, "layer": d.layer, "n": int(n), "load": int(load)})
    return out


def write_decision_log(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_decision_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
