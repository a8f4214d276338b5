"""Analytic FLOPs and KV-cache models, attention-load statistics, layer similarity.

FLOPs follow the instrumentation convention of :mod:`dtrnet.tensor`: only
matrix products count, at ``2*m*k*p`` each. Embedding lookups are free and
the output head is counted once.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .model import Model, ModelConfig, expand_pattern, forward_batch
from .routing import capacity_count

PARTS = ("router", "qkvo_projections", "attention_scores_values", "bypass_projections", "mlp")
SWEEP_LENGTHS = tuple(512 * 2**k for k in range(7))

FLOPS_LAYER_HEADER = ["layer", "kind", "routed", *PARTS, "total"]
FLOPS_SWEEP_HEADER = ["n", "total_flops", "dense_flops", "ratio_to_dense"]
MEMORY_SWEEP_HEADER = ["n", "entries", "bytes", "dense_bytes", "ratio"]
LOADS_HEADER = ["layer", "mean_fraction", "std_fraction", "sequences"]


@dataclass(frozen=True)
class Geometry:
    n_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    vocab_size: int

    @classmethod
    def of(cls, config: ModelConfig) -> "Geometry":
        return cls(config.n_layers, config.d_model, config.d_ff, config.n_heads, config.vocab_size)


def _fractions(kinds: str, k) -> list[float]:
    """Per-layer routed fraction; T layers are always 1."""
    if isinstance(k, Mapping):
        per = [float(k.get(i, 1.0)) if c == "D" else 1.0 for i, c in enumerate(kinds)]
    elif isinstance(k, (int, float)):
        per = [float(k) if c == "D" else 1.0 for c in kinds]
    else:
        per = [float(v) for v in k]
        if len(per) != len(kinds):
            raise ValueError(f"{len(per)} routing fractions for {len(kinds)} layers")
        for i, c in enumerate(kinds):
            if c == "T" and per[i] != 1.0:
                raise ValueError(f"layer {i} is a full Transformer layer; its fraction must be 1")
    for v in per:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"routing fraction {v} outside [0, 1]")
    return per


@dataclass
class FlopsReport:
    n: int
    layers: list[dict]
    head: int
    total: int
    dense_total: int

    @property
    def ratio_to_dense(self) -> float:
        return self.total / self.dense_total


def _layer_flops(kind: str, n: int, k: int, d: int, d_ff: int, mlp_kind: str, no_vo: bool) -> dict:
    mlp = (6 if mlp_kind == "gated" else 4) * n * d * d_ff
    if kind == "T":
        row = dict(router=0, qkvo_projections=8 * n * d * d, attention_scores_values=4 * n * n * d,
                   bypass_projections=0, mlp=mlp)
    else:
        row = dict(
            router=2 * n * d * (d // 2) + 2 * n * (d // 2) * 2,
            qkvo_projections=8 * k * d * d,
            attention_scores_values=4 * k * k * d,
            bypass_projections=0 if no_vo else 4 * (n - k) * d * d,
            mlp=mlp,
        )
    row["total"] = sum(row[p] for p in PARTS)
    return row


def flops_model(
    geometry: Geometry,
    pattern: str,
    k=1.0,
    n: int = 2048,
    mlp: str = "gated",
    no_vo: bool = False,
) -> FlopsReport:
    """Closed-form FLOPs of one forward pass over ``n`` tokens.

    ``k`` is the routed fraction for DTR layers: a scalar, a per-layer
    sequence, or a ``{layer: fraction}`` mapping. A DTR layer routes
    ``ceil(k * n)`` tokens.
    """
    kinds = expand_pattern(pattern, geometry.n_layers)
    d, d_ff, V = geometry.d_model, geometry.d_ff, geometry.vocab_size
    fractions = _fractions(kinds, k)
    layers = []
    for i, (kind, frac) in enumerate(zip(kinds, fractions)):
        routed = n if kind == "T" else capacity_count(frac, n)
        row = _layer_flops(kind, n, routed, d, d_ff, mlp, no_vo)
        layers.append({"layer": i, "kind": kind, "routed": routed, **row})
    head = 2 * n * d * V
    total = sum(r["total"] for r in layers) + head
    dense = geometry.n_layers * _layer_flops("T", n, n, d, d_ff, mlp, no_vo)["total"] + head
    return FlopsReport(n=n, layers=layers, head=head, total=total, dense_total=dense)


def flops_sweep(geometry: Geometry, pattern: str, k=0.1, lengths: Iterable[int] = SWEEP_LENGTHS, **kw) -> list[dict]:
    rows = []
    for n in lengths:
        r = flops_model(geometry, pattern, k, n, **kw)
        rows.append({"n": n, "total_flops": r.total, "dense_flops": r.dense_total, "ratio_to_dense": r.ratio_to_dense})
    return rows


def measured_flops(counter: T.FlopCounter, n_layers: int) -> tuple[list[dict], int]:
    """Regroup an instrumented counter's scopes into per-layer part counts."""
    layers = [dict.fromkeys(PARTS, 0) for _ in range(n_layers)]
    head = 0
    for scope, flops in counter.by_scope.items():
        parts = scope.split("/")
        if parts[0] == "head":
            head += flops
            continue
        layer = int(parts[0].removeprefix("layer"))
        layers[layer][parts[1]] += flops
    for row in layers:
        row["total"] = sum(row[p] for p in PARTS)
    return layers, head


# ---------------------------------------------------------------------------
# KV cache


@dataclass
class KvMemoryReport:
    n: int
    entries: list[int]
    bytes: int
    dense_bytes: int

    @property
    def ratio(self) -> float:
        return self.bytes / self.dense_bytes


def kv_memory_model(geometry: Geometry, pattern: str, k=1.0, n: int = 2048, bytes_per_element: int = 2) -> KvMemoryReport:
    """Keys and values stored only for attention-routed tokens in DTR layers."""
    kinds = expand_pattern(pattern, geometry.n_layers)
    fractions = _fractions(kinds, k)
    entries = [n if c == "T" else capacity_count(f, n) for c, f in zip(kinds, fractions)]
    per_entry = 2 * bytes_per_element * geometry.d_model
    return KvMemoryReport(
        n=n, entries=entries, bytes=per_entry * sum(entries), dense_bytes=per_entry * geometry.n_layers * n
    )


def memory_sweep(geometry: Geometry, pattern: str, k=0.1, lengths: Iterable[int] = SWEEP_LENGTHS, bytes_per_element: int = 2) -> list[dict]:
    rows = []
    for n in lengths:
        r = kv_memory_model(geometry, pattern, k, n, bytes_per_element)
        rows.append({"n": n, "entries": sum(r.entries), "bytes": r.bytes, "dense_bytes": r.dense_bytes, "ratio": r.ratio})
    return rows


# ---------------------------------------------------------------------------
# routing statistics


def load_statistics(records: Iterable[Mapping]) -> list[dict]:
    """Mean and std of per-sequence attention fractions for each DTR layer.

    ``records`` carry ``layer``, ``n`` and ``load`` (see ``data.decision_records``).
    """
    by_layer: dict[int, list[float]] = {}
    for r in records:
        by_layer.setdefault(int(r["layer"]), []).append(r["load"] / r["n"])
    return [
        {
            "layer": layer,
            "mean_fraction": float(np.mean(v)),
            "std_fraction": float(np.std(v)),
            "sequences": len(v),
        }
        for layer, v in sorted(by_layer.items())
    ]


# ---------------------------------------------------------------------------
# representation similarity


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # [L+1, L+1]; index 0 is the embedding output

    def adjacent(self) -> np.ndarray:
        return np.diagonal(self.values, offset=1)


def layer_similarity(model: Model, sequences: Sequence[Sequence[int]]) -> SimilarityMatrix:
    """Token-averaged cosine similarity between hidden states after each block.

    A pair involving a zero vector contributes 0; the diagonal is 1 by definition.
    """
    if len(sequences) == 0:
        raise ValueError("need at least one sequence")
    with T.no_tape():
        hidden = forward_batch(model, sequences, capture_hidden=True).hidden
    H = np.stack([h.astype(np.float64) for h in hidden])  # [L+1, N, d]
    norms = np.linalg.norm(H, axis=-1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = np.where(norms[..., None] > 0, H / safe[..., None], 0.0)
    S = np.einsum("and,bnd->abn", unit, unit).mean(axis=-1)
    S = np.clip((S + S.T) / 2, -1.0, 1.0)
    np.fill_diagonal(S, 1.0)
    return SimilarityMatrix(S)


# ---------------------------------------------------------------------------
# CSV


def write_csv(path, header: Sequence[str], rows: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(header), extrasaction="raise")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in header})


def _fmt(v):
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return v


def write_similarity_csv(path, sim: SimilarityMatrix) -> None:
    L1 = sim.values.shape[0]
    header = ["layer"] + [str(i) for i in range(L1)]
    rows = [{"layer": a, **{str(b): float(sim.values[a, b]) for b in range(L1)}} for a in range(L1)]
    write_csv(path, header, rows)
