"""Routing-penalised training objective, AdamW, LR schedule, and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, NonFiniteLossError
from .model import Model, count_attention_loads, forward_batch
from .routing import RoutingDecision
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    peak_lr: float = 3e-4
    weight_decay: float = 0.01
    clip_norm: float = 0.1
    warmup_ratio: float = 0.1
    total_steps: int = 1000
    batch_size: int = 8
    seq_len: int = 33
    lam: float = 8e-4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    checkpoint_every: int = 0
    eval_every: int = 0

    def __post_init__(self):
        for name in ("peak_lr", "clip_norm", "total_steps", "batch_size", "seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.weight_decay < 0 or self.lam < 0:
            raise ConfigError("train.weight_decay and train.lam must be non-negative")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError("train.warmup_ratio must lie in [0, 1)")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown train config key(s): {unknown}")
        return cls(**data)


# ---------------------------------------------------------------------------
# loss


def routing_penalty(decisions: Sequence[RoutingDecision], lam: float) -> Tensor:
    """``lam * sum_l alpha_l * ||g_attn^(l)||_1`` averaged over the packed sequences.

    ``alpha_l`` is layer ``l``'s share of all hard attention assignments and
    is treated as a constant. No routed token anywhere gives a zero penalty.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if not decisions:
        return Tensor(0.0)
    dtype = decisions[0].soft_scores.dtype
    loads = np.array([d.attention_load for d in decisions], dtype=np.float64)
    if lam == 0 or loads.sum() == 0:
        return Tensor(np.zeros((), dtype=dtype))
    alphas = loads / loads.sum()
    n_seq = len(decisions[0].lengths)
    total = None
    for alpha, d in zip(alphas, decisions):
        if alpha == 0:
            continue
        term = d.soft_scores[:, 0].sum() * float(alpha)
        total = term if total is None else total + term
    return total * (lam / n_seq)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
    no_decay: Iterable[str] = (),
) -> AdamState:
    """One in-place AdamW update with decoupled, multiplicative weight decay."""
    state.step += 1
    t = state.step
    skip = set(no_decay)
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if weight_decay and name not in skip:
            p.data *= 1.0 - lr * weight_decay
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``peak_lr``, then cosine decay to zero at ``total_steps``."""
    total = config.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warmup = config.warmup_ratio * total
    if step < warmup:
        return config.peak_lr * step / warmup
    if total == warmup:
        return config.peak_lr
    progress = (step - warmup) / (total - warmup)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns ``(grads, norm_before)``."""
    norm = T.global_norm(list(grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    step: int
    ce_loss: float
    routing_penalty: float
    total_loss: float
    lr: float
    attention_fractions: dict[int, float]
    tokens_per_sec: float = 0.0

    def row(self) -> dict:
        """Deterministic fields only; throughput is wall-clock and is logged instead."""
        out = {
            "step": self.step,
            "ce": self.ce_loss,
            "penalty": self.routing_penalty,
            "total": self.total_loss,
            "lr": self.lr,
        }
        for layer, frac in self.attention_fractions.items():
            out[f"load_{layer}"] = frac
        return out


class MetricsSink(Protocol):
    def write(self, record: MetricsRecord) -> None: ...

    def close(self) -> None: ...


def metrics_header(dtr_layers: Sequence[int]) -> list[str]:
    return ["step", "ce", "penalty", "total", "lr"] + [f"load_{i}" for i in dtr_layers]


class JsonlSink:
    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8")

    def write(self, record: MetricsRecord) -> None:
        self._fh.write(json.dumps(record.row(), sort_keys=False) + "\n")

    def close(self) -> None:
        self._fh.close()


class CsvSink:
    def __init__(self, path, dtr_layers: Sequence[int]):
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=metrics_header(dtr_layers))
        self._writer.writeheader()

    def write(self, record: MetricsRecord) -> None:
        self._writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in record.row().items()})

    def close(self) -> None:
        self._fh.close()


class MemorySink:
    def __init__(self):
        self.records: list[MetricsRecord] = []

    def write(self, record: MetricsRecord) -> None:
        self.records.append(record)

    def close(self) -> None:
        pass


# ---------------------------------------------------------------------------
# loop


class Dataset(Protocol):
    def sample(self, rng: np.random.Generator, batch_size: int) -> list: ...


def batch_loss(model: Model, examples: Sequence, lam: float) -> tuple[Tensor, Tensor, Tensor, list[RoutingDecision]]:
    """CE over supervised positions plus the routing penalty, on the active tape."""
    out = forward_batch(model, [e.tokens for e in examples])
    targets = np.concatenate([e.targets for e in examples])
    mask = np.concatenate([e.mask for e in examples])
    ce = T.cross_entropy(out.logits, targets, mask)
    penalty = routing_penalty(out.decisions, lam)
    return ce + penalty, ce, penalty, out.decisions


def evaluate(model: Model, examples: Sequence, batch_size: int = 32) -> tuple[float, list[RoutingDecision]]:
    """Mean CE over all supervised positions, and the routing decisions of every batch."""
    nll = 0.0
    count = 0.0
    decisions: list[RoutingDecision] = []
    with T.no_tape():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            out = forward_batch(model, [e.tokens for e in chunk])
            targets = np.concatenate([e.targets for e in chunk])
            mask = np.concatenate([e.mask for e in chunk]).astype(np.float64)
            w = mask.sum()
            nll += T.cross_entropy(out.logits, targets, mask).item() * w
            count += w
            decisions.extend(out.decisions)
    return float(nll / count), decisions


def no_decay_names(model: Model) -> set[str]:
    return {name for name, p in model.params.items() if p.ndim < 2}


def train(
    model: Model,
    dataset: Dataset,
    config: TrainConfig,
    sinks: Sequence[MetricsSink] = (),
    checkpoint_dir: Path | None = None,
    on_checkpoint: Callable[[Model, Path], None] | None = None,
) -> tuple[Model, list[MetricsRecord]]:
    """Train in place. Deterministic for fixed seeds and BLAS thread count."""
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    skip = no_decay_names(model)
    records: list[MetricsRecord] = []
    dtr = model.dtr_layers
    for step in range(1, config.total_steps + 1):
        t0 = time.perf_counter()
        examples = dataset.sample(rng, config.batch_size)
        lr = lr_at(step, config)
        model.zero_grad()
        with T.Tape() as tape:
            total, ce, penalty, decisions = batch_loss(model, examples, config.lam)
        fractions = dict(zip(dtr, count_attention_loads(decisions)))
        if not (np.isfinite(total.item()) and np.isfinite(ce.item())):
            snapshot = {"step": step, "lr": lr, "attention_fractions": fractions, "ce": ce.item()}
            raise NonFiniteLossError(f"non-finite loss at step {step}", snapshot)
        tape.backward(total)
        grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
        grads, _ = clip_gradients(grads, config.clip_norm)
        adamw_step(
            model.params, grads, state, lr, config.weight_decay, config.beta1, config.beta2, config.eps, skip
        )
        n_tokens = sum(len(e.tokens) for e in examples)
        elapsed = time.perf_counter() - t0
        record = MetricsRecord(
            step=step,
            ce_loss=ce.item(),
            routing_penalty=penalty.item(),
            total_loss=ce.item() + penalty.item(),
            lr=lr,
            attention_fractions=fractions,
            tokens_per_sec=n_tokens / elapsed if elapsed > 0 else 0.0,
        )
        records.append(record)
        for sink in sinks:
            sink.write(record)
        if step % 50 == 0 or step == 1:
            log.info(
                "step %d ce=%.4f penalty=%.4f lr=%.2e tok/s=%.0f", step, record.ce_loss, record.routing_penalty, lr,
                record.tokens_per_sec,
            )
        if checkpoint_dir is not None and on_checkpoint and config.checkpoint_every and step % config.checkpoint_every == 0:
            on_checkpoint(model, Path(checkpoint_dir) / f"step{step:06d}")
    return model, records
