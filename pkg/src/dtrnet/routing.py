"""Token router, hard path selection, and the induced sparse attention mask."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, UnsupportedModeError
from .tensor import Tensor

RoutingMode = Literal["token_choice", "expert_choice"]
Gating = Literal["hard_scaled", "soft_mixture", "unit_gate"]
Force = Literal["attention", "bypass"]

ROUTING_MODES = ("token_choice", "expert_choice")
GATINGS = ("hard_scaled", "soft_mixture", "unit_gate")
FORCES = ("attention", "bypass")


@dataclass
class RouterParams:
    """Two-layer router. ``bias`` is only present when ``router_attention_bias`` is configured."""

    w1: Tensor  # [d, d/2]
    w2: Tensor  # [d/2, 2]
    bias: Tensor | None = None  # [2]

    def __post_init__(self):
        d, half = self.w1.shape
        if d % 2 or half != d // 2:
            raise ConfigError(f"router W1 must be [d, d/2] with even d, got {self.w1.shape}")
        if self.w2.shape != (half, 2):
            raise ConfigError(f"router W2 must be [{half}, 2], got {self.w2.shape}")


@dataclass(frozen=True)
class RoutingConfig:
    mode: RoutingMode = "token_choice"
    capacity: float | None = None
    gating: Gating = "hard_scaled"
    force: Force | None = None

    def __post_init__(self):
        if self.mode not in ROUTING_MODES:
            raise ConfigError(f"routing.mode must be one of {ROUTING_MODES}, got {self.mode!r}")
        if self.gating not in GATINGS:
            raise ConfigError(f"routing.gating must be one of {GATINGS}, got {self.gating!r}")
        if self.force is not None and self.force not in FORCES:
            raise ConfigError(f"routing.force must be one of {FORCES} or null, got {self.force!r}")
        if self.mode == "expert_choice":
            if self.capacity is None or not 0.0 < self.capacity <= 1.0:
                raise ConfigError("routing.capacity must be in (0, 1] for expert_choice")


@dataclass
class RoutingDecision:
    """Routing outcome of one DTR layer over a packed batch of sequences."""

    layer: int
    soft_scores: Tensor  # [N, 2]; column 0 = attention, column 1 = bypass
    hard_mask: np.ndarray  # [N] bool
    lengths: tuple[int, ...]

    @property
    def attention_load(self) -> int:
        return int(np.count_nonzero(self.hard_mask))

    @property
    def num_tokens(self) -> int:
        return int(self.hard_mask.shape[0])

    def per_sequence_loads(self) -> list[int]:
        cuts = np.cumsum(self.lengths)[:-1]
        return [int(np.count_nonzero(part)) for part in np.split(self.hard_mask, cuts)]


def route_soft(x: Tensor, params: RouterParams) -> Tensor:
    """Per-token softmax over ``[attention, bypass]``; differentiable."""
    if x.ndim != 2 or x.shape[1] != params.w1.shape[0]:
        raise DimensionError(f"router input {x.shape} does not match W1 {params.w1.shape}")
    with T.flop_scope("router"):
        logits = T.silu(x @ params.w1) @ params.w2
    if params.bias is not None:
        logits = logits + params.bias
    return T.softmax(logits, axis=-1)


def route_hard(soft_scores) -> np.ndarray:
    """Token-choice selection; a tie goes to the bypass path."""
    s = soft_scores.data if isinstance(soft_scores, Tensor) else np.asarray(soft_scores)
    return s[:, 0] > s[:, 1]


def capacity_count(fraction: float, n: int) -> int:
    """``ceil(fraction * n)`` robust to float noise such as ``(3/7) * 7``."""
    return min(n, math.ceil(round(fraction * n, 9)))


def route_expert(soft_scores, capacity: float, lengths: Sequence[int] | None = None) -> np.ndarray:
    """Mark the ``ceil(capacity * n)`` highest-scoring tokens of each sequence.

    Equal scores are ranked by position, lower index first.
    """
    if not 0.0 < capacity <= 1.0:
        raise ConfigError(f"capacity must be in (0, 1], got {capacity}")
    s = soft_scores.data if isinstance(soft_scores, Tensor) else np.asarray(soft_scores)
    g = s[:, 0]
    lengths = (len(g),) if lengths is None else tuple(lengths)
    mask = np.zeros(len(g), dtype=bool)
    start = 0
    for n in lengths:
        order = np.argsort(-g[start : start + n], kind="stable")
        mask[start + order[: capacity_count(capacity, n)]] = True
        start += n
    return mask


def select(
    soft_scores,
    config: RoutingConfig,
    lengths: Sequence[int] | None = None,
    incremental: bool = False,
) -> np.ndarray:
    """Hard mask for a layer under ``config``, honouring forced routing."""
    n = soft_scores.shape[0]
    if config.force == "attention":
        return np.ones(n, dtype=bool)
    if config.force == "bypass":
        return np.zeros(n, dtype=bool)
    if config.mode == "expert_choice":
        if incremental:
            raise UnsupportedModeError(
                "expert-choice routing needs the whole sequence and cannot drive incremental decoding"
            )
        return route_expert(soft_scores, config.capacity, lengths)
    return route_hard(soft_scores)


def build_sparse_mask(hard_mask) -> np.ndarray:
    """Outer product ``delta * delta^T``: pair (i, j) allowed iff both are routed."""
    delta = np.asarray(hard_mask).astype(np.int8)
    return np.outer(delta, delta)
