"""Full Transformer layers and DTR layers.

Hidden states are *packed*: several sequences are concatenated row-wise into
an ``[N, d]`` matrix, with ``lengths`` giving each sequence's token count and
``positions`` each row's absolute position inside its own sequence. Every
operation except attention is row-local, so packing only matters where
attention restricts itself to one sequence at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .routing import RouterParams, RoutingConfig, RoutingDecision, route_soft, select
from .tensor import Tensor

LayerKind = Literal["T", "D"]


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int
    rope_base: float = 10000.0

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.heads:
            raise ConfigError(f"hidden size {d} is not divisible by {self.heads} heads")
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d, d):
                raise ConfigError(f"{name} must be [{d}, {d}], got {getattr(self, name).shape}")

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


@dataclass
class MlpParams:
    """SiLU-gated MLP when ``gate`` is set, otherwise ``silu(x W_up) W_down``."""

    up: Tensor
    down: Tensor
    gate: Tensor | None = None

    def __post_init__(self):
        d, d_ff = self.up.shape
        if self.down.shape != (d_ff, d) or (self.gate is not None and self.gate.shape != (d, d_ff)):
            raise ConfigError("MLP weight shapes do not chain")


@dataclass
class LayerParams:
    kind: LayerKind
    attention: AttentionParams
    mlp: MlpParams
    norm1: Tensor
    norm2: Tensor
    router: RouterParams | None = None
    eps: float = 1e-6

    def __post_init__(self):
        if self.kind == "T" and self.router is not None:
            raise ConfigError("full Transformer layers carry no router")
        if self.kind == "D" and self.router is None:
            raise ConfigError("DTR layers need a router")


def _split_lengths(mask: np.ndarray, lengths: Sequence[int]) -> tuple[int, ...]:
    cuts = np.cumsum(lengths)[:-1]
    return tuple(int(np.count_nonzero(part)) for part in np.split(mask, cuts))


# ---------------------------------------------------------------------------
# attention primitives


def project_qkv(h: Tensor, positions: np.ndarray, params: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    """Queries, keys and values as ``[m, heads, head_dim]``; rotary on q and k."""
    m = h.shape[0]
    shape = (m, params.heads, params.head_dim)
    with T.flop_scope("qkvo_projections"):
        q = (h @ params.wq).reshape(shape)
        k = (h @ params.wk).reshape(shape)
        v = (h @ params.wv).reshape(shape)
    q = T.rope(q, positions, params.rope_base)
    k = T.rope(k, positions, params.rope_base)
    return q, k, v


def attend(q: Tensor, k: Tensor, v: Tensor, q_pos: np.ndarray, k_pos: np.ndarray) -> Tensor:
    """Causal multi-head attention of ``q`` over ``k``/``v``; returns ``[mq, d]`` before W^O.

    Causality is decided on absolute positions, so compacted (gathered) rows
    keep their original ordering constraints.
    """
    mq, heads, head_dim = q.shape
    with T.flop_scope("attention_scores_values"):
        scores = q.transpose(1, 0, 2) @ k.transpose(1, 2, 0)
        scores = scores * (1.0 / math.sqrt(head_dim)) + T.causal_bias(q_pos, k_pos, scores.dtype)
        mixed = T.softmax(scores, axis=-1) @ v.transpose(1, 0, 2)
    return mixed.transpose(1, 0, 2).reshape(mq, heads * head_dim)


def _packed_attention(h: Tensor, positions: np.ndarray, lengths: Sequence[int], params: AttentionParams) -> Tensor:
    q, k, v = project_qkv(h, positions, params)
    pieces = []
    start = 0
    for n in lengths:
        if n:
            rows = slice(start, start + n)
            pieces.append(attend(q[rows], k[rows], v[rows], positions[rows], positions[rows]))
        start += n
    with T.flop_scope("qkvo_projections"):
        return T.concat(pieces, axis=0) @ params.wo


def attention_full(x: Tensor, params: AttentionParams, positions=None) -> Tensor:
    """Causal multi-head self-attention over one sequence: ``[n, d] -> [n, d]``."""
    n = x.shape[0]
    positions = np.arange(n) if positions is None else np.asarray(positions)
    if np.any(np.diff(positions) <= 0):
        raise ValueError("positions must be strictly increasing")
    return _packed_attention(x, positions, (n,), params)


def attention_routed(x: Tensor, hard_mask, params: AttentionParams, positions=None, lengths=None) -> Tensor:
    """Gather routed rows, attend among them causally, return their ``[k, d]`` updates.

    Rotary phases use the rows' original positions. With no routed rows the
    result is an empty ``[0, d]`` tensor.
    """
    hard_mask = np.asarray(hard_mask, dtype=bool)
    n = x.shape[0]
    if hard_mask.shape != (n,):
        raise DimensionError(f"hard mask {hard_mask.shape} does not match {n} tokens")
    positions = np.arange(n) if positions is None else np.asarray(positions)
    lengths = (n,) if lengths is None else tuple(lengths)
    index = np.flatnonzero(hard_mask)
    if index.size == 0:
        return Tensor(np.zeros((0, x.shape[1]), dtype=x.dtype))
    return _packed_attention(x[index], positions[index], _split_lengths(hard_mask, lengths), params)


def linear_path(x: Tensor, params: AttentionParams, no_vo: bool = False) -> Tensor:
    """Self-only update ``x W^V W^O`` through the attention path's own weights."""
    if no_vo:
        return x
    with T.flop_scope("bypass_projections"):
        return (x @ params.wv) @ params.wo


def mlp(h: Tensor, params: MlpParams) -> Tensor:
    with T.flop_scope("mlp"):
        if params.gate is None:
            return T.silu(h @ params.up) @ params.down
        return (T.silu(h @ params.gate) * (h @ params.up)) @ params.down


# ---------------------------------------------------------------------------
# layer forwards


def _defaults(x: Tensor, positions, lengths):
    n = x.shape[0]
    lengths = (n,) if lengths is None else tuple(lengths)
    if sum(lengths) != n:
        raise DimensionError(f"lengths {lengths} do not sum to {n} rows")
    if positions is None:
        positions = np.concatenate([np.arange(m) for m in lengths]) if lengths else np.zeros(0, int)
    return np.asarray(positions), lengths


def full_layer_forward(x: Tensor, params: LayerParams, positions=None, lengths=None) -> Tensor:
    """Pre-norm attention and MLP sublayers, each with a residual connection."""
    positions, lengths = _defaults(x, positions, lengths)
    h = T.rmsnorm(x, params.norm1, params.eps)
    x = x + _packed_attention(h, positions, lengths, params.attention)
    return x + mlp(T.rmsnorm(x, params.norm2, params.eps), params.mlp)


def dtr_layer_forward(
    x: Tensor,
    params: LayerParams,
    routing: RoutingConfig,
    positions=None,
    lengths=None,
    no_vo: bool = False,
    index: int = 0,
) -> tuple[Tensor, RoutingDecision]:
    """DTR layer: the router picks attention or the linear path per token.

    Gating of the chosen path's output:

    * ``hard_scaled`` -- routed rows get ``g_attn * Attn``, bypassed rows
      ``g_bypass * Lin``.
    * ``soft_mixture`` -- every row gets ``g_attn * A + g_bypass * Lin`` where
      ``A`` is routed attention for routed rows and the self-only update
      (``Lin``) for bypassed ones.
    * ``unit_gate`` -- the chosen path's output unscaled.
    """
    positions, lengths = _defaults(x, positions, lengths)
    n = x.shape[0]
    h = T.rmsnorm(x, params.norm1, params.eps)
    scores = route_soft(h, params.router)
    mask = select(scores, routing, lengths)
    decision = RoutingDecision(layer=index, soft_scores=scores, hard_mask=mask, lengths=lengths)

    routed = np.flatnonzero(mask)
    bypassed = np.flatnonzero(~mask)
    parts = []
    if routed.size:
        att = _packed_attention(h[routed], positions[routed], _split_lengths(mask, lengths), params.attention)
        if routing.gating == "hard_scaled":
            att = att * scores[routed, 0:1]
        elif routing.gating == "soft_mixture":
            lin_r = linear_path(h[routed], params.attention, no_vo)
            att = att * scores[routed, 0:1] + lin_r * scores[routed, 1:2]
        parts.append(T.scatter_rows(att, routed, n))
    if bypassed.size:
        lin = linear_path(h[bypassed], params.attention, no_vo)
        if routing.gating == "hard_scaled":
            lin = lin * scores[bypassed, 1:2]
        parts.append(T.scatter_rows(lin, bypassed, n))
    mixed = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    x = x + mixed
    return x + mlp(T.rmsnorm(x, params.norm2, params.eps), params.mlp), decision
