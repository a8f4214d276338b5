"""Layer-stack assembly, whole-model forward, and routing-aware cached decoding."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, SequenceLengthError, UnsupportedModeError
from .layers import (
    AttentionParams,
    LayerParams,
    MlpParams,
    attend,
    dtr_layer_forward,
    full_layer_forward,
    linear_path,
    mlp,
    project_qkv,
)
from .routing import RouterParams, RoutingConfig, RoutingDecision, route_soft, select
from .tensor import Tensor

PRESETS = ("bilayer", "trilayer", "laterhalf", "six_transformer")
PRECISIONS = {"float32": np.float32, "float64": np.float64}


def expand_pattern(pattern: str, n_layers: int) -> str:
    """Expand a preset name or validate an explicit ``T``/``D`` string.

    Presets keep the first and last layers full Transformers. When a motif's
    natural continuation would end on a DTR layer, the last slot becomes
    ``T`` and, if that leaves two trailing ``T`` layers, the one before it
    becomes ``D``.
    """
    if n_layers < 1:
        raise ConfigError(f"n_layers must be positive, got {n_layers}")
    if pattern in PRESETS:
        L = n_layers
        if pattern == "bilayer":
            kinds = ["T" if i % 2 == 0 else "D" for i in range(L)]
        elif pattern == "trilayer":
            kinds = ["T" if i % 3 == 0 else "D" for i in range(L)]
        elif pattern == "laterhalf":
            kinds = ["T" if i < math.ceil(L / 2) else "D" for i in range(L)]
        else:
            full = {0, 1, L // 2 - 1, L // 2, L - 2, L - 1}
            kinds = ["T" if i in full else "D" for i in range(L)]
        if kinds[-1] == "D":
            kinds[-1] = "T"
            if L > 2 and kinds[-2] == "T":
                kinds[-2] = "D"
        kinds[0] = "T"
        expanded = "".join(kinds)
        if "D" not in expanded:
            raise ConfigError(f"preset {pattern!r} has no DTR layer at n_layers={L}")
        return expanded
    explicit = pattern.replace("-", "").replace(",", "").replace(" ", "")
    bad = [i for i, c in enumerate(explicit) if c not in "TD"]
    if bad:
        raise ConfigError(f"pattern {pattern!r}: invalid layer kind at index {bad} (expected T or D)")
    if len(explicit) != n_layers:
        raise ConfigError(f"pattern {pattern!r} has {len(explicit)} layers, config says {n_layers}")
    return explicit


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 32
    d_ff: int = 64
    n_heads: int = 2
    vocab_size: int = 259
    max_seq_len: int = 256
    pattern: str = "bilayer"
    skip_all_attention: bool = False
    no_vo_projection: bool = False
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    precision: Literal["float32", "float64"] = "float32"
    seed: int = 0
    mlp: Literal["gated", "plain"] = "gated"
    tie_embeddings: bool = False
    router_attention_bias: float = 0.0
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self):
        if isinstance(self.routing, dict):
            self.routing = RoutingConfig(**self.routing)
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {tuple(PRECISIONS)}, got {self.precision!r}")
        if self.mlp not in ("gated", "plain"):
            raise ConfigError(f"mlp must be 'gated' or 'plain', got {self.mlp!r}")
        for name in ("n_layers", "d_model", "d_ff", "n_heads", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary encoding")
        if self.d_model % 2:
            raise ConfigError("d_model must be even (router hidden size is d/2)")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be positive")
        self.layer_kinds  # validates the pattern

    @property
    def layer_kinds(self) -> str:
        return expand_pattern(self.pattern, self.n_layers)

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config key(s): {unknown}")
        return cls(**data)


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Model:
    """Parameters plus layer structure. ``params`` order fixes the checkpoint layout."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.kinds = config.layer_kinds
        self.layers: list[LayerParams] = []
        for i, kind in enumerate(self.kinds):
            p = f"layers.{i}."
            attention = AttentionParams(
                wq=params[p + "attn.wq"],
                wk=params[p + "attn.wk"],
                wv=params[p + "attn.wv"],
                wo=params[p + "attn.wo"],
                heads=config.n_heads,
                rope_base=config.rope_base,
            )
            mlp_params = MlpParams(
                up=params[p + "mlp.up"], down=params[p + "mlp.down"], gate=params.get(p + "mlp.gate")
            )
            router = None
            if kind == "D":
                router = RouterParams(
                    w1=params[p + "router.w1"], w2=params[p + "router.w2"], bias=params.get(p + "router.bias")
                )
            self.layers.append(
                LayerParams(
                    kind=kind,
                    attention=attention,
                    mlp=mlp_params,
                    norm1=params[p + "norm1"],
                    norm2=params[p + "norm2"],
                    router=router,
                    eps=config.norm_eps,
                )
            )

    @property
    def embed(self) -> Tensor:
        return self.params["embed"]

    @property
    def head(self) -> Tensor:
        return self.params["embed"] if self.config.tie_embeddings else self.params["head"]

    @property
    def dtr_layers(self) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k == "D"]

    def routing_for(self, override: RoutingConfig | None = None) -> RoutingConfig:
        routing = override or self.config.routing
        if self.config.skip_all_attention:
            routing = dataclasses.replace(routing, force="bypass")
        return routing

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, precision: str) -> "Model":
        config = dataclasses.replace(self.config, precision=precision)
        dtype = PRECISIONS[precision]
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return Model(config, params)


def build_model(config: ModelConfig, seed: int | None = None) -> Model:
    """Deterministic initialisation: truncated normal (std ``init_std``), unit norm gains, zero router W2."""
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    d, d_ff, V, std = config.d_model, config.d_ff, config.vocab_size, config.init_std
    dtype = config.dtype
    arrays: dict[str, np.ndarray] = {"embed": _trunc_normal(rng, (V, d), std)}
    for i, kind in enumerate(config.layer_kinds):
        p = f"layers.{i}."
        arrays[p + "norm1"] = np.ones(d)
        for name in ("wq", "wk", "wv", "wo"):
            arrays[p + "attn." + name] = _trunc_normal(rng, (d, d), std)
        arrays[p + "norm2"] = np.ones(d)
        if config.mlp == "gated":
            arrays[p + "mlp.gate"] = _trunc_normal(rng, (d, d_ff), std)
        arrays[p + "mlp.up"] = _trunc_normal(rng, (d, d_ff), std)
        arrays[p + "mlp.down"] = _trunc_normal(rng, (d_ff, d), std)
        if kind == "D":
            arrays[p + "router.w1"] = _trunc_normal(rng, (d, d // 2), std)
            arrays[p + "router.w2"] = np.zeros((d // 2, 2))
            if config.router_attention_bias:
                arrays[p + "router.bias"] = np.array([config.router_attention_bias, 0.0])
    arrays["norm_f"] = np.ones(d)
    if not config.tie_embeddings:
        arrays["head"] = _trunc_normal(rng, (V, d), std)
    params = {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in arrays.items()}
    return Model(config, params)


# ---------------------------------------------------------------------------
# teacher-forced forward


@dataclass
class ForwardOutput:
    logits: Tensor  # [N, V]
    decisions: list[RoutingDecision]
    hidden: list[np.ndarray] | None = None  # [L+1] x [N, d], index 0 = embeddings


def _check_tokens(model: Model, seqs: Sequence[np.ndarray]) -> None:
    V = model.config.vocab_size
    for s in seqs:
        if len(s) == 0:
            raise ValueError("empty sequence")
        if len(s) > model.config.max_seq_len:
            raise SequenceLengthError(f"sequence of {len(s)} tokens exceeds max_seq_len={model.config.max_seq_len}")
        if s.min() < 0 or s.max() >= V:
            raise IndexError(f"token id outside vocabulary [0, {V})")


def forward_batch(
    model: Model,
    sequences: Iterable[Sequence[int]],
    routing: RoutingConfig | None = None,
    capture_hidden: bool = False,
) -> ForwardOutput:
    """Teacher-forced pass over several sequences packed row-wise.

    Records on the active tape if one is open.
    """
    seqs = [np.asarray(s, dtype=np.int64) for s in sequences]
    _check_tokens(model, seqs)
    lengths = tuple(len(s) for s in seqs)
    tokens = np.concatenate(seqs)
    positions = np.concatenate([np.arange(n) for n in lengths])
    routing = model.routing_for(routing)
    cfg = model.config

    x = model.embed[tokens]
    hidden = [x.data] if capture_hidden else None
    decisions = []
    for i, layer in enumerate(model.layers):
        with T.flop_scope(f"layer{i}"):
            if layer.kind == "T":
                x = full_layer_forward(x, layer, positions, lengths)
            else:
                x, decision = dtr_layer_forward(
                    x, layer, routing, positions, lengths, no_vo=cfg.no_vo_projection, index=i
                )
                decisions.append(decision)
        if capture_hidden:
            hidden.append(x.data)
    h = T.rmsnorm(x, model.params["norm_f"], cfg.norm_eps)
    with T.flop_scope("head"):
        logits = h @ model.head.T
    return ForwardOutput(logits, decisions, hidden)


def forward(
    model: Model,
    tokens: Sequence[int],
    mode: Literal["train", "eval"] = "eval",
    routing: RoutingConfig | None = None,
) -> tuple[Tensor, list[RoutingDecision]]:
    """Forward one sequence; ``eval`` never records on a tape."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval":
        with T.no_tape():
            out = forward_batch(model, [tokens], routing)
    else:
        out = forward_batch(model, [tokens], routing)
    return out.logits, out.decisions


def count_attention_loads(decisions: Sequence[RoutingDecision]) -> list[float]:
    """Fraction of tokens sent to attention in each DTR layer."""
    return [d.attention_load / d.num_tokens for d in decisions]


# ---------------------------------------------------------------------------
# cached incremental decoding


class LayerCache:
    """Post-rotary keys and values for the tokens a layer actually attended with."""

    def __init__(self, capacity: int, heads: int, head_dim: int, dtype):
        self.keys = np.zeros((capacity, heads, head_dim), dtype=dtype)
        self.values = np.zeros((capacity, heads, head_dim), dtype=dtype)
        self.positions = np.zeros(capacity, dtype=np.int64)
        self.size = 0

    def append(self, key: np.ndarray, value: np.ndarray, position: int) -> None:
        self.keys[self.size] = key
        self.values[self.size] = value
        self.positions[self.size] = position
        self.size += 1

    def view(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.size
        return self.keys[:n], self.values[:n], self.positions[:n]


class KvCache:
    def __init__(self, model: Model):
        cfg = model.config
        head_dim = cfg.d_model // cfg.n_heads
        self.layers = [LayerCache(cfg.max_seq_len, cfg.n_heads, head_dim, cfg.dtype) for _ in model.layers]
        self.length = 0

    def sizes(self) -> list[int]:
        return [c.size for c in self.layers]

    def bytes(self, bytes_per_element: int | None = None) -> int:
        total = 0
        for c in self.layers:
            per = c.keys.dtype.itemsize if bytes_per_element is None else bytes_per_element
            total += 2 * per * c.keys.shape[1] * c.keys.shape[2] * c.size
        return total


def decode_step(model: Model, token: int, cache: KvCache, routing: RoutingConfig | None = None) -> np.ndarray:
    """Feed one token at position ``cache.length``; returns its next-token logits ``[V]``.

    DTR layers decide routing from the token's own hidden state. A routed
    token attends over the layer's cached entries and appends its key/value;
    a bypassed token takes the linear path and leaves the cache untouched.
    """
    cfg = model.config
    routing = model.routing_for(routing)
    if routing.mode == "expert_choice" and routing.force is None:
        raise UnsupportedModeError("expert-choice routing cannot drive incremental decoding")
    if not 0 <= token < cfg.vocab_size:
        raise IndexError(f"token id {token} outside vocabulary [0, {cfg.vocab_size})")
    pos = cache.length
    if pos >= cfg.max_seq_len:
        raise SequenceLengthError(f"position {pos} exceeds max_seq_len={cfg.max_seq_len}")
    here = np.array([pos])
    with T.no_tape():
        x = model.embed[np.array([token])]
        for i, layer in enumerate(model.layers):
            h = T.rmsnorm(x, layer.norm1, layer.eps)
            scores = None
            routed = True
            if layer.kind == "D":
                scores = route_soft(h, layer.router)
                routed = bool(select(scores, routing, incremental=True)[0])
            if routed:
                q, k, v = project_qkv(h, here, layer.attention)
                lc = cache.layers[i]
                lc.append(k.data[0], v.data[0], pos)
                keys, values, kpos = lc.view()
                mixed = attend(q, Tensor(keys), Tensor(values), here, kpos) @ layer.attention.wo
                if scores is not None:
                    if routing.gating == "hard_scaled":
                        mixed = mixed * scores[:, 0:1]
                    elif routing.gating == "soft_mixture":
                        lin = linear_path(h, layer.attention, cfg.no_vo_projection)
                        mixed = mixed * scores[:, 0:1] + lin * scores[:, 1:2]
            else:
                mixed = linear_path(h, layer.attention, cfg.no_vo_projection)
                if routing.gating == "hard_scaled":
                    mixed = mixed * scores[:, 1:2]
            x = x + mixed
            x = x + mlp(T.rmsnorm(x, layer.norm2, layer.eps), layer.mlp)
        logits = T.rmsnorm(x, model.params["norm_f"], cfg.norm_eps) @ model.head.T
    cache.length += 1
    return logits.data[0]


def incremental_logits(model: Model, tokens: Sequence[int], routing: RoutingConfig | None = None):
    """Logits for every prefix of ``tokens`` computed one token at a time; returns ``(logits, cache)``."""
    cache = KvCache(model)
    rows = [decode_step(model, int(t), cache, routing) for t in tokens]
    return np.stack(rows), cache


def generate(
    model: Model,
    prompt: Sequence[int],
    max_new: int,
    temperature: float = 0.0,
    seed: int = 0,
    routing: RoutingConfig | None = None,
    return_cache: bool = False,
):
    """Autoregressive continuation of ``prompt``; returns the new tokens only.

    ``temperature == 0`` is greedy decoding with ties going to the lowest id.
    """
    routing = model.routing_for(routing)
    if routing.mode == "expert_choice" and routing.force is None:
        raise UnsupportedModeError("generation requires token-choice routing; expert choice is teacher-forced only")
    if len(prompt) == 0:
        raise ValueError("prompt must contain at least one token")
    if len(prompt) + max_new > model.config.max_seq_len:
        raise SequenceLengthError(
            f"prompt ({len(prompt)}) + max_new ({max_new}) exceeds max_seq_len={model.config.max_seq_len}"
        )
    rng = np.random.default_rng(seed)
    cache = KvCache(model)
    logits = None
    for t in prompt:
        logits = decode_step(model, int(t), cache, routing)
    out: list[int] = []
    for step in range(max_new):
        if temperature <= 0:
            nxt = int(np.argmax(logits))
        else:
            z = logits.astype(np.float64) / temperature
            p = np.exp(z - z.max())
            p /= p.sum()
            nxt = int(rng.choice(len(p), p=p))
        out.append(nxt)
        if step + 1 < max_new:
            logits = decode_step(model, nxt, cache, routing)
    return (out, cache) if return_cache else out
