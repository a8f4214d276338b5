"""Paired variant runs under a shared seed and step budget."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .model import ModelConfig, build_model, count_attention_loads
from .objective import CsvSink, JsonlSink, MetricsRecord, TrainConfig, evaluate, train
from .routing import RoutingConfig

log = logging.getLogger(__name__)

SUITES = ("a1", "a2", "a3", "a5")
COMPARISON_HEADER = ["suite", "variant", "seed", "steps", "val_ce", "perplexity", "mean_attention_load"]


def suite_variants(suite: str, base: ModelConfig) -> dict[str, ModelConfig]:
    """Named model configs for one suite; the first entry is the reference variant.

    * ``a1`` token choice vs expert choice (capacity from the base routing, 0.25 if unset)
    * ``a2`` the four layer-pattern presets (ones with no DTR layer at this depth are dropped)
    * ``a3`` bilayer vs all-bypass DTR layers
    * ``a5`` bilayer vs bypass without the V/O projections
    """
    r = dataclasses.replace
    if suite == "a1":
        cap = base.routing.capacity if base.routing.capacity is not None else 0.25
        return {
            "token_choice": r(base, routing=r(base.routing, mode="token_choice", capacity=None)),
            "expert_choice": r(base, routing=r(base.routing, mode="expert_choice", capacity=cap)),
        }
    if suite == "a2":
        out = {}
        for preset in ("bilayer", "trilayer", "laterhalf", "six_transformer"):
            try:
                out[preset] = r(base, pattern=preset)
            except ConfigError as exc:
                log.warning("a2: dropping %s (%s)", preset, exc)
        return out
    if suite == "a3":
        return {"bilayer": r(base, pattern="bilayer"), "skip": r(base, pattern="bilayer", skip_all_attention=True)}
    if suite == "a5":
        return {"bilayer": r(base, pattern="bilayer"), "no_vo": r(base, pattern="bilayer", no_vo_projection=True)}
    raise ConfigError(f"unknown ablation suite {suite!r}; expected one of {SUITES}")


@dataclass
class VariantResult:
    variant: str
    seed: int
    steps: int
    val_ce: float
    mean_attention_load: float
    records: list[MetricsRecord]

    @property
    def perplexity(self) -> float:
        return math.exp(self.val_ce)


def run_variant(
    name: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset,
    eval_examples: Sequence,
    out_dir: Path | None = None,
) -> VariantResult:
    """Build from ``train_config.seed``, train, and evaluate on held-out examples."""
    model = build_model(model_config, seed=train_config.seed)
    sinks = []
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        sinks = [JsonlSink(out_dir / "metrics.jsonl"), CsvSink(out_dir / "metrics.csv", model.dtr_layers)]
    try:
        model, records = train(model, dataset, train_config, sinks)
    finally:
        for s in sinks:
            s.close()
    ce, decisions = evaluate(model, eval_examples)
    loads = count_attention_loads(decisions)
    return VariantResult(name, train_config.seed, train_config.total_steps, ce, float(np.mean(loads)) if loads else 0.0, records)


def run_suite(
    suite: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset,
    eval_examples: Sequence,
    seeds: Sequence[int] = (0,),
    out_dir: Path | None = None,
) -> list[VariantResult]:
    results = []
    for seed in seeds:
        tc = dataclasses.replace(train_config, seed=seed)
        for name, cfg in suite_variants(suite, model_config).items():
            sub = None if out_dir is None else Path(out_dir) / f"{name}-seed{seed}"
            res = run_variant(name, cfg, tc, dataset, eval_examples, sub)
            log.info("%s seed=%d val_ce=%.4f load=%.3f", name, seed, res.val_ce, res.mean_attention_load)
            results.append(res)
    return results


def comparison_rows(suite: str, results: Sequence[VariantResult]) -> list[dict]:
    return [
        {
            "suite": suite,
            "variant": r.variant,
            "seed": r.seed,
            "steps": r.steps,
            "val_ce": r.val_ce,
            "perplexity": r.perplexity,
            "mean_attention_load": r.mean_attention_load,
        }
        for r in results
    ]


def median_margin(results: Sequence[VariantResult], reference: str, other: str) -> float:
    """Median over seeds of ``CE(other) - CE(reference)``; positive means the reference wins."""
    ref = {r.seed: r.val_ce for r in results if r.variant == reference}
    oth = {r.seed: r.val_ce for r in results if r.variant == other}
    return float(np.median([oth[s] - ref[s] for s in sorted(ref) if s in oth]))
