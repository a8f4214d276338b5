"""``dtrnet`` command line: train, eval, generate, analyze, ablate.

Exit codes: 0 success, 1 domain error (non-finite loss, unsupported routing
mode, ...), 2 configuration or I/O error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import analysis
from .ablation import COMPARISON_HEADER, SUITES, comparison_rows, run_suite
from .config import RunConfig
from .data import ByteTokenizer, decision_records, load_checkpoint, read_decision_log, save_checkpoint, write_decision_log
from .errors import CheckpointError, ConfigError, DTRNetError, NonFiniteLossError
from .model import build_model, generate
from .objective import CsvSink, JsonlSink, evaluate, train

log = logging.getLogger("dtrnet")

EXIT_OK, EXIT_DOMAIN, EXIT_CONFIG = 0, 1, 2


def _thread_limit():
    """Cap BLAS threads from ``DTRNET_THREADS``; a no-op when unset."""
    value = os.environ.get("DTRNET_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"DTRNET_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError("DTRNET_THREADS must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    cfg.write_resolved(out)
    model = build_model(cfg.model)
    dataset = cfg.train_dataset()
    sinks = [JsonlSink(out / "metrics.jsonl"), CsvSink(out / "metrics.csv", model.dtr_layers)]
    try:
        model, records = train(model, dataset, cfg.train, sinks, out / "checkpoints", save_checkpoint)
    finally:
        for s in sinks:
            s.close()
    save_checkpoint(model, out / "checkpoints" / "final")
    ce, _ = evaluate(model, cfg.eval_examples())
    summary = {"steps": len(records), "final_train_ce": records[-1].ce_loss, "val_ce": ce, "val_perplexity": math.exp(ce)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model = load_checkpoint(args.ckpt)
    cfg.model = model.config
    out = _out_dir(args, cfg)
    cfg.write_resolved(out)
    examples = cfg.eval_examples(args.data)
    ce, decisions = evaluate(model, examples)
    records = decision_records(decisions)
    write_decision_log(records, out / "decisions.jsonl")
    analysis.write_csv(out / "loads.csv", analysis.LOADS_HEADER, analysis.load_statistics(records))
    result = {"examples": len(examples), "ce": ce, "perplexity": math.exp(ce)}
    (out / "eval.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(result))
    return EXIT_OK


def cmd_generate(args) -> int:
    model = load_checkpoint(args.ckpt)
    tok = ByteTokenizer()
    if args.prompt_file:
        text = Path(args.prompt_file).read_bytes()
    else:
        text = (args.prompt or "").encode("utf-8")
    prompt = tok.encode(text, bos=True)
    new, cache = generate(model, prompt, args.max_new, args.temp, args.seed, return_cache=True)
    if args.ids:
        print(" ".join(str(t) for t in new))
    else:
        sys.stdout.write(tok.decode(new).decode("utf-8", errors="replace") + "\n")
    if args.report_kv:
        report = {"layers": list(model.kinds), "cache_entries": cache.sizes(), "cache_bytes": cache.bytes()}
        print(json.dumps(report), file=sys.stderr)
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    cfg.write_resolved(out)
    geometry = analysis.Geometry.of(cfg.model)
    pattern = cfg.analyze.pattern or cfg.model.pattern
    k = cfg.analyze.k if args.k is None else args.k
    lengths = cfg.analyze.lengths if not args.lengths else args.lengths
    if args.what == "flops":
        rows = analysis.flops_sweep(geometry, pattern, k, lengths, mlp=cfg.model.mlp, no_vo=cfg.model.no_vo_projection)
        analysis.write_csv(out / "flops_sweep.csv", analysis.FLOPS_SWEEP_HEADER, rows)
        report = analysis.flops_model(geometry, pattern, k, max(lengths), cfg.model.mlp, cfg.model.no_vo_projection)
        analysis.write_csv(out / "flops_layers.csv", analysis.FLOPS_LAYER_HEADER, report.layers)
    elif args.what == "memory":
        rows = analysis.memory_sweep(geometry, pattern, k, lengths, cfg.analyze.bytes_per_element)
        analysis.write_csv(out / "memory_sweep.csv", analysis.MEMORY_SWEEP_HEADER, rows)
    elif args.what == "similarity":
        if not args.ckpt:
            raise ConfigError("analyze similarity needs --ckpt")
        model = load_checkpoint(args.ckpt)
        cfg.model = model.config
        examples = cfg.eval_examples(args.data)
        sim = analysis.layer_similarity(model, [e.tokens for e in examples])
        analysis.write_similarity_csv(out / "similarity.csv", sim)
    else:
        if not args.decisions:
            raise ConfigError("analyze loads needs --decisions")
        stats = analysis.load_statistics(read_decision_log(args.decisions))
        analysis.write_csv(out / "loads.csv", analysis.LOADS_HEADER, stats)
    print(str(out))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    cfg.write_resolved(out)
    seeds = args.seeds or [cfg.train.seed]
    results = run_suite(args.suite, cfg.model, cfg.train, cfg.train_dataset(), cfg.eval_examples(), seeds, out)
    rows = comparison_rows(args.suite, results)
    analysis.write_csv(out / "comparison.csv", COMPARISON_HEADER, rows)
    for r in rows:
        print(f"{r['variant']:>16} seed={r['seed']} val_ce={r['val_ce']:.4f} ppl={r['perplexity']:.3f} "
              f"load={r['mean_attention_load']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtrnet", description="Dynamic token routing language models on numpy.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity and per-layer attention loads of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--data", help="corpus file; defaults to the config's data section")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="greedy or sampled continuation of a prompt")
    p.add_argument("--ckpt", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--prompt")
    group.add_argument("--prompt-file")
    p.add_argument("--max-new", type=int, default=32)
    p.add_argument("--temp", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ids", action="store_true", help="print token ids instead of decoded bytes")
    p.add_argument("--report-kv", action="store_true", help="print per-layer cache sizes to stderr")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("analyze", help="cost models, similarity and load reports as CSV")
    p.add_argument("what", choices=["flops", "memory", "similarity", "loads"])
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--k", type=float, help="routed fraction for DTR layers")
    p.add_argument("--lengths", type=int, nargs="+")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--decisions", help="decision log written by `dtrnet eval`")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ablate", help="paired variant runs under a shared seed and budget")
    p.add_argument("--suite", required=True, choices=SUITES)
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, nargs="+")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except NonFiniteLossError as exc:
        print(f"dtrnet: {exc}; snapshot: {json.dumps(exc.snapshot, default=str)}", file=sys.stderr)
        return EXIT_DOMAIN
    except (ConfigError, CheckpointError, OSError) as exc:
        print(f"dtrnet: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DTRNetError, ValueError, IndexError) as exc:
        print(f"dtrnet: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
