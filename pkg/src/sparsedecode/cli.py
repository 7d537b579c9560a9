"""Command-line entry point: ``sparsedecode {decode,eval-ppl,needle,analyze,bench}``.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 internal
invariant violation.
"""

import argparse
import json
import sys
from pathlib import Path

from . import analysis, harness
from .errors import (
    BudgetError,
    EngineError,
    FormatError,
    InputError,
    ScheduleError,
)
from .model import (
    MODES,
    DecodeConfig,
    ModelConfig,
    default_reselect_layer,
    default_schedule,
    generate,
)
from .weights_io import SplitMix64, load_weights, synth_weights

EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 2, 3, 4


def _add_model_flags(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights", type=Path, help="TDW1 weight file")
    src.add_argument("--synth-seed", type=int, help="seed for synthetic weights")
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--kv-heads", type=int, default=2)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--ff", type=int, default=128)
    p.add_argument("--vocab", type=int, default=128)


def _add_decode_flags(p):
    p.add_argument("--mode", choices=MODES, default="tidal")
    p.add_argument("--budget", type=int, default=64)
    p.add_argument("--reselect", type=int, default=None)
    p.add_argument("--correction-period", type=int, default=0)
    p.add_argument("--page-size", type=int, default=16)
    p.add_argument("--sinks", type=int, default=4)
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--group-reduce", choices=("sum", "max"), default="sum")
    p.add_argument("--include-current", action="store_true",
                   help="let sparse layers also attend to the token being decoded")


def _add_prompt_flags(p):
    p.add_argument("--prompt-file", type=Path, help="token file (one id per line)")
    p.add_argument("--prompt-len", type=int, default=64)
    p.add_argument("--prompt-seed", type=int, default=0)


def _load_model(args):
    if args.weights is not None:
        return load_weights(args.weights)
    config = ModelConfig(args.layers, args.heads, args.kv_heads, args.head_dim, args.ff,
                         args.vocab)
    return synth_weights(config, args.synth_seed)


def _prompt(args, vocab):
    if args.prompt_file is not None:
        ids = harness.read_token_file(args.prompt_file)
        if not ids:
            raise InputError("prompt file is empty")
        if max(ids) >= vocab:
            raise InputError(f"prompt token id {max(ids)} outside vocabulary of size {vocab}")
        return ids
    if args.prompt_len < 1:
        raise InputError("--prompt-len must be >= 1")
    return [int(t) for t in SplitMix64(args.prompt_seed).next_block(args.prompt_len) % vocab]


def _decode_config(args, n_layers, mode=None):
    mode = mode or args.mode
    reselect = args.reselect if args.reselect is not None else default_reselect_layer(n_layers)
    schedule = default_schedule(n_layers, reselect) if mode == "tidal" else None
    return reselect, DecodeConfig(
        mode=mode,
        budget=args.budget,
        schedule=schedule,
        correction_period=args.correction_period,
        page_size=args.page_size,
        sinks=args.sinks,
        window=args.window,
        group_reduce=args.group_reduce,
        include_current=args.include_current,
    )


def _emit(report, out):
    text = json.dumps(report, indent=2) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)
    return report


def cmd_decode(args):
    weights = _load_model(args)
    cfg = weights.config
    prompt = _prompt(args, cfg.vocab_size)
    reselect, dcfg = _decode_config(args, cfg.n_layers)
    result = generate(prompt, args.steps, weights, dcfg, trace_k=args.trace_k)
    loads = analysis.access_report(result.stats, dcfg, cfg.n_kv_heads)
    agreement = None
    if args.agreement:
        ref = generate(prompt, args.steps, weights, DecodeConfig(mode="full"))
        same = sum(a == b for a, b in zip(ref.tokens, result.tokens))
        agreement = same / len(ref.tokens)
    if args.trace_out is not None:
        if result.trace is None:
            raise InputError("--trace-out requires --trace-k")
        analysis.heatmap_export(result.trace, args.kv_head, args.trace_out)
    report = {
        "mode": dcfg.mode,
        "budget": dcfg.budget,
        "reselect_layer": reselect if dcfg.mode == "tidal" else None,
        "n_steps": args.steps,
        "prompt_length": len(prompt),
        "emitted_token_ids": result.tokens,
        "key_token_loads": loads["counted_key_loads"],
        "value_token_loads": loads["counted_value_loads"],
        "dense_key_loads": loads["dense_key_loads"],
        "counted_ratio": loads["counted_ratio"],
        "analytic_ratio": loads["analytic_ratio"],
        "agreement_vs_full": agreement,
    }
    return _emit(report, args.out)


def cmd_eval_ppl(args):
    weights = _load_model(args)
    tokens = harness.read_token_file(args.tokens)
    reselect, dcfg = _decode_config(args, weights.config.n_layers)
    res = harness.eval_ppl(tokens, weights, dcfg, warmup=args.warmup)
    report = {
        "mode": dcfg.mode,
        "budget": dcfg.budget,
        "reselect_layer": reselect if dcfg.mode == "tidal" else None,
        "tokens": len(tokens),
        "warmup": args.warmup,
        "positions": res["positions"],
        "mean_nats": res["mean_nats"],
        "perplexity": res["perplexity"],
    }
    return _emit(report, args.out)


def cmd_needle(args):
    acc = harness.needle_retrieval(
        n=args.n, budget=args.budget, trials=args.trials, head_dim=args.head_dim,
        page_size=args.page_size, sinks=args.sinks, window=args.window, seed=args.seed,
    )
    report = {
        "n": args.n,
        "budget": args.budget,
        "trials": args.trials,
        "head_dim": args.head_dim,
        "page_size": args.page_size,
        "sinks": args.sinks,
        "window": args.window,
        "seed": args.seed,
        "accuracy": acc,
    }
    return _emit(report, args.out)


def cmd_analyze(args):
    weights = _load_model(args)
    cfg = weights.config
    prompt = _prompt(args, cfg.vocab_size)
    trace = analysis.trace_topk(prompt, weights, args.budget, args.steps)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    matrix = analysis.overlap_matrix(trace)
    curve = analysis.recall_curve(trace, base=2)
    analysis.overlap_csv(matrix, out / "overlap.csv")
    analysis.recall_csv(curve, out / "recall.csv")
    analysis.heatmap_export(trace, args.kv_head, out / "heatmap.csv")
    best = max(curve, key=lambda rv: rv[1]) if curve else (None, None)
    report = {
        "n_layers": cfg.n_layers,
        "k": args.budget,
        "n_steps": args.steps,
        "files": ["overlap.csv", "recall.csv", "heatmap.csv"],
        "best_reselect_layer": best[0],
        "best_mean_recall": best[1],
    }
    return _emit(report, args.out)


def cmd_bench(args):
    report = harness.bench_kernels(
        n=args.n, budget=args.budget, n_layers=args.layers, reselect=args.reselect,
        head_dim=args.head_dim, group=args.group, iters=args.iters, page_size=args.page_size,
        seed=args.seed,
    )
    return _emit(report, args.out)


def build_parser():
    parser = argparse.ArgumentParser(prog="sparsedecode", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decode", help="greedy generation with a chosen attention mode")
    _add_model_flags(p)
    _add_decode_flags(p)
    _add_prompt_flags(p)
    p.add_argument("--steps", type=int, default=16)
    p.add_argument("--agreement", action="store_true", help="also report agreement with full mode")
    p.add_argument("--trace-k", type=int, default=None)
    p.add_argument("--trace-out", type=Path, default=None)
    p.add_argument("--kv-head", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval-ppl", help="teacher-forced cross-entropy on a token file")
    _add_model_flags(p)
    _add_decode_flags(p)
    p.add_argument("--tokens", type=Path, required=True)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_eval_ppl)

    p = sub.add_parser("needle", help="selection-level planted-needle retrieval")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--budget", type=int, default=64)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--page-size", type=int, default=16)
    p.add_argument("--sinks", type=int, default=4)
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_needle)

    p = sub.add_parser("analyze", help="overlap matrix, recall curve and heatmap CSVs")
    _add_model_flags(p)
    _add_prompt_flags(p)
    p.add_argument("--budget", type=int, default=8, help="top-k size")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--kv-head", type=int, default=0)
    p.add_argument("--out-dir", type=Path, default=Path("analysis_out"))
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="per-kernel wall-clock and token loads")
    p.add_argument("--n", type=int, default=100000)
    p.add_argument("--budget", type=int, default=512)
    p.add_argument("--layers", type=int, default=32)
    p.add_argument("--reselect", type=int, default=None)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--group", type=int, default=4, help="query heads per KV head")
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--page-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ScheduleError, BudgetError) as exc:
        print(f"sparsedecode: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, InputError, OSError) as exc:
        print(f"sparsedecode: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EngineError as exc:
        print(f"sparsedecode: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
