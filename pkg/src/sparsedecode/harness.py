"""Evaluation drivers behind the CLI: perplexity, needle retrieval, kernel bench."""

import time
from pathlib import Path

import numpy as np

from . import kernels
from .analysis import access_report, analytic_load_ratio
from .attention import (
    AccessStats,
    full_attention,
    full_attention_with_selection,
    page_estimate_select,
    sparse_attention,
    window_select,
)
from .errors import FormatError, InputError
from .kvcache import KvCache
from .mathops import arg_top_k
from .model import DecodeConfig, decode_step, default_reselect_layer, default_schedule, prefill

NEEDLE_MODES = ("tidal", "perlayer", "page", "window")


def read_token_file(path):
    ids = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            ids.append(int(line))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: not an integer token id: {line!r}") from None
        if ids[-1] < 0:
            raise FormatError(f"{path}:{lineno}: negative token id")
    return ids


def write_token_file(path, ids):
    Path(path).write_text("".join(f"{int(t)}\n" for t in ids))


def _cross_entropy(logits, target):
    x = logits.astype(np.float64)
    top = x.max()
    return float(top + np.log(np.exp(x - top).sum()) - x[target])


def eval_ppl(tokens, weights, dcfg, warmup=1, stats=None):
    """Teacher-forced next-token cross-entropy (nats) over positions >= warmup.

    Tokens before ``warmup - 1`` are prefilled; every scored prediction comes
    out of a decode step under ``dcfg``.
    """
    cfg = weights.config
    tokens = [int(t) for t in tokens]
    if len(tokens) < 2:
        raise InputError("need at least two tokens to score")
    bad = [t for t in tokens if not 0 <= t < cfg.vocab_size]
    if bad:
        raise InputError(f"token id {bad[0]} outside vocabulary of size {cfg.vocab_size}")
    first = max(1, int(warmup))
    if first >= len(tokens):
        raise InputError(f"warmup {warmup} leaves nothing to score")
    cache = KvCache(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim, capacity=len(tokens))
    if first > 1:
        prefill(tokens[: first - 1], weights, cache)
    losses = []
    for pos in range(first - 1, len(tokens) - 1):
        logits = decode_step(tokens[pos], cache, weights, dcfg, stats)
        losses.append(_cross_entropy(logits, tokens[pos + 1]))
    mean = float(np.mean(losses))
    return {"mean_nats": mean, "perplexity": float(np.exp(mean)), "positions": len(losses)}


def _needle_trial(rng, n, head_dim, m, page_size, sinks, window, modes):
    keys = rng.standard_normal((n, head_dim)).astype(np.float32)
    values = rng.standard_normal((n, head_dim)).astype(np.float32)
    q = rng.standard_normal(head_dim).astype(np.float32)
    pos = int(rng.integers(n))
    filler_best = float(np.max(keys @ q))
    scale = 2.0 * max(filler_best, 1.0) / float(q @ q)
    keys[pos] = (scale * q).astype(np.float32)
    hits = {}
    for mode in modes:
        if mode == "tidal":
            _, idx = full_attention_with_selection(q, keys, values, m)
        elif mode == "perlayer":
            idx = arg_top_k(kernels.inner_products(q[None, :], keys)[0], m)
        elif mode == "page":
            idx = page_estimate_select(q, keys, m, page_size)
        elif mode == "window":
            idx = window_select(n, sinks, window)
        else:
            raise InputError(f"unknown needle mode {mode!r}")
        hits[mode] = bool(np.isin(pos, idx))
    return hits


def needle_retrieval(n=10000, budget=64, trials=1000, head_dim=16, page_size=16,
                     sinks=4, window=64, seed=0, modes=NEEDLE_MODES):
    """Plant a scaled copy of the probe query among ``n`` random keys and
    count how often each method's selected set contains it."""
    if budget < 1 or n < budget:
        raise InputError("need 1 <= budget <= n")
    rng = np.random.default_rng(seed)
    counts = dict.fromkeys(modes, 0)
    for _ in range(trials):
        for mode, hit in _needle_trial(rng, n, head_dim, budget, page_size, sinks, window,
                                       modes).items():
            counts[mode] += hit
    return {mode: counts[mode] / trials for mode in modes}


def _time(fn, iters):
    fn()  # warm-up (JIT compilation)
    t0 = time.perf_counter()
    for _ in range(iters):
        fn()
    return (time.perf_counter() - t0) / iters


def bench_kernels(n=100000, budget=512, n_layers=32, reselect=None, head_dim=64, group=4,
                  iters=5, page_size=16, seed=0):
    """Wall-clock per kernel at one (n, m), plus token loads of a full
    decode step's worth of layers under the default schedule."""
    rng = np.random.default_rng(seed)
    cache = KvCache(1, 1, head_dim, capacity=n)
    cache.extend(0, rng.standard_normal((n, head_dim)).astype(np.float32),
                 rng.standard_normal((n, head_dim)).astype(np.float32))
    keys, values = cache.full_view(0, 0)
    q = rng.standard_normal((group, head_dim)).astype(np.float32)
    _, buffer = full_attention_with_selection(q, keys, values, budget)

    kernels_ = {
        "full": lambda s=None: full_attention(q, keys, values, s),
        "select": lambda s=None: full_attention_with_selection(q, keys, values, budget, s),
        "sparse": lambda s=None: sparse_attention(q, cache, 0, 0, buffer, s),
        "page": lambda s=None: sparse_attention(
            q, cache, 0, 0, page_estimate_select(q, keys, budget, page_size, s), s),
    }
    report = {"backend": kernels.BACKEND, "n": n, "budget": budget, "kernels": {}}
    for name, fn in kernels_.items():
        seconds = _time(fn, iters)
        stats = AccessStats()
        fn(stats)
        report["kernels"][name] = {
            "mean_seconds": seconds,
            "key_token_loads": int(stats.key_token_loads.sum()),
            "value_token_loads": int(stats.value_token_loads.sum()),
        }

    if reselect is None:
        reselect = default_reselect_layer(n_layers)
    dcfg = DecodeConfig(mode="tidal", budget=budget, schedule=default_schedule(n_layers, reselect))
    stats = AccessStats(n_layers)
    stats.begin_step(n)
    for li, role in enumerate(dcfg.roles_for(n_layers)):
        stats.layer = li
        kernels_["sparse" if role == "sparse" else ("select" if role == "select" else "full")](stats)
    loads = access_report(stats, dcfg, 1)
    report["schedule"] = {"n_layers": n_layers, "reselect": reselect}
    report["counted_ratio"] = loads["counted_ratio"]
    report["analytic_ratio"] = loads["analytic_ratio"]
    report["closed_form_ratio"] = analytic_load_ratio(n_layers, n, budget, 2, 2)
    return report
