import math

import numpy as np
import pytest

from sparsedecode import DecodeConfig, KvCache, ModelConfig, ModelWeights, default_schedule, prefill
from sparsedecode.errors import FormatError, InputError
from sparsedecode.harness import (
    bench_kernels,
    eval_ppl,
    needle_retrieval,
    read_token_file,
    write_token_file,
)
from sparsedecode.model import decode_step


def test_token_file_roundtrip(tmp_path):
    p = tmp_path / "t.txt"
    write_token_file(p, [1, 20, 3])
    assert p.read_text() == "1\n20\n3\n"
    assert read_token_file(p) == [1, 20, 3]
    p.write_text("1\nx\n")
    with pytest.raises(FormatError):
        read_token_file(p)


def test_zero_weights_uniform_ce():
    cfg = ModelConfig(2, 2, 1, 8, 16, 50)
    res = eval_ppl(list(range(20)), ModelWeights.zeros(cfg), DecodeConfig())
    assert abs(res["mean_nats"] - math.log(50)) <= 1e-5
    assert res["positions"] == 19


def test_ppl_rejects_out_of_vocab(tiny_weights):
    with pytest.raises(InputError):
        eval_ppl([1, 2, 500], tiny_weights, DecodeConfig())


def test_ppl_vs_stepwise_oracle(tiny_weights):
    rng = np.random.default_rng(5)
    tokens = rng.integers(0, 128, 40).tolist()
    dcfg = DecodeConfig(mode="tidal", budget=6, schedule=default_schedule(8, 4))
    warmup = 10
    got = eval_ppl(tokens, tiny_weights, dcfg, warmup=warmup)

    cache, _ = prefill(tokens[: warmup - 1], tiny_weights)
    losses = []
    for pos in range(warmup - 1, len(tokens) - 1):
        logits = decode_step(tokens[pos], cache, tiny_weights, dcfg).astype(np.float64)
        p = np.exp(logits - logits.max())
        losses.append(-math.log(p[tokens[pos + 1]] / p.sum()))
    assert got["positions"] == len(tokens) - warmup
    assert got["mean_nats"] == pytest.approx(np.mean(losses), abs=1e-9)


def test_ppl_full_budget_equals_full(tiny_weights):
    rng = np.random.default_rng(6)
    tokens = rng.integers(0, 128, 48).tolist()
    full = eval_ppl(tokens, tiny_weights, DecodeConfig())
    tidal = eval_ppl(tokens, tiny_weights,
                     DecodeConfig(mode="tidal", budget=48, schedule=default_schedule(8, 3)))
    assert full["mean_nats"] == tidal["mean_nats"]


def test_needle_small():
    acc = needle_retrieval(n=500, budget=8, trials=50, page_size=1, window=16, seed=3)
    assert acc["tidal"] == acc["perlayer"] == acc["page"] == 1.0
    assert acc["window"] <= 0.2


def test_needle_budget_check():
    with pytest.raises(InputError):
        needle_retrieval(n=5, budget=6, trials=1)


def test_bench_small():
    rep = bench_kernels(n=2000, budget=64, n_layers=8, head_dim=16, group=2, iters=1)
    k = rep["kernels"]
    assert k["full"]["key_token_loads"] == 2000 and k["sparse"]["key_token_loads"] == 64
    assert k["sparse"]["value_token_loads"] == 64
    assert rep["counted_ratio"] == rep["analytic_ratio"] == rep["closed_form_ratio"]
    assert rep["counted_ratio"] == pytest.approx(8 * 2000 / (4 * 2000 + 4 * 64))
