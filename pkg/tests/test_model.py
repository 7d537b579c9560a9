import numpy as np
import pytest

from sparsedecode import (
    DecodeConfig,
    KvCache,
    LayerSchedule,
    ModelConfig,
    Role,
    cache_correction,
    decode_step,
    default_reselect_layer,
    default_schedule,
    generate,
    prefill,
    synth_weights,
)
from sparsedecode.attention import AccessStats
from sparsedecode.errors import InputError, ScheduleError, ShapeError, StateError

PROMPT = [5, 17, 99, 3, 64, 64, 12, 7, 101, 42, 0, 127]


def reference_logits(weights, tokens):
    """Independent float64 dense decoder over the whole sequence."""
    cfg = weights.config
    d, hd, H, KV = cfg.d_model, cfg.head_dim, cfg.n_heads, cfg.n_kv_heads
    f = lambda a: np.asarray(a, dtype=np.float64)

    def norm(x, w):
        return x / np.sqrt((x * x).mean(-1, keepdims=True) + cfg.norm_eps) * f(w)

    def rope(x, pos):
        x = x.reshape(len(pos), -1, hd // 2, 2)
        inv = cfg.rope_theta ** (-(2.0 * np.arange(hd // 2)) / hd)
        ang = np.asarray(pos)[:, None, None] * inv
        c, s = np.cos(ang), np.sin(ang)
        out = np.stack([x[..., 0] * c - x[..., 1] * s, x[..., 0] * s + x[..., 1] * c], -1)
        return out.reshape(len(pos), -1)

    n = len(tokens)
    pos = np.arange(n)
    h = f(weights.embedding)[tokens]
    for lw in weights.layers:
        x = norm(h, lw.attn_norm)
        q = rope(x @ f(lw.wq), pos).reshape(n, H, hd)
        k = rope(x @ f(lw.wk), pos).reshape(n, KV, hd)
        v = (x @ f(lw.wv)).reshape(n, KV, hd)
        o = np.zeros((n, H, hd))
        for head in range(H):
            kv = head // (H // KV)
            a = q[:, head] @ k[:, kv].T / np.sqrt(hd)
            a[np.triu_indices(n, 1)] = -np.inf
            p = np.exp(a - a.max(1, keepdims=True))
            p /= p.sum(1, keepdims=True)
            o[:, head] = p @ v[:, kv]
        h = h + o.reshape(n, d) @ f(lw.wo)
        x = norm(h, lw.ffn_norm)
        g = x @ f(lw.w_gate)
        h = h + (g / (1 + np.exp(-g)) * (x @ f(lw.w_up))) @ f(lw.w_down)
    return norm(h, weights.final_norm) @ f(weights.lm_head)


def test_config_invariants():
    with pytest.raises(ShapeError):
        ModelConfig(4, 4, 3, 8, 16, 32)
    with pytest.raises(ShapeError):
        ModelConfig(4, 4, 2, 7, 16, 32)
    assert ModelConfig(4, 4, 2, 8, 16, 32).d_model == 32


@pytest.mark.parametrize("n_layers,r,sparse", [(32, 13, 28), (64, 14, 60), (4, 3, 0), (8, 4, 4)])
def test_default_schedule_counts(n_layers, r, sparse):
    s = default_schedule(n_layers, r)
    assert s.count(Role.FULL) == 2 and s.count(Role.SELECT) == 2
    assert s.count(Role.SPARSE) == sparse
    assert s.roles[2] is Role.SELECT and s.roles[r] is Role.SELECT


@pytest.mark.parametrize("r", [0, 1, 2, 8, 9])
def test_default_schedule_rejects(r):
    with pytest.raises(ScheduleError):
        default_schedule(8, r)


def test_schedule_validation():
    with pytest.raises(ScheduleError):
        LayerSchedule(("full", "select", "sparse", "sparse"))
    with pytest.raises(ScheduleError):
        LayerSchedule(("full", "full", "sparse", "select"))
    with pytest.raises(ScheduleError):
        default_schedule(3, 2)


def test_default_reselect_layer():
    assert default_reselect_layer(32) == 13
    assert default_reselect_layer(32, family="llama2") == 7
    assert default_reselect_layer(8) == 3
    assert default_reselect_layer(64) == 26
    assert default_reselect_layer(4) == 3


def test_prefill_single_token(tiny_weights):
    cache, logits = prefill([3], tiny_weights)
    assert cache.len == 1
    assert logits.shape == (tiny_weights.config.vocab_size,)


def test_prefill_empty(tiny_weights):
    with pytest.raises(InputError):
        prefill([], tiny_weights)


def test_prefill_rejects_bad_ids(tiny_weights):
    with pytest.raises(InputError):
        prefill([1, 128], tiny_weights)


def test_prefill_equals_stepwise(tiny_weights):
    cache, logits = prefill(PROMPT, tiny_weights)
    cfg = tiny_weights.config
    stepped = KvCache(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim)
    for t in PROMPT:
        last = decode_step(t, stepped, tiny_weights, DecodeConfig())
    assert cache.checksum() == stepped.checksum()
    np.testing.assert_array_equal(logits, last)


def test_full_mode_matches_reference_decoder(tiny_weights):
    cfg = tiny_weights.config
    cache = KvCache(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim)
    ref = reference_logits(tiny_weights, PROMPT)
    for i, t in enumerate(PROMPT):
        logits = decode_step(t, cache, tiny_weights, DecodeConfig(mode="full"))
        np.testing.assert_allclose(logits, ref[i], atol=1e-5)


def test_full_budget_tidal_equals_full(tiny_weights):
    cfg = tiny_weights.config
    c_full = KvCache(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim)
    c_tidal = KvCache(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim)
    tidal = DecodeConfig(mode="tidal", budget=len(PROMPT), schedule=default_schedule(8, 4))
    for t in PROMPT:
        a = decode_step(t, c_full, tiny_weights, DecodeConfig())
        b = decode_step(t, c_tidal, tiny_weights, tidal)
        np.testing.assert_allclose(a, b, atol=1e-4)


@pytest.mark.parametrize("mode", ["full", "tidal", "perlayer_topk", "page_estimate", "window"])
def test_kv_grows_by_one(tiny_weights, mode):
    cache, _ = prefill(PROMPT, tiny_weights)
    dcfg = DecodeConfig(mode=mode, budget=4, window=3)
    for step in range(3):
        decode_step(1, cache, tiny_weights, dcfg)
        assert all(cache.layer_len(i) == len(PROMPT) + step + 1 for i in range(8))


@pytest.mark.parametrize("m", [1, 5, 12, 40])
def test_load_accounting(tiny_weights, m):
    cache, _ = prefill(PROMPT, tiny_weights)
    sched = default_schedule(8, 5)
    stats = AccessStats(8)
    for _ in range(4):
        decode_step(2, cache, tiny_weights, DecodeConfig(mode="tidal", budget=m, schedule=sched),
                    stats)
    kv = tiny_weights.config.n_kv_heads
    for step in range(4):
        n = len(PROMPT) + step + 1
        per_layer = stats.key_token_loads[step] // kv
        for layer, role in enumerate(sched.roles):
            assert per_layer[layer] == (min(m, n) if role is Role.SPARSE else n)
        assert stats.key_token_loads[step].sum() == kv * (4 * n + 4 * min(m, n))
        np.testing.assert_array_equal(stats.key_token_loads[step], stats.value_token_loads[step])


def test_sparse_before_select_raises(tiny_weights):
    sched = default_schedule(8, 4)
    object.__setattr__(sched, "roles", (Role.FULL, Role.FULL) + (Role.SPARSE,) * 6)
    cache, _ = prefill(PROMPT, tiny_weights)
    with pytest.raises(ScheduleError):
        decode_step(1, cache, tiny_weights, DecodeConfig(mode="tidal", budget=4, schedule=sched))


def test_include_current_flag(tiny_weights):
    cache, _ = prefill(PROMPT, tiny_weights)
    sched = default_schedule(8, 4)
    stats = AccessStats(8)
    decode_step(1, cache, tiny_weights,
                DecodeConfig(mode="tidal", budget=3, schedule=sched, include_current=True), stats)
    sparse_loads = stats.key_token_loads[0][[3, 5, 6, 7]]
    assert set(sparse_loads.tolist()) <= {3 * 2, 4 * 2}


def test_generate_one_step_equals_decode_step(tiny_weights):
    dcfg = DecodeConfig(mode="tidal", budget=4, schedule=default_schedule(8, 4))
    res = generate(PROMPT, 1, tiny_weights, dcfg)
    cache, _ = prefill(PROMPT[:-1], tiny_weights)
    logits = decode_step(PROMPT[-1], cache, tiny_weights, dcfg)
    np.testing.assert_array_equal(res.logits[0], logits)
    assert res.tokens == [int(np.argmax(logits))]
    assert res.cache.checksum() == cache.checksum()


def test_generate_deterministic(tiny_weights):
    a = generate(PROMPT, 10, tiny_weights, DecodeConfig())
    b = generate(PROMPT, 10, tiny_weights, DecodeConfig())
    assert a.tokens == b.tokens
    assert a.cache.checksum() == b.cache.checksum()


def test_generate_rejects_zero_steps(tiny_weights):
    with pytest.raises(InputError):
        generate(PROMPT, 0, tiny_weights, DecodeConfig())


def test_pollution_marks(tiny_weights):
    res = generate(PROMPT, 5, tiny_weights, DecodeConfig(mode="window", budget=4, window=4))
    assert list(res.cache.polluted) == list(range(len(PROMPT) - 1, len(PROMPT) + 4))
    res = generate(PROMPT, 5, tiny_weights, DecodeConfig())
    assert len(res.cache.polluted) == 0


def _oracle_cache(weights, tokens):
    cache, _ = prefill(tokens, weights)
    return cache


def test_cache_correction_matches_prefill_oracle(tiny_weights):
    dcfg = DecodeConfig(mode="tidal", budget=3, schedule=default_schedule(8, 4))
    res = generate(PROMPT, 8, tiny_weights, dcfg)
    cache = res.cache
    polluted = list(cache.polluted)
    assert len(polluted) == 8
    oracle = _oracle_cache(tiny_weights, res.sequence)
    drift = max(
        np.abs(cache.gather(l, h, polluted)[0] - oracle.gather(l, h, polluted)[0]).max()
        for l in range(8) for h in range(2)
    )
    assert drift > 0  # sparse decoding really did perturb later layers
    cache_correction(cache, res.sequence, tiny_weights)
    assert len(cache.polluted) == 0
    for l in range(8):
        for h in range(2):
            for got, want in zip(cache.gather(l, h, polluted), oracle.gather(l, h, polluted)):
                np.testing.assert_allclose(got, want, atol=1e-5)
    once = cache.checksum()
    for p in polluted:
        cache.polluted.mark(p)
    cache_correction(cache, res.sequence, tiny_weights)
    assert cache.checksum() == once


def test_cache_correction_noop_and_errors(tiny_weights):
    cache, _ = prefill(PROMPT, tiny_weights)
    before = cache.checksum()
    cache_correction(cache, PROMPT, tiny_weights)
    assert cache.checksum() == before
    cache.polluted.mark(3)
    with pytest.raises(StateError):
        cache_correction(cache, PROMPT[:-1], tiny_weights)


def test_periodic_correction_in_generate(tiny_weights):
    dcfg = DecodeConfig(mode="tidal", budget=3, schedule=default_schedule(8, 4), correction_period=3)
    res = generate(PROMPT, 7, tiny_weights, dcfg)
    # corrected after steps 3 and 6; step 7 left one polluted row
    assert list(res.cache.polluted) == [len(PROMPT) - 1 + 6]
    oracle = _oracle_cache(tiny_weights, res.sequence)
    clean = list(range(len(PROMPT) - 1 + 6))
    for l in range(8):
        np.testing.assert_allclose(res.cache.gather(l, 1, clean)[0],
                                   oracle.gather(l, 1, clean)[0], atol=1e-5)


@pytest.mark.parametrize("seed", range(3))
def test_interleaved_correction_oracle(seed):
    cfg = ModelConfig(6, 4, 2, 8, 32, 64)
    w = synth_weights(cfg, seed)
    rng = np.random.default_rng(seed)
    prompt = rng.integers(0, 64, 10).tolist()
    dcfg = DecodeConfig(mode="tidal", budget=4, schedule=default_schedule(6, 3))
    res = generate(prompt, 4, w, dcfg)
    cache, seq = res.cache, list(res.sequence)
    for _ in range(3):
        cache_correction(cache, seq, w)
        token = res.tokens[-1]
        for _ in range(int(rng.integers(1, 4))):
            seq.append(token)
            token = int(np.argmax(decode_step(token, cache, w, dcfg)))
    cache_correction(cache, seq, w)
    assert cache.checksum() == _oracle_cache(w, seq).checksum()
