"""Decoder-only transformer with position-persistent sparse decoding.

Blocks are pre-norm residual (RMSNorm -> GQA attention with RoPE -> RMSNorm
-> SwiGLU FFN). Weight matrices are stored input-major, i.e. ``y = x @ W``.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .attention import (
    GROUP_REDUCTIONS,
    AccessStats,
    TokenBuffer,
    full_attention,
    full_attention_with_selection,
    group_scores,
    page_estimate_select,
    sparse_attention,
    window_select,
)
from . import kernels
from .errors import InputError, ScheduleError, ShapeError, StateError
from .kvcache import KvCache
from .mathops import matmul, rank_top_k, rms_norm, rope_rows, silu

MODES = ("full", "tidal", "perlayer_topk", "page_estimate", "window")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    d_ff: int
    vocab_size: int
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "n_kv_heads", "head_dim", "d_ff", "vocab_size"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be >= 1")
        if self.n_heads % self.n_kv_heads:
            raise ShapeError("n_kv_heads must divide n_heads")
        if self.head_dim % 2:
            raise ShapeError("head_dim must be even for RoPE")
        # the weight file stores these as f32; keep configs comparable after a round trip
        object.__setattr__(self, "rope_theta", float(np.float32(self.rope_theta)))
        object.__setattr__(self, "norm_eps", float(np.float32(self.norm_eps)))

    @property
    def d_model(self):
        return self.n_heads * self.head_dim

    @property
    def group_size(self):
        return self.n_heads // self.n_kv_heads

    @property
    def kv_dim(self):
        return self.n_kv_heads * self.head_dim


class Role(str, Enum):
    FULL = "full"
    SELECT = "select"
    SPARSE = "sparse"


@dataclass(frozen=True)
class LayerSchedule:
    roles: tuple

    def __post_init__(self):
        roles = tuple(Role(r) for r in self.roles)
        object.__setattr__(self, "roles", roles)
        if len(roles) < 2 or roles[0] is not Role.FULL or roles[1] is not Role.FULL:
            raise ScheduleError("the first two layers must use full attention")
        seen_select = False
        for i, role in enumerate(roles):
            if role is Role.SELECT:
                seen_select = True
            elif role is Role.SPARSE and not seen_select:
                raise ScheduleError(f"sparse layer {i} precedes every selection layer")

    def __len__(self):
        return len(self.roles)

    def count(self, role):
        return sum(r is Role(role) for r in self.roles)

    @classmethod
    def all_full(cls, n_layers):
        return cls((Role.FULL,) * n_layers)


def default_schedule(n_layers, reselect):
    """Full, Full, Select, Sparse..., Select at ``reselect``, Sparse..."""
    if n_layers < 4:
        raise ScheduleError(f"need at least 4 layers, got {n_layers}")
    if not 3 <= reselect < n_layers:
        raise ScheduleError(f"reselection layer must lie in [3, {n_layers}), got {reselect}")
    roles = [Role.FULL, Role.FULL, Role.SELECT] + [Role.SPARSE] * (n_layers - 3)
    roles[reselect] = Role.SELECT
    return LayerSchedule(tuple(roles))


def default_reselect_layer(n_layers, family="llama3"):
    if n_layers == 32:
        return 7 if family == "llama2" else 13
    return min(max(round(0.41 * n_layers), 3), n_layers - 1)


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_norm: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray

    FIELDS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down")


@dataclass
class ModelWeights:
    config: ModelConfig
    embedding: np.ndarray
    layers: list
    final_norm: np.ndarray
    lm_head: np.ndarray

    @staticmethod
    def shapes(config):
        """(name, shape) for every tensor, in file/fill order."""
        d, kv, ff = config.d_model, config.kv_dim, config.d_ff
        per_layer = {
            "attn_norm": (d,),
            "wq": (d, d),
            "wk": (d, kv),
            "wv": (d, kv),
            "wo": (d, d),
            "ffn_norm": (d,),
            "w_gate": (d, ff),
            "w_up": (d, ff),
            "w_down": (ff, d),
        }
        out = [("embedding", (config.vocab_size, d))]
        for i in range(config.n_layers):
            out += [(f"layers.{i}.{name}", per_layer[name]) for name in LayerWeights.FIELDS]
        out += [("final_norm", (d,)), ("lm_head", (d, config.vocab_size))]
        return out

    def tensors(self):
        yield self.embedding
        for layer in self.layers:
            for name in LayerWeights.FIELDS:
                yield getattr(layer, name)
        yield self.final_norm
        yield self.lm_head

    @classmethod
    def from_tensors(cls, config, tensors):
        tensors = list(tensors)
        shapes = cls.shapes(config)
        if len(tensors) != len(shapes):
            raise ShapeError(f"expected {len(shapes)} tensors, got {len(tensors)}")
        fixed = []
        for (name, shape), t in zip(shapes, tensors):
            t = np.ascontiguousarray(t, dtype=np.float32)
            if t.shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {t.shape}")
            fixed.append(t)
        per = len(LayerWeights.FIELDS)
        layers = [
            LayerWeights(*fixed[1 + i * per : 1 + (i + 1) * per]) for i in range(config.n_layers)
        ]
        return cls(config, fixed[0], layers, fixed[-2], fixed[-1])

    @classmethod
    def zeros(cls, config):
        return cls.from_tensors(config, [np.zeros(s, np.float32) for _, s in cls.shapes(config)])


@dataclass
class DecodeConfig:
    """How each decode step attends.

    ``budget`` larger than the cache is clamped to the cache length, so a
    budget at least as large as the final sequence reproduces full attention.
    ``include_current`` also lets sparse layers see the token being decoded
    (not part of the reference algorithm; off by default).
    """

    mode: str = "full"
    budget: int = 256
    schedule: Optional[LayerSchedule] = None
    correction_period: int = 0
    page_size: int = 16
    sinks: int = 4
    window: int = 64
    group_reduce: str = "sum"
    include_current: bool = False
    n_full_layers: int = 2

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.mode != "full" and self.budget < 1:
            raise InputError("budget must be >= 1 for sparse modes")
        if self.correction_period < 0:
            raise InputError("correction period must be >= 0")
        if self.group_reduce not in GROUP_REDUCTIONS:
            raise InputError(f"group_reduce must be one of {GROUP_REDUCTIONS}")

    def roles_for(self, n_layers):
        """Per-layer role labels for this mode."""
        if self.mode == "full":
            return ["full"] * n_layers
        if self.mode == "tidal":
            sched = self.schedule or default_schedule(n_layers, default_reselect_layer(n_layers))
            if len(sched) != n_layers:
                raise ScheduleError(f"schedule has {len(sched)} layers, model has {n_layers}")
            return [r.value for r in sched.roles]
        lead = min(self.n_full_layers, n_layers)
        return ["full"] * lead + [self.mode] * (n_layers - lead)


@dataclass
class TraceRecord:
    """Exact top-k positions per decode step, as ``(n_layers, n_kv_heads, k)``
    arrays in descending-score order."""

    k: int
    sets: list = field(default_factory=list)
    lengths: list = field(default_factory=list)
    scores: Optional[list] = None

    @property
    def n_steps(self):
        return len(self.sets)

    def as_array(self):
        return np.stack(self.sets)


def _heads(x, n_heads, head_dim):
    return x.reshape(n_heads, head_dim)


def _qkv(layer_w, h, positions, config):
    x = rms_norm(h, layer_w.attn_norm, config.norm_eps)
    q = matmul(x, layer_w.wq)
    k = matmul(x, layer_w.wk)
    v = matmul(x, layer_w.wv)
    q = rope_rows(q, positions, config.head_dim, config.rope_theta)
    k = rope_rows(k, positions, config.head_dim, config.rope_theta)
    return q, k, v


def _ffn(layer_w, h, o, config):
    h = h + matmul(o, layer_w.wo)
    x = rms_norm(h, layer_w.ffn_norm, config.norm_eps)
    gated = silu(matmul(x, layer_w.w_gate)) * matmul(x, layer_w.w_up)
    return h + matmul(gated, layer_w.w_down)


def _logits(weights, h):
    x = rms_norm(h, weights.final_norm, weights.config.norm_eps)
    return matmul(x, weights.lm_head)


def _embed(weights, tokens):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise InputError("token list must be non-empty")
    if tokens.min() < 0 or tokens.max() >= weights.config.vocab_size:
        raise InputError(f"token id outside [0, {weights.config.vocab_size})")
    return weights.embedding[tokens]


def _forward_full(tokens, weights, cache, start):
    """Causal full-attention pass over ``tokens`` placed at ``start``...;
    appends their K/V and returns final hidden states.

    Each position runs the same single-query kernel a decode step would, so
    the cached rows match step-by-step decoding bit for bit.
    """
    cfg = weights.config
    h = _embed(weights, tokens)
    n = h.shape[0]
    positions = np.arange(start, start + n)
    g = cfg.group_size
    for li, lw in enumerate(weights.layers):
        q, k, v = _qkv(lw, h, positions, cfg)
        cache.extend(li, k, v)
        o = np.empty_like(q)
        for row in range(n):
            qh = _heads(q[row], cfg.n_heads, cfg.head_dim)
            oh = o[row].reshape(cfg.n_heads, cfg.head_dim)
            for kv in range(cfg.n_kv_heads):
                keys, values = cache.full_view(li, kv)
                upto = start + row + 1
                oh[kv * g : (kv + 1) * g] = full_attention(
                    qh[kv * g : (kv + 1) * g], keys[:upto], values[:upto]
                )
        h = _ffn(lw, h, o, cfg)
    return h


def prefill(tokens, weights, cache=None):
    """Full causal attention over the prompt; returns ``(cache, last logits)``."""
    cfg = weights.config
    tokens = list(tokens)
    if not tokens:
        raise InputError("prefill needs a non-empty prompt")
    if cache is None:
        cache = KvCache(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim, capacity=max(64, 2 * len(tokens)))
    h = _forward_full(tokens, weights, cache, cache.len)
    return cache, _logits(weights, h[-1:])[0]


def decode_step(
    token,
    cache,
    weights,
    dcfg,
    stats=None,
    trace=None,
):
    """Run one token through every layer; returns next-token logits.

    Per layer role: ``full`` attends to the whole cache, ``select`` attends to
    the whole cache and then refreshes the token buffer from the same inner
    products, ``sparse`` attends only to the buffer. Baseline modes choose
    their own subset per layer. One K/V row is appended per layer.
    """
    cfg = weights.config
    roles = dcfg.roles_for(cfg.n_layers)
    pos = cache.len
    if any(cache.layer_len(i) != pos for i in range(cfg.n_layers)):
        raise StateError("cache layers have different lengths")
    if stats is not None:
        stats.begin_step(pos + 1)
    buffer = TokenBuffer.empty(cfg.n_kv_heads)
    h = _embed(weights, [token])
    g = cfg.group_size
    trace_sets = None
    if trace is not None:
        trace_sets = np.empty((cfg.n_layers, cfg.n_kv_heads, trace.k), dtype=np.int64)
        step_scores = [] if trace.scores is not None else None

    for li, lw in enumerate(weights.layers):
        if stats is not None:
            stats.layer = li
        q, k, v = _qkv(lw, h, [pos], cfg)
        cache.append(li, k[0], v[0])
        n = cache.layer_len(li)
        m = min(dcfg.budget, n)
        role = roles[li]
        qh = _heads(q[0], cfg.n_heads, cfg.head_dim)
        o = np.empty_like(qh)
        layer_scores = []
        for kv in range(cfg.n_kv_heads):
            qg = qh[kv * g : (kv + 1) * g]
            keys, values = cache.full_view(li, kv)
            if role == "full":
                o[kv * g : (kv + 1) * g] = full_attention(qg, keys, values, stats)
            elif role == "select":
                out, idx = full_attention_with_selection(
                    qg, keys, values, m, stats, reduce=dcfg.group_reduce
                )
                o[kv * g : (kv + 1) * g] = out
                buffer.indices[kv] = idx
            else:
                if role == "sparse":
                    if not buffer.is_set(kv):
                        raise ScheduleError(f"sparse layer {li} reached with an empty token buffer")
                    idx = buffer.indices[kv]
                    if dcfg.include_current and idx[-1] != n - 1:
                        idx = np.append(idx, n - 1)
                elif role == "perlayer_topk":
                    scores = group_scores(kernels.inner_products(qg, keys), dcfg.group_reduce)
                    idx = np.sort(rank_top_k(scores, m))
                    if stats is not None:
                        stats.record(keys=n, scans=n)
                elif role == "page_estimate":
                    idx = page_estimate_select(
                        qg, keys, m, dcfg.page_size, stats, reduce=dcfg.group_reduce
                    )
                elif role == "window":
                    idx = window_select(n, dcfg.sinks, dcfg.window)
                else:
                    raise ScheduleError(f"unknown role {role!r}")
                o[kv * g : (kv + 1) * g] = sparse_attention(qg, cache, li, kv, idx, stats)
            if trace_sets is not None:
                scores = group_scores(kernels.inner_products(qg, keys), dcfg.group_reduce)
                trace_sets[li, kv] = rank_top_k(scores, trace.k)
                if step_scores is not None:
                    layer_scores.append(scores)
        if trace_sets is not None and step_scores is not None:
            step_scores.append(np.stack(layer_scores))
        h = _ffn(lw, h, o.reshape(1, -1), cfg)

    if trace is not None:
        trace.sets.append(trace_sets)
        trace.lengths.append(pos + 1)
        if step_scores is not None:
            trace.scores.append(step_scores)
    if dcfg.mode != "full":
        cache.polluted.mark(pos)
    return _logits(weights, h)[0]


def greedy(logits):
    """Argmax with ties to the lowest id."""
    return int(np.argmax(logits))


@dataclass
class GenerationResult:
    tokens: list
    stats: AccessStats
    cache: KvCache
    sequence: list
    logits: list = field(default_factory=list)
    trace: Optional[TraceRecord] = None


def cache_correction(cache, token_ids, weights):
    """Recompute polluted K/V rows with a full-attention pass and overwrite them.

    ``token_ids`` is the realised sequence (prompt plus fed tokens) covering at
    least every cached position. Clears the pollution log.
    """
    n = cache.len
    if len(token_ids) < n:
        raise StateError(f"{len(token_ids)} token ids for a cache of length {n}")
    positions = list(cache.polluted)
    if not positions:
        return
    cfg = weights.config
    fresh = KvCache(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim, capacity=n)
    _forward_full(list(token_ids[:n]), weights, fresh, 0)
    for li in range(cfg.n_layers):
        k_rows, v_rows = fresh.layer_rows(li)
        cache.overwrite(li, positions, k_rows[positions], v_rows[positions])
    cache.polluted.clear()


def generate(prompt, n_steps, weights, dcfg, trace_k=None, keep_scores=False):
    """Greedy generation of ``n_steps`` tokens, one decode step each.

    The prompt minus its last token is prefilled; the last prompt token is
    the input of the first decode step. With ``correction_period`` T > 0
    the cache is corrected after every T-th step.
    """
    cfg = weights.config
    prompt = [int(t) for t in prompt]
    if n_steps < 1:
        raise InputError("n_steps must be >= 1")
    if not prompt:
        raise InputError("prompt must be non-empty")
    cache = KvCache(
        cfg.n_layers, cfg.n_kv_heads, cfg.head_dim, capacity=len(prompt) + n_steps + 1
    )
    if len(prompt) > 1:
        prefill(prompt[:-1], weights, cache)
    stats = AccessStats(cfg.n_layers)
    trace = None
    if trace_k is not None:
        trace = TraceRecord(k=int(trace_k), scores=[] if keep_scores else None)
    sequence = list(prompt)
    emitted, all_logits = [], []
    token = prompt[-1]
    for step in range(1, n_steps + 1):
        logits = decode_step(token, cache, weights, dcfg, stats, trace)
        token = greedy(logits)
        emitted.append(token)
        all_logits.append(logits)
        T = dcfg.correction_period
        if T and dcfg.mode != "full" and step % T == 0:
            cache_correction(cache, sequence, weights)
        if step < n_steps:
            sequence.append(token)
    return GenerationResult(emitted, stats, cache, sequence, all_logits, trace)
