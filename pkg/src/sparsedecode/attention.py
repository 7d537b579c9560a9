"""Attention and token-selection procedures, instrumented with load counters.

All kernels take a *group* of query heads (the heads sharing one KV head) as
a ``(g, head_dim)`` array; a 1-D query is treated as a group of one. K/V rows
are counted once per call, matching a kernel that streams each KV head once
for its whole group.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import BudgetError, BoundsError, ShapeError, StateError
from .mathops import arg_top_k

GROUP_REDUCTIONS = ("sum", "max")


@dataclass
class AccessStats:
    """Token loads per (decode step, layer), summed over KV heads.

    ``lengths[s]`` is the cache length seen by attention at step ``s``.
    Standalone kernel calls land in an implicit step 0 / layer 0.
    """

    n_layers: int = 1
    key_loads: list = field(default_factory=list)
    value_loads: list = field(default_factory=list)
    selection_scans: list = field(default_factory=list)
    lengths: list = field(default_factory=list)
    layer: int = 0

    def begin_step(self, cache_len=-1):
        for rows in (self.key_loads, self.value_loads, self.selection_scans):
            rows.append(np.zeros(self.n_layers, dtype=np.int64))
        self.lengths.append(int(cache_len))
        self.layer = 0

    def record(self, keys=0, values=0, scans=0):
        if keys < 0 or values < 0 or scans < 0:
            raise ValueError("load counts cannot be negative")
        if not self.key_loads:
            self.begin_step()
        self.key_loads[-1][self.layer] += keys
        self.value_loads[-1][self.layer] += values
        self.selection_scans[-1][self.layer] += scans

    @property
    def n_steps(self):
        return len(self.key_loads)

    def _stack(self, rows):
        if not rows:
            return np.zeros((0, self.n_layers), dtype=np.int64)
        return np.stack(rows)

    @property
    def key_token_loads(self):
        return self._stack(self.key_loads)

    @property
    def value_token_loads(self):
        return self._stack(self.value_loads)

    @property
    def scans(self):
        return self._stack(self.selection_scans)

    def totals(self):
        return {
            "key_token_loads": int(self.key_token_loads.sum()),
            "value_token_loads": int(self.value_token_loads.sum()),
            "selection_scans": int(self.scans.sum()),
        }

    def merge(self, other):
        """Append ``other``'s steps (e.g. per-thread counters) to this record."""
        if other.n_layers != self.n_layers:
            raise ShapeError("cannot merge stats with different layer counts")
        self.key_loads.extend(r.copy() for r in other.key_loads)
        self.value_loads.extend(r.copy() for r in other.value_loads)
        self.selection_scans.extend(r.copy() for r in other.selection_scans)
        self.lengths.extend(other.lengths)


@dataclass
class TokenBuffer:
    """Selected token positions, one ascending index array per KV head."""

    indices: list

    @classmethod
    def empty(cls, n_kv_heads):
        return cls([None] * n_kv_heads)

    def is_set(self, kv_head):
        return self.indices[kv_head] is not None

    def validate(self, cache_len):
        for idx in self.indices:
            if idx is None:
                continue
            if idx.size and idx[-1] >= cache_len:
                raise BoundsError(f"buffer index {int(idx[-1])} >= cache length {cache_len}")
            if np.any(np.diff(idx) <= 0):
                raise StateError("buffer indices must be distinct and ascending")


def _group(q):
    q = np.ascontiguousarray(q, dtype=np.float32)
    if q.ndim == 1:
        return q[None, :], True
    if q.ndim != 2:
        raise ShapeError("query must be a vector or a (heads, head_dim) group")
    return q, False


def _check_kv(q, keys, values):
    if keys.ndim != 2 or values.shape != keys.shape:
        raise ShapeError(f"keys/values shape mismatch: {keys.shape} vs {values.shape}")
    if keys.shape[0] == 0:
        raise StateError("attention over an empty cache")
    if keys.shape[1] != q.shape[1]:
        raise ShapeError(f"head_dim mismatch: query {q.shape[1]}, keys {keys.shape[1]}")


def _scale(head_dim):
    return np.float32(1.0 / np.sqrt(head_dim))


def _attend(q, keys, values):
    keys = np.ascontiguousarray(keys, dtype=np.float32)
    values = np.ascontiguousarray(values, dtype=np.float32)
    _check_kv(q, keys, values)
    return kernels.attend(q, keys, values, _scale(q.shape[1]))


def group_scores(scores, reduce="sum"):
    """Collapse per-query-head inner products to one score per token."""
    if reduce not in GROUP_REDUCTIONS:
        raise ValueError(f"unknown group reduction {reduce!r}")
    out = scores[0].copy()
    for h in range(1, scores.shape[0]):
        if reduce == "sum":
            out += scores[h]
        else:
            np.maximum(out, scores[h], out=out)
    return out


def full_attention(q, keys, values, stats=None):
    """softmax(q K^T / sqrt(d)) V over every cached row."""
    q, single = _group(q)
    out, _ = _attend(q, keys, values)
    if stats is not None:
        n = keys.shape[0]
        stats.record(keys=n, values=n)
    return out[0] if single else out


def full_attention_with_selection(q_group, keys, values, m, stats=None, reduce="sum"):
    """Dense attention that also returns the top-``m`` positions.

    Selection ranks tokens by the raw inner products already produced for
    the attention itself, aggregated across the group (sum by default).
    Softmax is monotone, so this ranking matches the post-softmax one.
    """
    q, single = _group(q_group)
    n = keys.shape[0]
    if m > n:
        raise BudgetError(f"budget {m} exceeds cache length {n}")
    out, scores = _attend(q, keys, values)
    idx = arg_top_k(group_scores(scores, reduce), m)
    if stats is not None:
        stats.record(keys=n, values=n, scans=n)
    return (out[0] if single else out), idx


def sparse_attention(q, cache, layer, kv_head, indices, stats=None):
    """Attention restricted to the cached rows at ``indices``.

    The softmax is renormalised over the selected rows only.
    """
    if indices is None:
        raise StateError("sparse attention with an unset token buffer")
    k, v = cache.gather(layer, kv_head, indices)
    q, single = _group(q)
    out, _ = _attend(q, k, v)
    if stats is not None:
        stats.record(keys=len(indices), values=len(indices))
    return out[0] if single else out


def page_upper_bounds(q_group, keys, page_size=16, reduce="sum"):
    """Per-page bound on the (group-aggregated) inner product of any member token.

    For each page the channel-wise min/max of its keys gives
    ``sum_d max(q_d * min_d, q_d * max_d) >= q . k`` for every k in the page.
    """
    q, _ = _group(q_group)
    keys = np.ascontiguousarray(keys, dtype=np.float32)
    if page_size < 1:
        raise ValueError("page_size must be >= 1")
    if reduce not in GROUP_REDUCTIONS:
        raise ValueError(f"unknown group reduction {reduce!r}")
    return kernels.page_bounds(q, keys, int(page_size), reduce == "max")


def page_estimate_select(q_group, keys, m, page_size=16, stats=None, reduce="sum"):
    """Page-level estimate selection (query-aware page scoring).

    Pages are taken in descending bound order (ties: lower page first) until
    they hold at least ``m`` tokens; the candidates are then cut to ``m``
    by exact score.
    """
    q, _ = _group(q_group)
    keys = np.ascontiguousarray(keys, dtype=np.float32)
    n = keys.shape[0]
    if m < 1 or m > n:
        raise BudgetError(f"budget {m} outside [1, {n}]")
    bounds = page_upper_bounds(q, keys, page_size, reduce)
    order = np.lexsort((np.arange(bounds.size), -bounds))
    sizes = np.minimum(page_size, n - order * page_size)
    n_pick = int(np.searchsorted(np.cumsum(sizes), m)) + 1
    pages = np.sort(order[:n_pick])
    cand = (pages[:, None] * page_size + np.arange(page_size)[None, :]).ravel()
    cand = cand[cand < n]
    exact = group_scores(kernels.inner_products(q, keys[cand]), reduce)
    chosen = cand[arg_top_k(exact, m)]
    if stats is not None:
        stats.record(keys=int(cand.size), scans=int(bounds.size))
    return np.sort(chosen)


def window_select(seq_len, sinks=4, window=64):
    """Positions ``[0, sinks)`` and ``[seq_len - window, seq_len)``, clipped."""
    if sinks + window < 1:
        raise ValueError("sinks + window must be >= 1")
    head = np.arange(min(sinks, seq_len))
    tail = np.arange(max(seq_len - window, 0), seq_len)
    return np.union1d(head, tail).astype(np.int64)
