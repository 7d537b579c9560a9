"""Dense float32 building blocks: matmul, softmax, top-k, RMSNorm, RoPE."""

from functools import lru_cache

import numpy as np

from . import kernels
from .errors import BudgetError, ShapeError

F32 = np.float32


def _f32(x):
    return np.ascontiguousarray(x, dtype=F32)


def matmul(a, b):
    """Row-major product ``a @ b``.

    Each output element is accumulated left to right over the shared
    dimension, so results are bit-identical across runs and independent of
    how many rows ``a`` has.
    """
    a = _f32(a)
    b = _f32(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return kernels.matmul(a, b)


def softmax_row(x):
    x = _f32(x)
    if x.ndim != 1 or x.size == 0:
        raise ShapeError("softmax_row expects a non-empty 1-D vector")
    e = np.exp(x - x.max())
    return e / e.sum(dtype=F32)


def _check_budget(n, m):
    if m < 1:
        raise BudgetError(f"budget must be >= 1, got {m}")
    if m > n:
        raise BudgetError(f"budget {m} exceeds {n} candidates")


def arg_top_k(scores, m):
    """Indices of the ``m`` largest scores, ascending by index.

    Ties at the boundary go to the lower index.
    """
    scores = _f32(scores)
    if scores.ndim != 1:
        raise ShapeError("arg_top_k expects a 1-D score vector")
    _check_budget(scores.shape[0], m)
    return kernels.top_k(scores, int(m))


def rank_top_k(scores, m):
    """Same set as :func:`arg_top_k`, ordered by descending score (ties: lower index)."""
    scores = _f32(scores)
    idx = arg_top_k(scores, m)
    order = np.lexsort((idx, -scores[idx]))
    return idx[order]


def rms_norm(x, weight, eps=1e-5):
    x = _f32(x)
    weight = _f32(weight)
    if x.shape[-1] != weight.shape[0] or weight.ndim != 1:
        raise ShapeError(f"rms_norm length mismatch: {x.shape} vs {weight.shape}")
    rows = x.reshape(-1, x.shape[-1])
    return kernels.rms_norm_rows(rows, weight, F32(eps)).reshape(x.shape)


@lru_cache(maxsize=65536)
def _rope_table(position, head_dim, theta_base):
    half = head_dim // 2
    inv_freq = np.power(float(theta_base), -(2.0 * np.arange(half)) / head_dim)
    angle = float(position) * inv_freq
    cos, sin = np.cos(angle), np.sin(angle)
    cos.flags.writeable = False
    sin.flags.writeable = False
    return cos, sin


def rope_rows(x, positions, head_dim, theta_base=10000.0):
    """Rotate every head of every row of ``x`` by that row's position.

    The angle table is built per position, so a row gets the same bits whether
    it is rotated alone or inside a batch.
    """
    x = _f32(x)
    if head_dim <= 0 or head_dim % 2:
        raise ShapeError(f"head_dim must be a positive even number, got {head_dim}")
    if x.ndim != 2 or x.shape[1] % head_dim:
        raise ShapeError(f"row length {x.shape[-1]} is not a multiple of head_dim {head_dim}")
    positions = np.asarray(positions)
    if positions.shape != (x.shape[0],):
        raise ShapeError("one position per row required")
    tables = [_rope_table(int(p), head_dim, float(theta_base)) for p in positions]
    cos = np.stack([t[0] for t in tables])[:, None, :]
    sin = np.stack([t[1] for t in tables])[:, None, :]
    pairs = x.astype(np.float64).reshape(x.shape[0], -1, head_dim // 2, 2)
    even, odd = pairs[..., 0], pairs[..., 1]
    out = np.empty_like(pairs)
    out[..., 0] = even * cos - odd * sin
    out[..., 1] = even * sin + odd * cos
    return out.reshape(x.shape).astype(F32)


def rope_apply(x, position, head_dim, theta_base=10000.0):
    """Rotary embedding of a single vector: dims (2i, 2i+1) of each head turn
    by ``position * theta_base**(-2i/head_dim)``."""
    x = _f32(x)
    if x.ndim != 1:
        raise ShapeError("rope_apply expects a 1-D vector")
    return rope_rows(x[None, :], [position], head_dim, theta_base)[0]


def silu(x):
    return x / (F32(1.0) + np.exp(-x))
