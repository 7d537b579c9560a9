"""Pure-numpy kernels.

Every reduction that the numba backend performs as a scalar loop is written
here as a loop over the reduced axis with vectorised updates, so the
floating-point accumulation order is the same in both backends. The only
exception is the softmax/value path of ``attend`` (library ``exp`` and BLAS),
which agrees with the numba path to within float32 rounding.
"""

import numpy as np


def matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for t in range(k):
        out += a[:, t : t + 1] * b[t : t + 1, :]
    return out


def rms_norm_rows(x, w, eps):
    r, d = x.shape
    acc = np.zeros(r, dtype=np.float32)
    for t in range(d):
        acc += x[:, t] * x[:, t]
    mean = acc / np.float32(d)
    denom = np.sqrt(mean + eps)
    return x / denom[:, None] * w[None, :]


def inner_products(q, keys):
    g, d = q.shape
    n = keys.shape[0]
    out = np.zeros((g, n), dtype=np.float32)
    for h in range(g):
        row = out[h]
        for t in range(d):
            row += keys[:, t] * q[h, t]
    return out


def attend(q, keys, values, scale):
    scores = inner_products(q, keys)
    logits = scores * scale
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    # one gemv per head: a gemm over the group rounds differently than a lone head
    out = np.empty((q.shape[0], values.shape[1]), dtype=np.float32)
    for h in range(q.shape[0]):
        out[h] = p[h] @ values
    return out, scores


def page_bounds(q, keys, page_size, use_max):
    g, d = q.shape
    n = keys.shape[0]
    n_pages = -(-n // page_size)
    pad = n_pages * page_size - n
    if pad:
        lo_src = np.concatenate([keys, np.repeat(keys[-1:], pad, axis=0)])
    else:
        lo_src = keys
    paged = lo_src.reshape(n_pages, page_size, d)
    mins = paged.min(axis=1)
    maxs = paged.max(axis=1)
    out = np.zeros(n_pages, dtype=np.float32)
    for h in range(g):
        b = np.zeros(n_pages, dtype=np.float32)
        for t in range(d):
            qt = q[h, t]
            b += np.maximum(mins[:, t] * qt, maxs[:, t] * qt)
        if h == 0:
            out = b
        elif use_max:
            out = np.maximum(out, b)
        else:
            out = out + b
    return out


def top_k(scores, m):
    n = scores.shape[0]
    if m == n:
        return np.arange(n, dtype=np.int64)
    kth = np.partition(scores, n - m)[n - m]
    above = np.flatnonzero(scores > kth)
    ties = np.flatnonzero(scores == kth)[: m - above.size]
    return np.sort(np.concatenate([above, ties]))
