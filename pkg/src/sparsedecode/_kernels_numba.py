"""numba kernels. Mirrors ``_kernels_numpy`` one function at a time."""

import numpy as np
from numba import njit


@njit(cache=True)
def matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for t in range(k):
            ait = a[i, t]
            for j in range(n):
                out[i, j] += ait * b[t, j]
    return out


@njit(cache=True)
def rms_norm_rows(x, w, eps):
    r, d = x.shape
    out = np.empty((r, d), dtype=np.float32)
    fd = np.float32(d)
    for i in range(r):
        acc = np.float32(0.0)
        for t in range(d):
            acc += x[i, t] * x[i, t]
        denom = np.sqrt(acc / fd + eps)
        for t in range(d):
            out[i, t] = x[i, t] / denom * w[t]
    return out


@njit(cache=True)
def inner_products(q, keys):
    g, d = q.shape
    n = keys.shape[0]
    out = np.empty((g, n), dtype=np.float32)
    for h in range(g):
        for j in range(n):
            acc = np.float32(0.0)
            for t in range(d):
                acc += keys[j, t] * q[h, t]
            out[h, j] = acc
    return out


@njit(cache=True)
def attend(q, keys, values, scale):
    g, d = q.shape
    n = keys.shape[0]
    scores = inner_products(q, keys)
    out = np.zeros((g, d), dtype=np.float32)
    p = np.empty(n, dtype=np.float32)
    for h in range(g):
        mx = scores[h, 0] * scale
        for j in range(1, n):
            a = scores[h, j] * scale
            if a > mx:
                mx = a
        total = np.float32(0.0)
        for j in range(n):
            e = np.exp(scores[h, j] * scale - mx)
            p[j] = e
            total += e
        for j in range(n):
            pj = p[j] / total
            for t in range(d):
                out[h, t] += pj * values[j, t]
    return out, scores


@njit(cache=True)
def page_bounds(q, keys, page_size, use_max):
    g, d = q.shape
    n = keys.shape[0]
    n_pages = (n + page_size - 1) // page_size
    mins = np.empty((n_pages, d), dtype=np.float32)
    maxs = np.empty((n_pages, d), dtype=np.float32)
    for p in range(n_pages):
        start = p * page_size
        stop = min(start + page_size, n)
        for t in range(d):
            lo = keys[start, t]
            hi = lo
            for j in range(start + 1, stop):
                v = keys[j, t]
                if v < lo:
                    lo = v
                if v > hi:
                    hi = v
            mins[p, t] = lo
            maxs[p, t] = hi
    out = np.empty(n_pages, dtype=np.float32)
    for p in range(n_pages):
        for h in range(g):
            acc = np.float32(0.0)
            for t in range(d):
                qt = q[h, t]
                acc += max(mins[p, t] * qt, maxs[p, t] * qt)
            if h == 0:
                out[p] = acc
            elif use_max:
                out[p] = max(out[p], acc)
            else:
                out[p] = out[p] + acc
    return out


@njit(cache=True)
def top_k(scores, m):
    n = scores.shape[0]
    if m == n:
        return np.arange(n).astype(np.int64)
    kth = np.partition(scores, n - m)[n - m]
    picked = np.empty(m, dtype=np.int64)
    c = 0
    for j in range(n):
        if scores[j] > kth:
            picked[c] = j
            c += 1
    for j in range(n):
        if c == m:
            break
        if scores[j] == kth:
            picked[c] = j
            c += 1
    return np.sort(picked)
