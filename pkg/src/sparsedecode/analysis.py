"""Top-k traces, inter-layer overlap, recall by reselection layer, load reports."""

import csv
import io

import numpy as np

from .errors import BudgetError, ScheduleError, ShapeError
from .model import DecodeConfig, TraceRecord, generate


def trace_topk(prompt, weights, k, n_steps, keep_scores=False):
    """Full-attention generation that records every layer's exact top-k per KV head."""
    if k < 1 or k > len(prompt):
        raise BudgetError(f"k must lie in [1, prompt length {len(prompt)}], got {k}")
    result = generate(prompt, n_steps, weights, DecodeConfig(mode="full"), trace_k=k,
                      keep_scores=keep_scores)
    return result.trace


def _membership(sets, length):
    """Boolean (..., length) masks from index arrays of shape (..., k)."""
    mask = np.zeros(sets.shape[:-1] + (length,), dtype=bool)
    np.put_along_axis(mask, sets, True, axis=-1)
    return mask


def _intersections(trace):
    """Per (step, head): integer L x L matrix of |S_i & S_j|."""
    out = []
    for sets, length in zip(trace.sets, trace.lengths):
        mask = _membership(np.asarray(sets), length).astype(np.int64)
        # (L, H, n) -> (H, L, n)
        mask = mask.transpose(1, 0, 2)
        out.append(mask @ mask.transpose(0, 2, 1))
    return np.concatenate(out)


def overlap_matrix(trace):
    """Mean |S_i & S_j| / k over steps and KV heads."""
    if trace.n_steps == 0:
        raise ShapeError("empty trace")
    counts = _intersections(trace)
    return counts.sum(axis=0) / (counts.shape[0] * trace.k)


def recall_profile(trace, base, reselect=None):
    """Per-layer recall of the persisted buffer against each layer's exact top-k.

    The buffer is the base layer's set up to the reselection layer and that
    layer's own set from there on (``reselect=None``: never refreshed).
    Layers up to ``base`` get NaN since they never read the buffer.
    """
    arr = trace.as_array()
    n_layers = arr.shape[1]
    if not 0 <= base < n_layers:
        raise ScheduleError(f"base layer {base} outside [0, {n_layers})")
    if reselect is not None and not base < reselect < n_layers:
        raise ScheduleError(f"need base < reselect < {n_layers}, got {base}, {reselect}")
    hits = np.zeros(n_layers, dtype=np.int64)
    for sets, length in zip(trace.sets, trace.lengths):
        mask = _membership(np.asarray(sets), length)
        for i in range(base + 1, n_layers):
            src = base if reselect is None or i < reselect else reselect
            hits[i] += int(np.sum(mask[src] & mask[i]))
    denom = arr.shape[0] * arr.shape[2] * trace.k
    out = hits / denom
    out[: base + 1] = np.nan
    return out


def recall_by_reselection(trace, base, reselect):
    """Pooled mean recall over the sparse layers (after ``base``, excluding ``reselect``)."""
    profile = recall_profile(trace, base, reselect)
    layers = [i for i in range(base + 1, profile.size) if i != reselect]
    if not layers:
        return float("nan")
    return float(np.mean(profile[layers]))


def recall_curve(trace, base=2):
    """(reselect layer, mean recall) for every valid reselection layer."""
    n_layers = trace.as_array().shape[1]
    return [(r, recall_by_reselection(trace, base, r)) for r in range(base + 1, n_layers)]


def heatmap_rows(trace, kv_head):
    arr = trace.as_array()
    if not 0 <= kv_head < arr.shape[2]:
        raise ShapeError(f"kv head {kv_head} outside [0, {arr.shape[2]})")
    for step in range(arr.shape[0]):
        for layer in range(arr.shape[1]):
            for rank in range(arr.shape[3]):
                yield step, layer, rank, int(arr[step, layer, kv_head, rank])


def _write(rows, header, path=None):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def heatmap_export(trace, kv_head=0, path=None):
    """CSV text with columns step,layer,rank,token_position."""
    return _write(heatmap_rows(trace, kv_head), ["step", "layer", "rank", "token_position"], path)


def heatmap_import(text, lengths=None):
    """Rebuild a single-head TraceRecord from :func:`heatmap_export` output."""
    reader = csv.DictReader(io.StringIO(text))
    rows = [(int(r["step"]), int(r["layer"]), int(r["rank"]), int(r["token_position"]))
            for r in reader]
    if not rows:
        raise ShapeError("empty heatmap")
    n_steps = max(r[0] for r in rows) + 1
    n_layers = max(r[1] for r in rows) + 1
    k = max(r[2] for r in rows) + 1
    arr = np.full((n_steps, n_layers, 1, k), -1, dtype=np.int64)
    for step, layer, rank, pos in rows:
        arr[step, layer, 0, rank] = pos
    if (arr < 0).any():
        raise ShapeError("heatmap is missing entries")
    if lengths is None:
        lengths = [int(arr[s].max()) + 1 for s in range(n_steps)]
    return TraceRecord(k=k, sets=list(arr), lengths=list(lengths))


def overlap_csv(matrix, path=None):
    n = matrix.shape[0]
    rows = ([f"{x:.6f}" for x in row] for row in matrix)
    return _write(rows, [f"layer_{i}" for i in range(n)], path)


def recall_csv(curve, path=None):
    rows = ([r, f"{v:.6f}"] for r, v in curve)
    return _write(rows, ["reselect_layer", "mean_recall"], path)


def read_numeric_csv(text):
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    return header, [[float(x) for x in row] for row in reader]


def analytic_load_ratio(n_layers, n, m, n_full, n_select):
    """All-dense token loads over mixed-schedule token loads for one step."""
    n_sparse = n_layers - n_full - n_select
    return (n_layers * n) / (n_full * n + n_select * n + n_sparse * min(m, n))


def access_report(stats, dcfg, n_kv_heads):
    """Compare counted token loads against all-dense decoding.

    ``counted_ratio`` uses the recorded key loads; ``analytic_ratio`` (tidal
    and full modes only) uses the closed-form per-layer counts for the same
    cache lengths.
    """
    n_layers = stats.n_layers
    lengths = np.asarray(stats.lengths, dtype=np.int64)
    counted = int(stats.key_token_loads.sum())
    dense = int(n_layers * lengths.sum()) * n_kv_heads
    report = {
        "steps": stats.n_steps,
        "counted_key_loads": counted,
        "counted_value_loads": int(stats.value_token_loads.sum()),
        "dense_key_loads": dense,
        "counted_ratio": dense / counted if counted else None,
        "analytic_ratio": None,
    }
    if dcfg.mode in ("full", "tidal"):
        roles = dcfg.roles_for(n_layers)
        n_dense = sum(r != "sparse" for r in roles)
        n_sparse = n_layers - n_dense
        analytic = sum(n_dense * int(n) + n_sparse * min(dcfg.budget, int(n)) for n in lengths)
        report["analytic_key_loads"] = analytic * n_kv_heads
        report["analytic_ratio"] = (n_layers * int(lengths.sum())) / analytic if analytic else None
    return report
