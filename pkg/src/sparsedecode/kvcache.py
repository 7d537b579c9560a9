"""Append-only key/value storage with pollution tracking."""

from dataclasses import dataclass, field
import hashlib

import numpy as np

from .errors import BoundsError, ShapeError, StateError


def kv_size_bytes(n_layers, n_kv_heads, head_dim, seq_len, bytes_per_scalar=2):
    """Bytes needed to hold keys and values for ``seq_len`` tokens."""
    return n_layers * n_kv_heads * head_dim * seq_len * bytes_per_scalar * 2


@dataclass
class PollutionLog:
    """Positions whose K/V were produced while some layer attended sparsely."""

    positions: list = field(default_factory=list)

    def mark(self, position):
        position = int(position)
        if self.positions and position <= self.positions[-1]:
            if position == self.positions[-1]:
                return
            raise StateError(
                f"polluted positions must increase: {position} after {self.positions[-1]}"
            )
        self.positions.append(position)

    def clear(self):
        self.positions.clear()

    def __len__(self):
        return len(self.positions)

    def __iter__(self):
        return iter(self.positions)


class KvCache:
    """Dense per-layer store of shape ``(n_kv_heads, len, head_dim)``.

    Keys are stored after RoPE. Layers are appended to one at a time during a
    decode step, so per-layer lengths may differ transiently; ``len`` reports
    the number of positions present in every layer.
    """

    def __init__(self, n_layers, n_kv_heads, head_dim, capacity=64):
        self.n_layers = n_layers
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        capacity = max(int(capacity), 1)
        self._keys = [np.zeros((n_kv_heads, capacity, head_dim), np.float32) for _ in range(n_layers)]
        self._values = [np.zeros((n_kv_heads, capacity, head_dim), np.float32) for _ in range(n_layers)]
        self._lens = [0] * n_layers
        self.polluted = PollutionLog()

    @property
    def len(self):
        return min(self._lens)

    def __len__(self):
        return self.len

    def layer_len(self, layer):
        return self._lens[layer]

    def _rows(self, rows, name):
        rows = np.asarray(rows, dtype=np.float32)
        width = self.n_kv_heads * self.head_dim
        if rows.ndim == 1:
            rows = rows[None, :]
        if rows.ndim != 2 or rows.shape[1] != width:
            raise ShapeError(f"{name} rows must have length {width}, got shape {rows.shape}")
        return rows.reshape(rows.shape[0], self.n_kv_heads, self.head_dim).transpose(1, 0, 2)

    def _reserve(self, layer, needed):
        cap = self._keys[layer].shape[1]
        if needed <= cap:
            return
        new_cap = max(needed, 2 * cap)
        for store in (self._keys, self._values):
            grown = np.zeros((self.n_kv_heads, new_cap, self.head_dim), np.float32)
            grown[:, :cap] = store[layer]
            store[layer] = grown

    def extend(self, layer, k_rows, v_rows):
        """Append a block of rows; each row holds all kv heads back to back."""
        k = self._rows(k_rows, "key")
        v = self._rows(v_rows, "value")
        if k.shape != v.shape:
            raise ShapeError("key and value blocks differ in shape")
        start = self._lens[layer]
        stop = start + k.shape[1]
        self._reserve(layer, stop)
        self._keys[layer][:, start:stop] = k
        self._values[layer][:, start:stop] = v
        self._lens[layer] = stop

    def append(self, layer, k, v):
        k = np.asarray(k, dtype=np.float32)
        v = np.asarray(v, dtype=np.float32)
        if k.ndim != 1 or v.ndim != 1:
            raise ShapeError("append takes one token's key and value vectors")
        self.extend(layer, k, v)

    def full_view(self, layer, kv_head):
        n = self._lens[layer]
        return self._keys[layer][kv_head, :n], self._values[layer][kv_head, :n]

    def gather(self, layer, kv_head, indices):
        """Copies of the key/value rows at ``indices``, in the given order."""
        idx = np.asarray(indices, dtype=np.int64)
        n = self._lens[layer]
        if idx.ndim != 1:
            raise ShapeError("indices must be 1-D")
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise BoundsError(f"index out of range for cache length {n}")
        return self._keys[layer][kv_head, idx], self._values[layer][kv_head, idx]

    def overwrite(self, layer, positions, k_rows, v_rows):
        pos = np.asarray(positions, dtype=np.int64)
        k = self._rows(k_rows, "key")
        v = self._rows(v_rows, "value")
        if k.shape[1] != pos.size or v.shape[1] != pos.size:
            raise ShapeError("one key/value row per position required")
        n = self._lens[layer]
        if pos.size and (pos.min() < 0 or pos.max() >= n):
            raise BoundsError(f"position out of range for cache length {n}")
        self._keys[layer][:, pos] = k
        self._values[layer][:, pos] = v

    def truncate(self, length):
        if length < 0 or length > self.len:
            raise BoundsError(f"cannot truncate to {length}")
        self._lens = [length] * self.n_layers
        self.polluted.positions = [p for p in self.polluted.positions if p < length]

    def layer_rows(self, layer):
        """All keys/values of a layer as ``(len, n_kv_heads*head_dim)`` rows."""
        n = self._lens[layer]
        k = self._keys[layer][:, :n].transpose(1, 0, 2).reshape(n, -1)
        v = self._values[layer][:, :n].transpose(1, 0, 2).reshape(n, -1)
        return k, v

    def copy(self):
        other = KvCache.__new__(KvCache)
        other.n_layers = self.n_layers
        other.n_kv_heads = self.n_kv_heads
        other.head_dim = self.head_dim
        other._keys = [a.copy() for a in self._keys]
        other._values = [a.copy() for a in self._values]
        other._lens = list(self._lens)
        other.polluted = PollutionLog(list(self.polluted.positions))
        return other

    def checksum(self, positions=None):
        """SHA-256 over the stored rows (optionally only ``positions``)."""
        h = hashlib.sha256()
        for layer in range(self.n_layers):
            n = self._lens[layer]
            sel = slice(0, n) if positions is None else np.asarray(positions, dtype=np.int64)
            h.update(np.ascontiguousarray(self._keys[layer][:, sel]).tobytes())
            h.update(np.ascontiguousarray(self._values[layer][:, sel]).tobytes())
        return h.hexdigest()
