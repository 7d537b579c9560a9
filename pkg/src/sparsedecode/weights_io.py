"""TDW1 weight files and deterministic synthetic weights.

File layout (all little-endian)::

    magic "TDW1" | u32 version | u32 n_layers, n_heads, n_kv_heads,
    head_dim, d_ff, vocab_size | f32 rope_theta | f32 norm_eps | payload

The payload is every tensor of ``ModelWeights.shapes`` in order, row-major
f32, with nothing in between.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .model import ModelConfig, ModelWeights

MAGIC = b"TDW1"
VERSION = 1
_HEADER = struct.Struct("<4sI6Iff")
HEADER_SIZE = _HEADER.size

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def scalar_count(config):
    return sum(int(np.prod(shape)) for _, shape in ModelWeights.shapes(config))


def file_size(config):
    return HEADER_SIZE + 4 * scalar_count(config)


def _header_bytes(config):
    return _HEADER.pack(
        MAGIC,
        VERSION,
        config.n_layers,
        config.n_heads,
        config.n_kv_heads,
        config.head_dim,
        config.d_ff,
        config.vocab_size,
        config.rope_theta,
        config.norm_eps,
    )


def to_bytes(weights):
    parts = [_header_bytes(weights.config)]
    parts += [np.ascontiguousarray(t, dtype="<f4").tobytes() for t in weights.tensors()]
    return b"".join(parts)


def from_bytes(blob):
    if len(blob) < HEADER_SIZE:
        raise FormatError("file shorter than the TDW1 header")
    magic, version, *dims, theta, eps = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    try:
        config = ModelConfig(*dims, rope_theta=float(theta), norm_eps=float(eps))
    except ShapeError as exc:
        raise FormatError(f"inconsistent dimensions in header: {exc}") from exc
    expected = file_size(config)
    if len(blob) != expected:
        raise FormatError(f"payload size mismatch: file has {len(blob)} bytes, expected {expected}")
    tensors, offset = [], HEADER_SIZE
    for _, shape in ModelWeights.shapes(config):
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        tensors.append(arr.astype(np.float32).reshape(shape))
        offset += 4 * count
    return ModelWeights.from_tensors(config, tensors)


def save_weights(weights, path):
    Path(path).write_bytes(to_bytes(weights))


def load_weights(path):
    return from_bytes(Path(path).read_bytes())


class SplitMix64:
    """SplitMix64 stream; ``next_block`` draws many values at once."""

    def __init__(self, seed):
        self.state = int(seed) & 0xFFFFFFFFFFFFFFFF

    def next_block(self, n):
        base = np.uint64(self.state)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = base + steps * np.uint64(GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN_GAMMA) & 0xFFFFFFFFFFFFFFFF
        return z

    def next_u64(self):
        return int(self.next_block(1)[0])

    def uniform_f32(self, n):
        """``n`` floats in [0, 1) from the top 24 bits of each draw."""
        top = (self.next_block(n) >> np.uint64(40)).astype(np.float32)
        return top * np.float32(2.0**-24)


def synth_weights(config, seed):
    """Deterministic weights: each matrix uniform in [-a, a) with
    ``a = sqrt(6 / (rows + cols))``; norm vectors are ones and draw nothing."""
    rng = SplitMix64(seed)
    tensors = []
    for _, shape in ModelWeights.shapes(config):
        if len(shape) == 1:
            tensors.append(np.ones(shape, np.float32))
            continue
        a = np.float32(np.sqrt(6.0 / (shape[0] + shape[1])))
        u = rng.uniform_f32(shape[0] * shape[1])
        t = np.float32(2.0) * u - np.float32(1.0)
        tensors.append((a * t).reshape(shape))
    return ModelWeights.from_tensors(config, tensors)
