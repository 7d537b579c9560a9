"""Desk-scale decoder inference with position-persistent sparse attention."""

from .errors import (
    BoundsError,
    BudgetError,
    EngineError,
    FormatError,
    InputError,
    ScheduleError,
    ShapeError,
    StateError,
)
from .kernels import BACKEND
from .kvcache import KvCache, PollutionLog, kv_size_bytes
from .model import (
    DecodeConfig,
    LayerSchedule,
    ModelConfig,
    ModelWeights,
    Role,
    cache_correction,
    decode_step,
    default_reselect_layer,
    default_schedule,
    generate,
    prefill,
)
from .weights_io import load_weights, save_weights, synth_weights

__version__ = "0.1.0"
