"""Backend dispatch for the hot numeric kernels.

The numba backend is used when numba imports cleanly. Set
``SPARSEDECODE_BACKEND=numpy`` to force the pure-numpy path (useful on
platforms without numba, and for cross-checking the two implementations).
"""

import os

from . import _kernels_numpy

_requested = os.environ.get("SPARSEDECODE_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"SPARSEDECODE_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

_impl = _kernels_numpy
BACKEND = "numpy"
if _requested == "numba":
    try:
        from . import _kernels_numba as _impl  # noqa: F811

        BACKEND = "numba"
    except ImportError:  # numba missing: silently keep numpy
        pass

matmul = _impl.matmul
rms_norm_rows = _impl.rms_norm_rows
inner_products = _impl.inner_products
attend = _impl.attend
page_bounds = _impl.page_bounds
top_k = _impl.top_k

__all__ = [
    "BACKEND",
    "matmul",
    "rms_norm_rows",
    "inner_products",
    "attend",
    "page_bounds",
    "top_k",
]
