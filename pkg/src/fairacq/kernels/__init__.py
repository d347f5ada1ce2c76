"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly, unless the environment
variable ``FAIRACQ_DISABLE_NUMBA`` is set to a truthy value (``1``, ``true``,
``yes``). The flag is read once at import time. Both paths expose the same
functions; ``BACKEND`` names the active one.

``lstm_forward`` always dispatches to numpy: it is dominated by ``tanh``,
which numpy vectorizes while the compiled loop makes scalar libm calls
(see ``benchmarks/bench_kernels.py``). The numba twin is kept and tested.
"""
import os

from . import _numpy as numpy_impl

_DISABLED = os.environ.get("FAIRACQ_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

numba_impl = None
if not _DISABLED:
    try:
        from . import _numba as numba_impl
    except ImportError:  # pragma: no cover - numba is a declared dependency
        numba_impl = None

_active = numba_impl if numba_impl is not None else numpy_impl
BACKEND = "numba" if numba_impl is not None else "numpy"

pack_tokens = _active.pack_tokens
attend_forward = _active.attend_forward
attend_backward = _active.attend_backward
lstm_forward = numpy_impl.lstm_forward
lstm_backward = _active.lstm_backward
scatter_add_rows = _active.scatter_add_rows
masked_argmax = _active.masked_argmax

__all__ = [
    "BACKEND",
    "numpy_impl",
    "numba_impl",
    "pack_tokens",
    "attend_forward",
    "attend_backward",
    "lstm_forward",
    "lstm_backward",
    "scatter_add_rows",
    "masked_argmax",
]
