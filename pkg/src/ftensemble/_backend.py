"""Kernel backend selection, done once at import time.

The compiled Cython extension is preferred; the pure-numpy twin is the
fallback. Set FT_BACKEND=compiled or FT_BACKEND=pure to force a choice
(forcing "compiled" when the extension is missing raises ImportError).
"""

import os

from . import _kernels_py

_requested = os.environ.get("FT_BACKEND", "auto").strip().lower() or "auto"

if _requested == "pure":
    _impl = _kernels_py
    BACKEND = "pure"
elif _requested == "compiled":
    from . import _kernels as _impl

    BACKEND = "compiled"
elif _requested == "auto":
    try:
        from . import _kernels as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "pure"
else:
    raise ValueError(
        f"FT_BACKEND must be 'compiled', 'pure' or 'auto', got {_requested!r}"
    )

jacobi_sweeps = _impl.jacobi_sweeps
