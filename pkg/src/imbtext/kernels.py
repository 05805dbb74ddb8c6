"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy/pure
Python fallback. Set ``IMBTEXT_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("IMBTEXT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND
fill_uniform = _impl.fill_uniform
fill_u64 = _impl.fill_u64
masked_softmax = _impl.masked_softmax

fallback = _kernels_py


def compiled():
    """Return the compiled module, or None when it was not built."""
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels
