"""Kernel backend selection.

The compiled extension is used when it imports; otherwise, or when
``DBPLAB_PURE_PYTHON=1`` is set, the numpy fallback is used. The row
argsort always comes from numpy: its stable sort beats the compiled merge
sort at the row sizes used here, and both give identical output.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DBPLAB_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

uniform_stream = _impl.uniform_stream
gaussian_fill = _impl.gaussian_fill
stable_argsort_rows = _kernels_py.stable_argsort_rows

__all__ = ["BACKEND", "uniform_stream", "gaussian_fill", "stable_argsort_rows"]
