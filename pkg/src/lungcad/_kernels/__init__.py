"""Hot-kernel dispatch: compiled Cython core when available, NumPy fallback
otherwise. Set LUNGCAD_NO_EXT=1 to force the fallback (used by the benchmark
and to debug the compiled path)."""

import os

from . import fallback

if os.environ.get("LUNGCAD_NO_EXT"):
    _core = None
else:
    try:
        from . import _core
    except ImportError:
        _core = None

HAVE_COMPILED = _core is not None
_impl = _core if HAVE_COMPILED else fallback

trilinear_sample = _impl.trilinear_sample
erode6 = _impl.erode6
dilate6 = _impl.dilate6
label6 = _impl.label6

__all__ = [
    "HAVE_COMPILED",
    "fallback",
    "trilinear_sample",
    "erode6",
    "dilate6",
    "label6",
]
