"""conv2d lowering kernels: compiled extension if built, numpy fallback otherwise.

The selection happens once at import. `BACKEND` reports which one is active;
both implementations are importable directly (fadct._kernels.fallback and
fadct._kernels._conv_cy) so tests and benchmarks can compare them.
"""

from . import fallback

try:
    from . import _conv_cy as _impl
    BACKEND = "compiled"
except ImportError:
    _impl = fallback
    BACKEND = "fallback"

im2col = _impl.im2col
col2im = _impl.col2im

__all__ = ["im2col", "col2im", "BACKEND", "fallback"]
