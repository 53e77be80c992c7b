"""Raster kernels: compiled Cython core, NumPy fallback chosen at import.

Set ``RHYTHMHEAD_PURE=1`` to force the fallback.
"""
import os

from . import _raster_py as pure

if os.environ.get("RHYTHMHEAD_PURE", "") not in ("", "0"):
    kernels = pure
    BACKEND = "python"
else:
    try:
        from . import _raster as kernels  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # extension not built
        kernels = pure
        BACKEND = "python"

__all__ = ["BACKEND", "kernels", "pure"]
