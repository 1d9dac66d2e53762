"""Backend selection for the per-pixel kernels.

The compiled extension is used when it was built at install time; otherwise,
or when ``ROADSSDA_PURE_PYTHON=1`` is set, the numpy fallback is used.
"""
import os

from . import _kernels_py

BACKEND = "python"
stroke_polyline = _kernels_py.stroke_polyline
iou_counts = _kernels_py.iou_counts

if os.environ.get("ROADSSDA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None
    if _compiled is not None:
        BACKEND = "cython"
        stroke_polyline = _compiled.stroke_polyline
        iou_counts = _compiled.iou_counts


def backends():
    """Map backend name -> module for every backend importable here."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels as compiled
        found["cython"] = compiled
    except ImportError:
        pass
    return found
