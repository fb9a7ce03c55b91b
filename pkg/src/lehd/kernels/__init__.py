"""Hot oracle kernels: compiled extension when available, numpy fallback otherwise.

Set ``LEHD_PURE_PYTHON=1`` to force the fallback.  ``BACKEND`` names the
implementation in use.
"""
import importlib
import os

import numpy as np

from . import _pure

_fast = None
if os.environ.get("LEHD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        _fast = importlib.import_module(f"{__name__}._fast")
    except ImportError:  # extension not built
        _fast = None

BACKEND = "compiled" if _fast is not None else "python"


def held_karp(D, start, end):
    D = np.ascontiguousarray(D, dtype=np.float64)
    if _fast is not None:
        c, order = _fast.held_karp(D, int(start), int(end))
        return float(c), order
    return _pure.held_karp(D, start, end)


def nearest_neighbor_tour(D, start=0):
    D = np.ascontiguousarray(D, dtype=np.float64)
    if _fast is not None:
        return _fast.nearest_neighbor_tour(D, int(start))
    return _pure.nearest_neighbor_tour(D, start)


def closed_length(D, order):
    D = np.ascontiguousarray(D, dtype=np.float64)
    if _fast is not None:
        return float(_fast.closed_length(D, np.ascontiguousarray(order, dtype=np.int_)))
    return _pure.closed_length(D, order)
