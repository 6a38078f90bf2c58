"""Kernel dispatch: compiled extension if built, numpy fallback otherwise.

The compiled path only accepts float64 C-contiguous inputs with int64
indices; anything else silently routes to the numpy implementation so
callers never need to care which backend is active.
"""

from __future__ import annotations

import os

import numpy as np

from vrdu import _kernels_py

try:
    if os.environ.get("VRDU_NO_EXT"):
        raise ImportError("extension disabled via VRDU_NO_EXT")
    from vrdu import _ckernels

    HAVE_EXT = True
except ImportError:
    _ckernels = None
    HAVE_EXT = False

BACKEND = "cython" if HAVE_EXT else "numpy"


def _ext_ok(*arrays: np.ndarray) -> bool:
    if not HAVE_EXT:
        return False
    for a in arrays:
        if not a.flags.c_contiguous:
            return False
        if a.dtype not in (np.float64, np.int64):
            return False
    return True


def gather_pair(table, rows, cols):
    if _ext_ok(table, rows, cols):
        return _ckernels.gather_pair(table, rows, cols)
    return _kernels_py.gather_pair(table, rows, cols)


def scatter_add_pair(acc, rows, cols, grad):
    if _ext_ok(acc, rows, cols, grad):
        _ckernels.scatter_add_pair(acc, rows, cols, grad)
    else:
        _kernels_py.scatter_add_pair(acc, rows, cols, grad)


def scatter_add_rows(acc, ids, grad):
    if _ext_ok(acc, ids, grad):
        _ckernels.scatter_add_rows(acc, ids, grad)
    else:
        _kernels_py.scatter_add_rows(acc, ids, grad)
