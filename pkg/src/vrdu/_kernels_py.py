"""Pure-numpy reference implementations of the hot attention kernels.

These are the import-time fallback when the compiled extension is not
available, and the ground truth it is benchmarked and tested against.
"""

from __future__ import annotations

import numpy as np


def gather_pair(table: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """out[i, j] = table[rows[i, j], cols[i, j]]"""
    return table[rows, cols]


def scatter_add_pair(acc: np.ndarray, rows: np.ndarray, cols: np.ndarray, grad: np.ndarray) -> None:
    """acc[rows[i, j], cols[i, j]] += grad[i, j], with duplicate index accumulation."""
    np.add.at(acc, (rows, cols), grad)


def scatter_add_rows(acc: np.ndarray, ids: np.ndarray, grad: np.ndarray) -> None:
    """acc[ids[i], :] += grad[i, :], with duplicate index accumulation."""
    np.add.at(acc, ids, grad)
