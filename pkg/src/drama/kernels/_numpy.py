"""Pure numpy/scipy implementations of the hot kernels.

Every function here has a numba twin in ``_numba.py`` with the same
signature; ``drama.kernels`` picks one of the two at import time.
"""

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra


def _nonempty(indptr):
    counts = np.diff(indptr)
    return counts, np.flatnonzero(counts)


def segment_softmax(scores, indptr):
    counts, nz = _nonempty(indptr)
    out = np.empty_like(scores)
    if scores.size == 0:
        return out
    starts = indptr[:-1][nz]
    seg_max = np.maximum.reduceat(scores, starts)
    shifted = np.exp(scores - np.repeat(seg_max, counts[nz]))
    seg_sum = np.add.reduceat(shifted, starts)
    out[:] = shifted / np.repeat(seg_sum, counts[nz])
    return out


def segment_softmax_backward(coef, grad_coef, indptr):
    counts, nz = _nonempty(indptr)
    if coef.size == 0:
        return np.empty_like(coef)
    starts = indptr[:-1][nz]
    dot = np.add.reduceat(coef * grad_coef, starts)
    return coef * (grad_coef - np.repeat(dot, counts[nz]))


def segment_sum(values, indptr):
    """Sum rows of ``values`` (E, d) per segment; empty segments give zeros."""
    counts, nz = _nonempty(indptr)
    out = np.zeros((len(counts), values.shape[1]), dtype=values.dtype)
    if values.shape[0]:
        out[nz] = np.add.reduceat(values, indptr[:-1][nz], axis=0)
    return out


def cost_to_target(indptr, indices, lengths, node_cost, target):
    """Cheapest cost from every node to ``target``.

    A hop u->v costs ``lengths[edge] + node_cost[v]``; the target's own
    queue is never charged. Unreachable nodes get ``inf``.
    """
    n = len(indptr) - 1
    charged = node_cost.astype(np.float64).copy()
    charged[target] = 0.0
    # forward edge u->v weighs length + charged[v]; search on the transpose from target
    rows = np.repeat(np.arange(n), np.diff(indptr))
    weights = lengths.astype(np.float64) + charged[indices]
    # csgraph treats explicit zeros as absent edges; all weights here are >= 1
    graph = csr_matrix((weights, (indices, rows)), shape=(n, n))
    return dijkstra(graph, directed=True, indices=target)


def scatter_add_rows(values: np.ndarray, idx: np.ndarray, n_rows: int) -> np.ndarray:
    """out[r] = sum of values[k] over k with idx[k] == r."""
    out = np.zeros((n_rows, values.shape[1]))
    if len(idx):
        order = np.argsort(idx, kind="stable")
        sorted_idx = idx[order]
        starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
        out[sorted_idx[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out
