"""numba-compiled kernels. Same contracts as ``_numpy.py``."""

import heapq

import numpy as np
from numba import njit

_opts = dict(cache=True, nogil=True, fastmath=False, boundscheck=False)


@njit(**_opts)
def segment_softmax(scores, indptr):
    out = np.empty_like(scores)
    for s in range(len(indptr) - 1):
        lo, hi = indptr[s], indptr[s + 1]
        if hi <= lo:
            continue
        m = scores[lo]
        for e in range(lo + 1, hi):
            if scores[e] > m:
                m = scores[e]
        total = 0.0
        for e in range(lo, hi):
            out[e] = np.exp(scores[e] - m)
            total += out[e]
        for e in range(lo, hi):
            out[e] /= total
    return out


@njit(**_opts)
def segment_softmax_backward(coef, grad_coef, indptr):
    out = np.empty_like(coef)
    for s in range(len(indptr) - 1):
        lo, hi = indptr[s], indptr[s + 1]
        dot = 0.0
        for e in range(lo, hi):
            dot += coef[e] * grad_coef[e]
        for e in range(lo, hi):
            out[e] = coef[e] * (grad_coef[e] - dot)
    return out


@njit(**_opts)
def segment_sum(values, indptr):
    nseg = len(indptr) - 1
    d = values.shape[1]
    out = np.zeros((nseg, d), dtype=values.dtype)
    for s in range(nseg):
        for e in range(indptr[s], indptr[s + 1]):
            for k in range(d):
                out[s, k] += values[e, k]
    return out


@njit(**_opts)
def cost_to_target(indptr, indices, lengths, node_cost, target):
    n = len(indptr) - 1
    dist = np.full(n, np.inf)
    done = np.zeros(n, dtype=np.bool_)
    dist[target] = 0.0
    heap = [(0.0, target)]
    while len(heap) > 0:
        d, v = heapq.heappop(heap)
        if done[v]:
            continue
        done[v] = True
        # entering v from a neighbour u costs length(u, v) + queue(v), except at the target
        enter = 0.0 if v == target else float(node_cost[v])
        for e in range(indptr[v], indptr[v + 1]):
            u = indices[e]
            if done[u]:
                continue
            cand = d + lengths[e] + enter
            if cand < dist[u]:
                dist[u] = cand
                heapq.heappush(heap, (cand, u))
    return dist


@njit(**_opts)
def scatter_add_rows(values, idx, n_rows):
    out = np.zeros((n_rows, values.shape[1]))
    for k in range(len(idx)):
        r = idx[k]
        for c in range(values.shape[1]):
            out[r, c] += values[k, c]
    return out
