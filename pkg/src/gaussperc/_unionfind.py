"""Union-find kernels for lattice site percolation (compiled with numba)."""
import numpy as np
from numba import njit


@njit(cache=True)
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@njit(cache=True)
def label_flat(mask, shape):
    """Face-adjacency labels of ``mask`` (flattened, C order).

    Roots are always the smallest linear index of their component, so labels
    are assigned in order of first appearance in a row-major scan. Sites
    outside ``mask`` get ``-1``.
    """
    n = mask.size
    d = shape.size
    strides = np.empty(d, np.int64)
    s = 1
    for ax in range(d - 1, -1, -1):
        strides[ax] = s
        s *= shape[ax]
    parent = np.arange(n)
    for i in range(n):
        if not mask[i]:
            continue
        for ax in range(d):
            if (i // strides[ax]) % shape[ax] == 0:
                continue
            j = i - strides[ax]
            if not mask[j]:
                continue
            ri = _find(parent, i)
            rj = _find(parent, j)
            if ri < rj:
                parent[rj] = ri
            elif rj < ri:
                parent[ri] = rj
    labels = np.full(n, -1, np.int64)
    count = 0
    for i in range(n):
        if not mask[i]:
            continue
        r = _find(parent, i)
        if r == i:
            labels[i] = count
            count += 1
        else:
            labels[i] = labels[r]
    return labels, count


@njit(cache=True)
def component_boxes(labels, shape, count):
    """Per-component site counts and index bounding boxes ``(lo, hi)``."""
    d = shape.size
    sizes = np.zeros(count, np.int64)
    lo = np.full((count, d), np.iinfo(np.int64).max, np.int64)
    hi = np.full((count, d), -1, np.int64)
    idx = np.empty(d, np.int64)
    for i in range(labels.size):
        c = labels[i]
        if c < 0:
            continue
        sizes[c] += 1
        rem = i
        for ax in range(d - 1, -1, -1):
            idx[ax] = rem % shape[ax]
            rem //= shape[ax]
        for ax in range(d):
            if idx[ax] < lo[c, ax]:
                lo[c, ax] = idx[ax]
            if idx[ax] > hi[c, ax]:
                hi[c, ax] = idx[ax]
    return sizes, lo, hi
