# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the per-step hot path.

Mirrors ``_pure.py`` operation for operation: same summation order and the
same libm ``pow``, so both implementations return bitwise-identical results.
"""

from libc.math cimport pow as c_pow
from libc.stdlib cimport free, malloc

import numpy as np


def laplace_row(counts, double alpha, int size):
    """Additively smoothed probabilities: (count + alpha) / (total + alpha * size)."""
    cdef const long long[::1] c = np.ascontiguousarray(counts, dtype=np.int64)
    cdef long long total = 0
    cdef int i
    for i in range(size):
        total += c[i]
    cdef double denom = total + alpha * size
    if denom <= 0.0:
        return np.full(size, 1.0 / size, dtype=np.float64)
    out_arr = np.empty(size, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(size):
        out[i] = (c[i] + alpha) / denom
    return out_arr


def max_prob(probs):
    cdef const double[::1] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef double best = p[0]
    cdef Py_ssize_t i
    for i in range(1, p.shape[0]):
        if p[i] > best:
            best = p[i]
    return best


def greedy_pick(probs):
    """Lowest index attaining the maximum probability."""
    cdef const double[::1] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef double best = p[0]
    cdef Py_ssize_t idx = 0, i
    for i in range(1, p.shape[0]):
        if p[i] > best:
            best = p[i]
            idx = i
    return idx


cdef inline bint _before(double qa, Py_ssize_t ia, double qb, Py_ssize_t ib) nogil:
    # Sort key: descending probability, ties broken by ascending token id.
    if qa > qb:
        return True
    if qa < qb:
        return False
    return ia < ib


cdef void _sort_desc(double* q, Py_ssize_t* order, Py_ssize_t n) nogil:
    # Iterative quicksort over the index array; the key is a strict total
    # order, so the result is the unique sorted permutation.
    cdef Py_ssize_t stack[128]
    cdef Py_ssize_t top = 0, lo = 0, hi = n - 1, i, j, piv, tmp
    stack[top] = lo
    stack[top + 1] = hi
    top += 2
    while top > 0:
        top -= 2
        lo = stack[top]
        hi = stack[top + 1]
        while lo < hi:
            if hi - lo < 16:
                # insertion sort for small ranges
                for i in range(lo + 1, hi + 1):
                    tmp = order[i]
                    j = i
                    while j > lo and _before(q[tmp], tmp, q[order[j - 1]], order[j - 1]):
                        order[j] = order[j - 1]
                        j -= 1
                    order[j] = tmp
                break
            piv = order[lo + (hi - lo) // 2]
            i = lo
            j = hi
            while i <= j:
                while _before(q[order[i]], order[i], q[piv], piv):
                    i += 1
                while _before(q[piv], piv, q[order[j]], order[j]):
                    j -= 1
                if i <= j:
                    tmp = order[i]
                    order[i] = order[j]
                    order[j] = tmp
                    i += 1
                    j -= 1
            # recurse into the smaller side, loop on the larger
            if j - lo < hi - i:
                if i < hi and top < 126:
                    stack[top] = i
                    stack[top + 1] = hi
                    top += 2
                hi = j
            else:
                if lo < j and top < 126:
                    stack[top] = lo
                    stack[top + 1] = j
                    top += 2
                lo = i


def sample_pick(probs, double temperature, double top_p, double u):
    """Temperature-scaled nucleus draw; see the pure twin for the contract."""
    cdef const double[::1] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0]
    cdef double inv_t = 1.0 / temperature
    cdef double* q = <double*> malloc(n * sizeof(double))
    cdef Py_ssize_t* order = <Py_ssize_t*> malloc(n * sizeof(Py_ssize_t))
    cdef double* cums = <double*> malloc(n * sizeof(double))
    if q == NULL or order == NULL or cums == NULL:
        free(q)
        free(order)
        free(cums)
        raise MemoryError()
    cdef double z = 0.0, cum = 0.0, total, r
    cdef Py_ssize_t i, rank, cutoff, result
    try:
        for i in range(n):
            if p[i] > 0.0:
                q[i] = c_pow(p[i], inv_t)
                z += q[i]
            else:
                q[i] = 0.0
        if z <= 0.0:
            return greedy_pick(probs)
        for i in range(n):
            q[i] = q[i] / z
            order[i] = i
        _sort_desc(q, order, n)
        cutoff = n - 1
        for rank in range(n):
            cum += q[order[rank]]
            cums[rank] = cum
            if cum >= top_p:
                cutoff = rank
                break
        total = cums[cutoff]
        r = u * total
        result = order[cutoff]
        for rank in range(cutoff + 1):
            if cums[rank] > r:
                result = order[rank]
                break
        return result
    finally:
        free(q)
        free(order)
        free(cums)
