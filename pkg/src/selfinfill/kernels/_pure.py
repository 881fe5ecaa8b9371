"""Pure-Python kernels: the fallback twin of the compiled extension.

Every function here mirrors ``_core.pyx`` operation for operation (same
summation order, same libm ``pow``), so the compiled and pure paths return
bitwise-identical results and a run is reproducible regardless of which one
the dispatcher picked.
"""

from __future__ import annotations

import math

import numpy as np


def laplace_row(counts: np.ndarray, alpha: float, size: int) -> np.ndarray:
    """Additively smoothed probabilities: (count + alpha) / (total + alpha * size).

    An all-zero row with alpha == 0 has no defined conditional; it degrades to
    the uniform distribution.
    """
    c = counts.tolist()
    total = 0
    for v in c:
        total += v
    denom = total + alpha * size
    if denom <= 0.0:
        return np.full(size, 1.0 / size, dtype=np.float64)
    out = np.empty(size, dtype=np.float64)
    for i in range(size):
        out[i] = (c[i] + alpha) / denom
    return out


def max_prob(probs: np.ndarray) -> float:
    p = probs.tolist()
    best = p[0]
    for v in p[1:]:
        if v > best:
            best = v
    return best


def greedy_pick(probs: np.ndarray) -> int:
    """Lowest index attaining the maximum probability."""
    p = probs.tolist()
    best = p[0]
    idx = 0
    for i in range(1, len(p)):
        if p[i] > best:
            best = p[i]
            idx = i
    return idx


def sample_pick(probs: np.ndarray, temperature: float, top_p: float, u: float) -> int:
    """Temperature-scaled nucleus draw.

    Scales probabilities to p**(1/temperature), renormalizes, keeps the
    minimal prefix of tokens (sorted by descending probability, ties broken
    by ascending id) whose cumulative mass reaches top_p, renormalizes within
    that nucleus and selects by the uniform variate u in [0, 1).

    If the temperature scaling underflows everything to zero (the T -> 0
    limit), the draw degrades to the greedy argmax.
    """
    p = probs.tolist()
    n = len(p)
    inv_t = 1.0 / temperature
    scaled = [0.0] * n
    z = 0.0
    for i in range(n):
        if p[i] > 0.0:
            scaled[i] = math.pow(p[i], inv_t)
            z += scaled[i]
    if z <= 0.0:
        return greedy_pick(probs)
    q = [s / z for s in scaled]
    order = sorted(range(n), key=lambda i: (-q[i], i))
    # Minimal prefix with cumulative mass >= top_p; float shortfall at
    # top_p == 1.0 falls back to the full support.
    cum = 0.0
    cutoff = n - 1
    cums = [0.0] * n
    for rank, i in enumerate(order):
        cum += q[i]
        cums[rank] = cum
        if cum >= top_p:
            cutoff = rank
            break
    total = cums[cutoff]
    r = u * total
    for rank in range(cutoff + 1):
        if cums[rank] > r:
            return order[rank]
    return order[cutoff]
