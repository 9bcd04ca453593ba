"""Inner-loop kernels shared by the QP and branch-and-bound code.

Each kernel exists twice: a numba version (``*_jit``) and a vectorised numpy
version (``*_np``).  The module-level names point at one or the other
depending on :data:`dccoord._jit.USE_JIT`.  Both versions perform the same
floating point operations in the same order so results are bit-identical.
"""

import numpy as np

from ._jit import USE_JIT, njit

INF = np.inf


# --------------------------------------------------------------------------
# step length (ratio test)
# --------------------------------------------------------------------------
@njit(cache=True)
def ratio_test_jit(slack, rate, blocked, tol):
    best = INF
    idx = -1
    for i in range(slack.shape[0]):
        if blocked[i]:
            continue
        r = rate[i]
        if r > tol:
            s = slack[i]
            if s < 0.0:
                s = 0.0
            a = s / r
            if a < best:
                best = a
                idx = i
    return best, idx


def ratio_test_np(slack, rate, blocked, tol):
    cand = (~blocked) & (rate > tol)
    if not cand.any():
        return INF, -1
    steps = np.full(slack.shape[0], INF)
    steps[cand] = np.maximum(slack[cand], 0.0) / rate[cand]
    i = int(np.argmin(steps))
    if not np.isfinite(steps[i]):
        return INF, -1
    return float(steps[i]), i


# --------------------------------------------------------------------------
# multiplier to drop from the working set
# --------------------------------------------------------------------------
@njit(cache=True)
def select_drop_jit(mult, threshold, bland):
    idx = -1
    worst = -threshold
    for i in range(mult.shape[0]):
        v = mult[i]
        if v < -threshold:
            if bland:
                return i
            if v < worst:
                worst = v
                idx = i
    return idx


def select_drop_np(mult, threshold, bland):
    neg = np.flatnonzero(mult < -threshold)
    if neg.size == 0:
        return -1
    if bland:
        return int(neg[0])
    return int(neg[np.argmin(mult[neg])])


# --------------------------------------------------------------------------
# branching scores
# --------------------------------------------------------------------------
@njit(cache=True)
def most_fractional_jit(values, tol):
    idx = -1
    best = tol
    for i in range(values.shape[0]):
        v = values[i]
        f = v - np.floor(v)
        d = min(f, 1.0 - f)
        if d > best:
            best = d
            idx = i
    return idx, best


def most_fractional_np(values, tol):
    f = values - np.floor(values)
    d = np.minimum(f, 1.0 - f)
    if d.size == 0:
        return -1, tol
    i = int(np.argmax(d))
    if d[i] > tol:
        return i, float(d[i])
    return -1, tol


@njit(cache=True)
def complementarity_jit(a, b):
    out = np.empty(a.shape[0])
    for i in range(a.shape[0]):
        out[i] = abs(a[i]) * abs(b[i])
    return out


def complementarity_np(a, b):
    return np.abs(a) * np.abs(b)


# --------------------------------------------------------------------------
# space-time incidence
# --------------------------------------------------------------------------
@njit(cache=True)
def incidence_jit(n, tau):
    k = (n * (n - 1) // 2) * tau + n * (tau - 1)
    A = np.zeros((n * tau, k))
    col = 0
    for t in range(tau):
        for i in range(n):
            for j in range(i + 1, n):
                A[t * n + i, col] = 1.0
                A[t * n + j, col] = -1.0
                col += 1
    for i in range(n):
        for t in range(tau - 1):
            A[(t + 1) * n + i, col] = 1.0
            A[t * n + i, col] = -1.0
            col += 1
    return A


def incidence_np(n, tau):
    k = (n * (n - 1) // 2) * tau + n * (tau - 1)
    A = np.zeros((n * tau, k))
    iu, ju = np.triu_indices(n, 1)
    npair = iu.size
    for t in range(tau):
        cols = np.arange(t * npair, (t + 1) * npair)
        A[t * n + iu, cols] = 1.0
        A[t * n + ju, cols] = -1.0
    base = npair * tau
    if tau > 1:
        dc = np.repeat(np.arange(n), tau - 1)
        hr = np.tile(np.arange(tau - 1), n)
        cols = base + np.arange(n * (tau - 1))
        A[(hr + 1) * n + dc, cols] = 1.0
        A[hr * n + dc, cols] = -1.0
    return A


if USE_JIT:
    ratio_test = ratio_test_jit
    select_drop = select_drop_jit
    most_fractional = most_fractional_jit
    complementarity = complementarity_jit
    incidence = incidence_jit
else:
    ratio_test = ratio_test_np
    select_drop = select_drop_np
    most_fractional = most_fractional_np
    complementarity = complementarity_np
    incidence = incidence_np
