"""Slow, independently written reference implementations used as test oracles."""

import math


def ccc_double_loop(x, y):
    """Lin's CCC from pairwise differences.

    Uses sum_ij (a_i - a_j)(b_i - b_j) = 2 N^2 cov(a, b), so no mean-centering
    code is shared with the library.
    """
    n = len(x)
    sxy = sxx = syy = 0.0
    for i in range(n):
        xi, yi = x[i], y[i]
        for j in range(n):
            dx = xi - x[j]
            dy = yi - y[j]
            sxy += dx * dy
            sxx += dx * dx
            syy += dy * dy
    scale = 2.0 * n * n
    mean_gap = (math.fsum(x) - math.fsum(y)) / n
    denom = sxx / scale + syy / scale + mean_gap * mean_gap
    return 2.0 * (sxy / scale) / denom


def coattention_loops(q, k, v):
    """(softmax(Q K^T / sqrt(d_K)) + 1) V evaluated with scalar loops."""
    n, d_k = len(q), len(k[0])
    m = len(k)
    width = len(v[0])
    out = [[0.0] * width for _ in range(n)]
    for i in range(n):
        scores = []
        for j in range(m):
            s = 0.0
            for c in range(d_k):
                s += q[i][c] * k[j][c]
            scores.append(s / math.sqrt(d_k))
        top = max(scores)
        exps = [math.exp(s - top) for s in scores]
        total = sum(exps)
        for j in range(m):
            weight = exps[j] / total + 1.0
            for c in range(width):
                out[i][c] += weight * v[j][c]
    return out


def reference_lr_trace(flags, lr, min_lr, warmup, patience, factor, n_stages):
    """Learning rate of each epoch, written as a flat loop over epochs.

    Mirrors the documented rules, not the library code: linear warmup over the
    first ``warmup`` epochs (which never count as stalls), decay by ``factor``
    after ``patience`` consecutive stalls, and a jump back to ``lr`` (next
    stage) when the decayed rate drops below ``min_lr``. Stops are ignored.
    """
    trace = []
    rate = lr / warmup
    stalls = 0
    stage = 0
    for epoch, improved in enumerate(flags, start=1):
        trace.append(rate)
        if epoch < warmup:
            rate = (epoch + 1) / warmup * lr
            continue
        if epoch == warmup:
            rate = lr
            continue
        if improved:
            stalls = 0
            continue
        stalls += 1
        if stalls == patience:
            stalls = 0
            rate = rate * factor
            if rate < min_lr and stage < n_stages - 1:
                stage += 1
                rate = lr
    return trace
