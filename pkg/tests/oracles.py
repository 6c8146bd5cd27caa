"""Independent reference computations used by the tests.

These are deliberately naive (explicit loops, scalar math) and share no
code with the package.
"""

import math

import numpy as np


def naive_attention(x, wq, wk, wv, wo):
    """Single-head attention with explicit loops over rows and columns."""
    n, d = x.shape
    q = [[sum(x[i, t] * wq[t, c] for t in range(d)) for c in range(d)] for i in range(n)]
    k = [[sum(x[i, t] * wk[t, c] for t in range(d)) for c in range(d)] for i in range(n)]
    v = [[sum(x[i, t] * wv[t, c] for t in range(d)) for c in range(d)] for i in range(n)]
    out = np.zeros((n, d))
    for i in range(n):
        scores = [sum(q[i][c] * k[j][c] for c in range(d)) / math.sqrt(d) for j in range(n)]
        top = max(scores)
        w = [math.exp(s - top) for s in scores]
        total = sum(w)
        w = [a / total for a in w]
        head = [sum(w[j] * v[j][c] for j in range(n)) for c in range(d)]
        for c in range(d):
            out[i, c] = sum(head[t] * wo[t, c] for t in range(d))
    return out


def kappa_from_marginals(m):
    m = np.asarray(m, dtype=float)
    total = 0.0
    for row in m:
        for val in row:
            total += val
    c = m.shape[0]
    po = sum(m[i, i] for i in range(c)) / total
    pe = 0.0
    for i in range(c):
        row = sum(m[i, j] for j in range(c))
        col = sum(m[j, i] for j in range(c))
        pe += (row / total) * (col / total)
    return 0.0 if pe >= 1.0 else (po - pe) / (1.0 - pe)


def rrc_value(t, beta):
    """Scalar RRC pulse with unit symbol period."""
    if abs(t) < 1e-12:
        return 1.0 - beta + 4 * beta / math.pi
    if beta > 0 and abs(abs(t) - 1 / (4 * beta)) < 1e-12:
        return beta / math.sqrt(2) * ((1 + 2 / math.pi) * math.sin(math.pi / (4 * beta))
                                      + (1 - 2 / math.pi) * math.cos(math.pi / (4 * beta)))
    num = math.sin(math.pi * t * (1 - beta)) + 4 * beta * t * math.cos(math.pi * t * (1 + beta))
    return num / (math.pi * t * (1 - (4 * beta * t) ** 2))


def layer_norm_row(row, eps):
    n = len(row)
    mu = sum(row) / n
    var = sum((r - mu) ** 2 for r in row) / n
    return [(r - mu) / math.sqrt(var + eps) for r in row]


def normal_cdf(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def cross_entropy_sum(probs, label):
    onehot = [1.0 if c == label else 0.0 for c in range(len(probs))]
    return -sum(y * math.log(max(p, 1e-12)) for y, p in zip(onehot, probs))


def binomial_bounds(n, p, sigmas=3.0):
    sd = math.sqrt(p * (1 - p) / n)
    return p - sigmas * sd, p + sigmas * sd
