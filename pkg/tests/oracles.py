"""Slow, independently written reference implementations for tests.

Nothing here imports the package's numeric code: rounding to half goes
through ``struct``'s binary16 packer and every loop is plain Python.
"""

import math
import struct

MIN_NORMAL = 2.0**-14


def half(x: float) -> float:
    try:
        return struct.unpack("<e", struct.pack("<e", x))[0]
    except OverflowError:
        return math.inf


def half_bits(x: float) -> int:
    return struct.unpack("<H", struct.pack("<e", x))[0]


def max_valid_scale(q_max: int) -> float:
    # exponent field 30 - q_max, mantissa all ones
    return (2.0 - 2.0**-10) * 2.0 ** (30 - q_max - 15)


def exponent(w_abs: float, s: float, q_max: int) -> int:
    if w_abs == 0.0:
        return 0
    v = math.log2(w_abs / s)
    a = abs(v)
    f = math.floor(a)
    if a - f >= 0.5:
        f += 1
    r = f if v >= 0 else -f
    return max(0, min(q_max, r))


def q1(group, s: float, q_max: int) -> float:
    total = 0.0
    for w in group:
        p = -1.0 if w < 0 else 1.0
        e = exponent(abs(w), s, q_max)
        d = w - s * p * 2.0**e
        total += d * d  # libm pow(d, 2) is not always correctly rounded
    return total


def exhaustive_search(group, bits: int, step: float = 0.01, count: int = 200):
    """Return (b*, s*, Q1_min) scanning every grid point in order."""
    q_max = 2 ** (bits - 1) - 1
    s0 = max(abs(w) for w in group) / (2.0**q_max - 1.0)
    best = (None, None, math.inf)
    for i in range(1, count + 1):
        b = i * step
        s = half(max(s0 * b, MIN_NORMAL))
        if s > max_valid_scale(q_max):
            continue
        loss = q1(group, s, q_max)
        if loss < best[2]:
            best = (b, s, loss)
    return best


def matmul(a, b):
    n, k, m = len(a), len(b), len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i][t] * b[t][j]
            out[i][j] = acc
    return out


def block_forward(ws, x):
    """Single-head attention + GELU MLP, written without the package."""
    import numpy as np

    wq, wk, wv, w1, w2 = ws
    d = wq.shape[0]
    out = np.empty(x.shape[:-1] + (w2.shape[1],))
    for b in range(x.shape[0]):
        xb = x[b]
        scores = (xb @ wq) @ (xb @ wk).T / math.sqrt(d)
        scores = scores - scores.max(axis=1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=1, keepdims=True)
        h = xb + p @ (xb @ wv)
        z = h @ w1
        gelu = np.vectorize(lambda t: 0.5 * t * (1.0 + math.erf(t / math.sqrt(2.0))))
        out[b] = gelu(z) @ w2
    return out


def frozen_code_loss(forward, weights, scales, gammas, exps, signs, group_size, weight_decay):
    """Q2 with exponents held fixed: W~ = S (1 + gamma) P 2**E."""
    import numpy as np

    def build(s, g, e, p, rows):
        full = np.repeat(s * (1.0 + g), group_size, axis=0)[:rows]
        return full * p * np.exp2(e)

    wt = [build(s, g, e, p, w.shape[0]) for w, s, g, e, p in zip(weights, scales, gammas, exps, signs)]
    diff = forward(weights) - forward(wt)
    return float(np.sum(diff * diff)) + 0.5 * weight_decay * sum(float(np.sum(g * g)) for g in gammas)


def central_diff_grad(loss_of, gammas, h=1e-6):
    import numpy as np

    grads = []
    for k, g in enumerate(gammas):
        out = np.zeros_like(g)
        for idx in np.ndindex(g.shape):
            plus = [x.copy() for x in gammas]
            minus = [x.copy() for x in gammas]
            plus[k][idx] += h
            minus[k][idx] -= h
            out[idx] = (loss_of(plus) - loss_of(minus)) / (2 * h)
        grads.append(out)
    return grads
