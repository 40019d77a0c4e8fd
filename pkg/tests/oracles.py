"""Independent reference computations used by unit and acceptance tests."""

from __future__ import annotations

import math

import mpmath
import numpy as np
from scipy import integrate

from icupass.rnn import LstmParams, SequenceBatch


def normal_equations(ages, y, degree, ridge=1e-8, dps=50):
    """Ridge solution (X'X + ridge P) c = X'y on standardized age in extended
    precision; P is the identity with the intercept entry zeroed."""
    ages = np.asarray(ages, dtype=float)
    z = (ages - ages.mean()) / ages.std()
    with mpmath.workdps(dps):
        X = mpmath.matrix([[mpmath.mpf(float(zi)) ** k for k in range(degree + 1)] for zi in z])
        Y = mpmath.matrix([mpmath.mpf(float(v)) for v in y])
        P = mpmath.eye(degree + 1)
        P[0, 0] = 0
        A = X.T * X + mpmath.mpf(ridge) * P
        c = mpmath.lu_solve(A, X.T * Y)
        return np.array([float(v) for v in c])


def f_sf_quadrature(f, df1, df2):
    """P(F > f) by integrating the F density over [0, f] (lgamma normalizer)."""
    a, b = df1 / 2.0, df2 / 2.0
    log_norm = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(df1 / df2)

    def density(x):
        if x <= 0:
            return 0.0
        return math.exp(log_norm + (a - 1) * math.log(x) - (a + b) * math.log1p(df1 * x / df2))

    # the density is singular at 0 when df1 == 1; split the range to help quad
    pts = [0.0, min(f, 1e-6), min(f, 1.0), f]
    total = 0.0
    for lo, hi in zip(pts, pts[1:]):
        if hi > lo:
            total += integrate.quad(density, lo, hi, epsabs=1e-14, epsrel=1e-12, limit=400)[0]
    return 1.0 - total


def anova_by_hand(groups):
    gs = [list(map(float, g)) for g in groups]
    allv = [v for g in gs for v in g]
    grand = sum(allv) / len(allv)
    means = [sum(g) / len(g) for g in gs]
    ssb = sum(len(g) * (m - grand) ** 2 for g, m in zip(gs, means))
    ssw = sum((v - m) ** 2 for g, m in zip(gs, means) for v in g)
    dfb, dfw = len(gs) - 1, len(allv) - len(gs)
    return (ssb / dfb) / (ssw / dfw), dfb, dfw


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def scalar_cell(W, U, b, x, h, c):
    """Element-by-element LSTM step with gate order (i, f, g, o)."""
    H = len(h)
    a = [sum(W[r][j] * x[j] for j in range(len(x))) + sum(U[r][j] * h[j] for j in range(H)) + b[r]
         for r in range(4 * H)]
    h_new, c_new = [], []
    for k in range(H):
        i = _sig(a[k])
        f = _sig(a[H + k])
        g = math.tanh(a[2 * H + k])
        o = _sig(a[3 * H + k])
        ck = f * c[k] + i * g
        c_new.append(ck)
        h_new.append(o * math.tanh(ck))
    return h_new, c_new


def finite_difference_grads(params: LstmParams, batch: SequenceBatch, loss_fn, step=1e-5):
    out = {}
    for name, arr in params.arrays().items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + step
            up = loss_fn(params, batch)
            flat[k] = keep - step
            down = loss_fn(params, batch)
            flat[k] = keep
            gflat[k] = (up - down) / (2 * step)
        out[name] = g
    return out


def max_relative_error(analytic: LstmParams, numeric: dict, floor=1e-8):
    worst = 0.0
    for name, g in numeric.items():
        a = getattr(analytic, name)
        rel = np.abs(a - g) / np.maximum(np.maximum(np.abs(a), np.abs(g)), floor)
        worst = max(worst, float(rel.max()))
    return worst
