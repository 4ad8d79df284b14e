"""Independent reference implementations used as test oracles.

These deliberately avoid the package's code paths: plain Python loops,
explicit sorting and textbook formulas.
"""

from __future__ import annotations

import math

import numpy as np


def percentile_type7(values, p):
    """Linear interpolation between order statistics, 1-based rank 1 + p/100*(n-1)."""
    xs = sorted(values)
    n = len(xs)
    h = 1 + p / 100.0 * (n - 1)
    lo = math.floor(h)
    frac = h - lo
    if lo >= n:
        return xs[-1]
    return xs[lo - 1] + frac * (xs[lo] - xs[lo - 1])


def _height_metrics(hs, suffix, out):
    n = len(hs)
    if n == 0:
        return
    # compensated mean keeps the oracle independent of numpy's pairwise summation
    mean = math.fsum(hs) / n
    out["zmean" + suffix] = mean
    if n >= 2:
        out["zsd" + suffix] = math.sqrt(math.fsum((h - mean) ** 2 for h in hs) / (n - 1))
    for p in (5, 10, 20, 30, 40, 50, 60, 70, 80, 90, 95):
        out[f"zp{p:02d}{suffix}"] = percentile_type7(hs, p)
    zmin, zmax = min(hs), max(hs)
    if zmax > zmin:
        for k in range(2, 11):
            thr = zmin + (k - 1) * (zmax - zmin) / 10.0
            # O(n^2)-style counting: compare each height against every threshold explicitly
            count = sum(1 for h in hs if h > thr)
            out[f"d{k}{suffix}"] = 100.0 * count / n


def brute_metrics(points):
    """Metric dictionary for a list of (z, return_number, num_returns) tuples."""
    out = {}
    if not points:
        return out
    first = [z for z, rn, nr in points if rn == 1]
    last = [z for z, rn, nr in points if rn == nr]
    for cls, hs in (("f", first), ("l", last)):
        _height_metrics(hs, "_" + cls, out)
        _height_metrics([h for h in hs if h > 2.0], "_2m_" + cls, out)
    out["perc_n_2m"] = 100.0 * sum(1 for z, _, _ in points if z > 2.0) / len(points)
    return out


def normal_equations(X, y):
    """OLS coefficients via (X'X) b = X'y solved by Gauss-Jordan elimination."""
    X = [list(map(float, r)) for r in X]
    y = [float(v) for v in y]
    p = len(X[0])
    A = [[sum(X[i][a] * X[i][b] for i in range(len(X))) for b in range(p)]
         + [sum(X[i][a] * y[i] for i in range(len(X)))] for a in range(p)]
    for c in range(p):
        piv = max(range(c, p), key=lambda r: abs(A[r][c]))
        A[c], A[piv] = A[piv], A[c]
        for r in range(p):
            if r != c:
                f = A[r][c] / A[c][c]
                A[r] = [a - f * b for a, b in zip(A[r], A[c])]
    return np.array([A[r][p] / A[r][r] for r in range(p)])


def weighted_ols(X, y, w):
    """Weighted least squares by rescaling rows with sqrt(w)."""
    sw = np.sqrt(np.asarray(w, dtype=float))
    Xw = np.asarray(X, dtype=float) * sw[:, None]
    yw = np.asarray(y, dtype=float) * sw
    return normal_equations(Xw, yw)


def brute_accuracy(y, yhat):
    n = len(y)
    ybar = math.fsum(y) / n
    sq = math.fsum((a - b) ** 2 for a, b in zip(y, yhat))
    md = math.fsum(a - b for a, b in zip(y, yhat)) / n
    sst = math.fsum((a - ybar) ** 2 for a in y)
    rmsd = math.sqrt(sq / n)
    r2 = 1 - sq / sst if n >= 2 and sst > 0 else float("nan")
    return rmsd, 100 * rmsd / ybar, md, 100 * md / ybar, r2
