"""Independent reference implementations used to check the library."""

from __future__ import annotations

from functools import lru_cache
from itertools import combinations
from math import comb

import numpy as np
from scipy import integrate, interpolate


def naive_ap(ranked_hits) -> float:
    """All-point interpolated AP from a ranked hit list, written out loop by loop."""
    hits = list(ranked_hits)
    npos = sum(hits)
    if npos == 0:
        return float("nan")
    precision = []
    tp = 0
    for i, h in enumerate(hits, start=1):
        tp += h
        precision.append(tp / i)
    total = 0.0
    for i, h in enumerate(hits):
        if h:
            total += max(precision[i:])
    return total / npos


EXACT_LIMIT = 20000  # placements enumerated before falling back to sampling


@lru_cache(maxsize=None)
def ranking_ap_null(n: int, k: int, draws: int = 4000) -> np.ndarray:
    """AP of every placement of ``k`` positives among ``n`` ranked items, i.e.
    its distribution when scores carry no information about the truth.
    Placements are enumerated exhaustively when there are at most
    ``EXACT_LIMIT`` of them and sampled uniformly (fixed seed) otherwise."""
    if comb(n, k) <= EXACT_LIMIT:
        placements = combinations(range(n), k)
    else:
        r = np.random.default_rng(n * 1000 + k)
        placements = (r.choice(n, k, replace=False) for _ in range(draws))
    values = []
    for pos in placements:
        hits = [0] * n
        for p in pos:
            hits[p] = 1
        values.append(naive_ap(hits))
    return np.array(values)


def random_ranking_ap(n: int, k: int) -> tuple[float, float]:
    """Mean and standard deviation of AP under random ranking."""
    v = ranking_ap_null(n, k)
    return float(v.mean()), float(v.std())


def bd_rate_quad(anchor_r, anchor_q, test_r, test_q) -> float:
    """BD-rate (%) with cubic fits of log-rate on quality and adaptive quadrature."""
    anchor_r, anchor_q, test_r, test_q = (np.asarray(a, float) for a in (anchor_r, anchor_q, test_r, test_q))
    fa = np.polynomial.Polynomial.fit(anchor_q, np.log(anchor_r), 3)
    ft = np.polynomial.Polynomial.fit(test_q, np.log(test_r), 3)
    lo = max(anchor_q.min(), test_q.min())
    hi = min(anchor_q.max(), test_q.max())
    diff, _ = integrate.quad(lambda q: ft(q) - fa(q), lo, hi)
    return float((np.exp(diff / (hi - lo)) - 1.0) * 100.0)


def bd_rate_pchip(anchor_r, anchor_q, test_r, test_q, samples: int = 2001) -> float:
    """Piecewise-cubic (PCHIP) variant, trapezoid integration; agrees with the
    polynomial form when the curves are smooth."""
    anchor_r, anchor_q, test_r, test_q = (np.asarray(a, float) for a in (anchor_r, anchor_q, test_r, test_q))
    fa = interpolate.PchipInterpolator(anchor_q, np.log10(anchor_r))
    ft = interpolate.PchipInterpolator(test_q, np.log10(test_r))
    lo = max(anchor_q.min(), test_q.min())
    hi = min(anchor_q.max(), test_q.max())
    q = np.linspace(lo, hi, samples)
    d = ft(q) - fa(q)
    return float((10 ** (np.sum((d[1:] + d[:-1]) / 2 * np.diff(q)) / (hi - lo)) - 1) * 100)
