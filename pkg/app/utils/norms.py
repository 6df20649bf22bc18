"""
Path norms on sampled curves

All functions take sample times and (real or complex) values and work on the
sampled points only. Pairwise sups are computed row by row so memory stays
linear in the number of samples.
"""
from typing import Tuple

import numpy as np


def holder_seminorm(times: np.ndarray, values: np.ndarray, alpha: float) -> float:
    """sup_{s<t} |x_t − x_s| / (t − s)^alpha over all sample pairs."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values)
    best = 0.0
    for i in range(len(t) - 1):
        ratios = np.abs(v[i + 1:] - v[i]) / (t[i + 1:] - t[i]) ** alpha
        best = max(best, float(np.max(ratios)))
    return best


def sqrt_reparam_lip(times: np.ndarray, values: np.ndarray) -> float:
    """Lipschitz constant of u ↦ x(u²), i.e. sup |x_t − x_s| / |√t − √s|."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values)
    r = np.sqrt(t)
    best = 0.0
    for i in range(len(t) - 1):
        ratios = np.abs(v[i + 1:] - v[i]) / (r[i + 1:] - r[i])
        best = max(best, float(np.max(ratios)))
    return best


def grid_pvariation(values: np.ndarray, p: float) -> float:
    """
    p-variation over all sub-partitions of the sample points.

    Dynamic programme V_j = max_{i<j} V_i + |x_j − x_i|^p, exact on the samples
    and therefore a lower bound for the p-variation of the underlying curve.
    """
    v = np.asarray(values)
    m = len(v)
    if m < 2:
        return 0.0
    best = np.zeros(m)
    for j in range(1, m):
        best[j] = np.max(best[:j] + np.abs(v[j] - v[:j]) ** p)
    return float(np.max(best) ** (1.0 / p))


def min_separated_gap(times: np.ndarray, values: np.ndarray, separation: float) -> Tuple[float, float, float]:
    """min |x_t − x_s| over sample pairs with t − s ≥ separation, with the minimizing (s, t)."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values)
    best, where = np.inf, (np.nan, np.nan)
    for i in range(len(t) - 1):
        j0 = int(np.searchsorted(t, t[i] + separation * (1 - 1e-12), side="left"))
        if j0 >= len(t):
            break
        gaps = np.abs(v[j0:] - v[i])
        j = int(np.argmin(gaps))
        if gaps[j] < best:
            best, where = float(gaps[j]), (float(t[i]), float(t[j0 + j]))
    return best, where[0], where[1]


def running_holder_pieces(times: np.ndarray, values: np.ndarray, bound: float, alpha: float = 0.5):
    """
    Greedy split into consecutive pieces whose alpha-Hölder seminorm stays below bound.

    Returns a list of (start, end) sample indices; pieces share their endpoints.
    A single step whose own ratio reaches the bound forms a piece on its own.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values)
    pieces = []
    start, current = 0, 0.0
    for j in range(1, len(t)):
        ratio = float(np.max(np.abs(v[j] - v[start:j]) / (t[j] - t[start:j]) ** alpha))
        if max(current, ratio) >= bound and j - 1 > start:
            pieces.append((start, j - 1))
            start = j - 1
            current = float(abs(v[j] - v[start]) / (t[j] - t[start]) ** alpha)
        else:
            current = max(current, ratio)
    pieces.append((start, len(t) - 1))
    return pieces
