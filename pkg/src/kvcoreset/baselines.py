"""Reference selectors for like-for-like comparisons under a shared budget.

Every baseline returns exactly b unique in-range indices. Selectors with
no natural insertion order return ascending indices; the shortlist
selector keeps its greedy insertion order.
"""
from __future__ import annotations

import enum

import numpy as np

from .errors import BudgetError
from .kvcore import SelectorConfig
from .selector import CandidatePool, d2_select


class BaselineKind(enum.Enum):
    UNIFORM_STRIDE = "uniform"
    RANDOM = "random"
    VALUE_NORM_TOPK = "vnorm"
    KMEANS_REPRESENTATIVE = "kmeans"
    GREEDY_SHORTLIST = "shortlist"


def _check(n: int, b: int) -> None:
    if not 1 <= b <= n:
        raise BudgetError(f"budget {b} outside [1, {n}]")


def uniform_select(n: int, b: int) -> np.ndarray:
    """Evenly strided indices floor(j*N/b), padded from the tail on collision."""
    _check(n, b)
    picked = sorted({j * n // b for j in range(b)})
    if len(picked) < b:
        taken = set(picked)
        for i in range(n - 1, -1, -1):
            if i not in taken:
                taken.add(i)
                if len(taken) == b:
                    break
        picked = sorted(taken)
    return np.array(picked, dtype=np.int64)


def value_norm_topk(pool: CandidatePool, b: int) -> np.ndarray:
    """Indices of the b largest squared value norms, ascending order."""
    _check(pool.size, b)
    norms = (pool.values**2).sum(axis=1)
    # stable sort on -norm keeps the lowest index first among ties
    order = np.argsort(-norms, kind="stable")[:b]
    return np.sort(order).astype(np.int64)


def random_select(n: int, b: int, seed: int) -> np.ndarray:
    """b distinct indices from a seeded generator, ascending order."""
    _check(n, b)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=b, replace=False)).astype(np.int64)


def kmeans_representative(
    pool: CandidatePool,
    b: int,
    config: SelectorConfig | None = None,
    max_iter: int = 25,
    tol: float = 1e-4,
) -> np.ndarray:
    """Lloyd's algorithm on joint features with k = b, seeded by the
    farthest-first trace for determinism; returns the pool index nearest
    to each final centroid, deduplicated and topped up by nearest-unused."""
    _check(pool.size, b)
    config = config or SelectorConfig()
    feats = np.concatenate([pool.keys, pool.values], axis=1)
    seeds = d2_select(pool, b, config.alpha).selected
    centers = feats[list(seeds)].copy()
    prev_inertia = np.inf
    for _ in range(max_iter):
        d2 = ((feats[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        inertia = float(d2[np.arange(len(feats)), assign].sum())
        for c in range(b):
            members = feats[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
        if prev_inertia < np.inf and prev_inertia > 0:
            if (prev_inertia - inertia) / prev_inertia < tol:
                break
        elif inertia == 0.0:
            break
        prev_inertia = inertia
    # nearest pool element per centroid
    d2 = ((feats[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    reps: list[int] = []
    used: set[int] = set()
    for c in range(b):
        order = np.argsort(d2[:, c], kind="stable")
        pick = int(order[0])
        if pick in used:
            continue
        used.add(pick)
        reps.append(pick)
    # top up collisions with the nearest unused element to any centroid
    if len(reps) < b:
        best = d2.min(axis=1)
        for i in np.argsort(best, kind="stable"):
            i = int(i)
            if i not in used:
                used.add(i)
                reps.append(i)
                if len(reps) == b:
                    break
    return np.sort(np.array(reps, dtype=np.int64))


def greedy_shortlist(
    pool: CandidatePool, b: int, m: int = 4, alpha: float = 0.25
) -> list[int]:
    """Farthest-first selection restricted to the min(m*b, N) candidates
    with the largest joint-feature norm. Returns the greedy trace order."""
    _check(pool.size, b)
    if m < 1:
        raise BudgetError("shortlist multiplier must be >= 1")
    norms = pool.joint_sq_norms()
    k = min(m * b, pool.size)
    shortlist = np.sort(np.argsort(-norms, kind="stable")[:k]).astype(np.int64)
    sub = CandidatePool(pool.keys[shortlist], pool.values[shortlist])
    trace = d2_select(sub, b, alpha).selected
    return [int(shortlist[i]) for i in trace]
