"""Measurement and verification: full vs. compressed attention error with
its quantization-error bounds, coverage CDFs, and the log-det audit.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError, ShapeError, ValidationError
from .kvcore import LayerCache
from .selector import (
    CandidatePool,
    SpanState,
    greedy_residual_select,
    logdet_coverage,
    logdet_marginal_gain,
)

log = logging.getLogger(__name__)

COVERAGE_METRICS = ("JointKV", "KOnly", "VOnly")


@dataclass(frozen=True)
class QueryRecord:
    error: float
    bound_v: float
    bound_dalpha: float


@dataclass(frozen=True)
class LogdetAuditRecord:
    gain_direct: float
    gain_closed_form: float
    abs_diff: float


@dataclass
class DiagnosticsReport:
    query_records: list = field(default_factory=list)
    quantization_error: float = 0.0
    cdf_samples: dict = field(default_factory=dict)  # metric -> sorted distances
    logdet_audit: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def softmax_weights(q: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Scaled dot-product softmax over cached keys (max-shifted)."""
    d_k = keys.shape[1]
    logits = keys @ q / math.sqrt(d_k)
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def full_attention(q, cache: LayerCache) -> np.ndarray:
    """Attention output over the full cache for one query."""
    q = np.asarray(q, dtype=np.float64)
    if cache.n_tokens == 0:
        raise EmptyInputError("attention over an empty cache")
    if q.shape != (cache.d_k,):
        raise ShapeError(f"query must have length {cache.d_k}")
    a = softmax_weights(q, cache.keys)
    return a @ cache.values


def cluster_assignment(cache: LayerCache, selected) -> np.ndarray:
    """Nearest selected representative per token in joint [k; v] space
    (unnormalized features; ties go to the earliest selected index)."""
    sel = np.asarray(list(selected), dtype=np.int64)
    if sel.size == 0:
        raise EmptyInputError("selected set is empty")
    feats = np.concatenate([cache.keys, cache.values], axis=1)
    reps = feats[sel]
    d2 = ((feats[:, None, :] - reps[None, :, :]) ** 2).sum(axis=2)
    return sel[d2.argmin(axis=1)]


def compressed_attention_weighted(q, cache: LayerCache, selected) -> np.ndarray:
    """Cluster-weighted attention over representatives: each token routes
    its softmax weight to its nearest representative."""
    q = np.asarray(q, dtype=np.float64)
    sel = np.asarray(list(selected), dtype=np.int64)
    if sel.size == 0:
        raise EmptyInputError("selected set is empty")
    if q.shape != (cache.d_k,):
        raise ShapeError(f"query must have length {cache.d_k}")
    a = softmax_weights(q, cache.keys)
    owner = cluster_assignment(cache, sel)
    out = np.zeros(cache.d_v)
    for j in sel:
        out += a[owner == j].sum() * cache.values[j]
    return out


def attention_error_and_bounds(q, cache: LayerCache, selected, alpha: float):
    """(error, bound_v, bound_dalpha) for one query.

    bound_v     = sqrt(sum_i a_i min_j ||v_i - v_j||^2)
    bound_dalpha = sqrt(sum_i a_i d_alpha(i, S) / (1 - alpha))
    """
    if not 0.0 <= alpha < 1.0:
        raise ValidationError("alpha must be in [0, 1) for the bicriteria bound")
    q = np.asarray(q, dtype=np.float64)
    sel = np.asarray(list(selected), dtype=np.int64)
    full = full_attention(q, cache)
    comp = compressed_attention_weighted(q, cache, sel)
    error = float(np.linalg.norm(full - comp))

    a = softmax_weights(q, cache.keys)
    dv = ((cache.values[:, None, :] - cache.values[sel][None, :, :]) ** 2).sum(axis=2)
    min_dv = dv.min(axis=1)
    dk = ((cache.keys[:, None, :] - cache.keys[sel][None, :, :]) ** 2).sum(axis=2)
    d_alpha = (alpha * dk + (1.0 - alpha) * dv).min(axis=1)
    bound_v = float(np.sqrt((a * min_dv).sum()))
    bound_dalpha = float(np.sqrt((a * d_alpha).sum() / (1.0 - alpha)))
    return error, bound_v, bound_dalpha


def quantization_error(cache: LayerCache, selected, alpha: float) -> float:
    """Sum over all tokens of the bicriteria distance to the selection."""
    sel = np.asarray(list(selected), dtype=np.int64)
    if sel.size == 0:
        raise EmptyInputError("selected set is empty")
    pool = CandidatePool.from_layer(cache)
    return float(pool.recompute_nearest(sel, alpha).sum())


def _unit_rows(rows: np.ndarray) -> tuple:
    """Row-normalized copy plus a mask of zero-norm rows."""
    norms = np.linalg.norm(rows, axis=1)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    return rows / safe[:, None], zero


def coverage_cdf(cache: LayerCache, retained, metric: str = "JointKV") -> np.ndarray:
    """Sorted cosine distances of every token to its nearest retained token.

    JointKV normalizes the key part and value part independently before
    concatenation; zero-norm tokens are assigned distance 1 to everything.
    """
    if metric not in COVERAGE_METRICS:
        raise ValidationError(f"unknown metric {metric!r}")
    sel = np.asarray(list(retained), dtype=np.int64)
    if sel.size == 0:
        raise EmptyInputError("retained set is empty")
    if metric == "KOnly":
        feats, zero = _unit_rows(cache.keys)
    elif metric == "VOnly":
        feats, zero = _unit_rows(cache.values)
    else:
        uk, zk = _unit_rows(cache.keys)
        uv, zv = _unit_rows(cache.values)
        feats = np.concatenate([uk, uv], axis=1)
        zero = zk & zv
        # renormalize the concatenation so cosine stays in [-1, 1]
        feats, _ = _unit_rows(feats)
    if zero.any():
        log.warning("%d zero-norm tokens treated as distance 1", int(zero.sum()))
    sims = feats @ feats[sel].T
    ret_zero = zero[sel]
    if ret_zero.any():
        sims[:, ret_zero] = 0.0
    sims[zero, :] = 0.0
    dist = 1.0 - sims.max(axis=1)
    return np.sort(np.clip(dist, 0.0, 2.0))


def cdf_max_gap(samples_a: np.ndarray, samples_b: np.ndarray) -> tuple:
    """Maximum of CDF_a(d) - CDF_b(d) over all sample points, plus the
    distance d* where it occurs (positive gap means a covers better)."""
    grid = np.unique(np.concatenate([samples_a, samples_b]))
    cdf_a = np.searchsorted(samples_a, grid, side="right") / len(samples_a)
    cdf_b = np.searchsorted(samples_b, grid, side="right") / len(samples_b)
    diff = cdf_a - cdf_b
    i = int(np.argmax(diff))
    return float(diff[i]), float(grid[i])


def quantized_cdf(samples: np.ndarray, bins: int = 512) -> np.ndarray:
    """(bins, 2) array of (distance, CDF value) for plotting."""
    samples = np.asarray(samples, dtype=np.float64)
    hi = samples.max() if samples.size else 1.0
    grid = np.linspace(0.0, max(hi, 1e-12), bins)
    cdf = np.searchsorted(samples, grid, side="right") / max(1, len(samples))
    return np.stack([grid, cdf], axis=1)


def logdet_audit(
    trials: int,
    d: int = 8,
    max_rank: int = 6,
    eps: float = 1e-4,
    rng_seed: int = 0,
    exhaustive_pool: int = 8,
    exhaustive_budget: int = 3,
) -> DiagnosticsReport:
    """Randomized verification of the log-det machinery.

    Per trial: the direct marginal gain is checked against the closed
    form log(eps + k^T (I - P) k); nested subsets check submodularity
    and monotonicity; small pools compare greedy against the exhaustive
    optimum for the (1 - 1/e) guarantee.
    """
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    rng = np.random.default_rng(rng_seed)
    report = DiagnosticsReport(
        metadata={
            "trials": trials, "d": d, "max_rank": max_rank, "eps": eps,
            "rng_seed": rng_seed,
        }
    )
    submod_violations = 0
    monotone_violations = 0
    for _ in range(trials):
        t = int(rng.integers(0, max_rank + 1))
        sel = rng.standard_normal((t, d))
        k = rng.standard_normal(d)
        direct = logdet_marginal_gain(sel, k, eps)
        span = SpanState(d, eps)
        for row in sel:
            span.insert(row)
        closed = math.log(eps + float(span.residual_sq_norms(k[None, :])[0]))
        report.logdet_audit.append(
            LogdetAuditRecord(direct, closed, abs(direct - closed))
        )
        # nested-set checks: A = first half of B
        b_set = sel
        a_set = sel[: t // 2]
        gain_a = logdet_marginal_gain(a_set, k, eps)
        gain_b = logdet_marginal_gain(b_set, k, eps)
        if gain_a < gain_b - 1e-9:
            submod_violations += 1
        # monotonicity needs key norms >= sqrt(1 - eps); rescale rows up
        scale = np.maximum(1.0, 1.0 / np.maximum(np.linalg.norm(sel, axis=1), 1e-12))
        big = sel * scale[:, None] if t else sel
        if t and logdet_coverage(big[: t // 2], eps) > logdet_coverage(big, eps) + 1e-9:
            monotone_violations += 1
    greedy_ratio_ok, worst_ratio = _exhaustive_greedy_check(
        rng, d, exhaustive_pool, exhaustive_budget, eps
    )
    report.metadata.update(
        {
            "max_identity_diff": max(r.abs_diff for r in report.logdet_audit),
            "submodularity_violations": submod_violations,
            "monotonicity_violations": monotone_violations,
            "exhaustive_guarantee_ok": greedy_ratio_ok,
            "worst_greedy_ratio": worst_ratio,
        }
    )
    return report


def _exhaustive_greedy_check(rng, d, pool_size, budget, eps) -> tuple:
    """Greedy log-det vs. the exhaustive optimum on small pools with key
    norms >= 1 (so the objective stays non-negative and monotone)."""
    from itertools import combinations

    worst = np.inf
    for _ in range(10):
        keys = rng.standard_normal((pool_size, d))
        norms = np.linalg.norm(keys, axis=1, keepdims=True)
        keys = keys / norms * np.maximum(norms, 1.0)  # enforce norm >= 1
        for b in range(1, budget + 1):
            greedy = greedy_residual_select(keys, b, eps)
            f_greedy = logdet_coverage(keys[greedy], eps)
            f_best = max(
                logdet_coverage(keys[list(s)], eps)
                for s in combinations(range(pool_size), b)
            )
            ratio = f_greedy / f_best if f_best > 0 else 1.0
            worst = min(worst, ratio)
    return bool(worst >= 1.0 - 1.0 / math.e), float(worst)
