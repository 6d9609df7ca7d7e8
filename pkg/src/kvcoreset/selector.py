"""Selection core: bicriteria farthest-first greedy, orthogonal novelty
scores (exact span residuals and the max-cosine surrogate), the log-det
coverage oracle, and the combined normalized selection rule.

All argmax ties resolve to the lowest candidate index so traces are
reproducible bit-for-bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import (
    BudgetError,
    EmptyInputError,
    ShapeError,
    ValidationError,
)
from .kvcore import (
    LayerCache,
    FrameView,
    OrthMode,
    SelectionResult,
    SelectorConfig,
    StepRecord,
)


@dataclass
class CandidatePool:
    """Candidate features split into key and value parts.

    nearest_dist caches the running bicriteria distance of every
    candidate to the selected set; it is maintained incrementally during
    a greedy run and can be recomputed from scratch for audits.
    """

    keys: np.ndarray
    values: np.ndarray
    nearest_dist: np.ndarray | None = None

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.keys.ndim != 2 or self.values.ndim != 2:
            raise ShapeError("pool keys/values must be 2-D")
        if self.keys.shape[0] != self.values.shape[0]:
            raise ShapeError("pool keys/values row counts differ")

    @classmethod
    def from_layer(cls, cache: LayerCache) -> "CandidatePool":
        return cls(cache.keys, cache.values)

    @classmethod
    def from_frame_view(cls, view: FrameView) -> "CandidatePool":
        return cls(view.centroid_keys, view.centroid_values)

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    def joint_sq_norms(self) -> np.ndarray:
        return (self.keys**2).sum(axis=1) + (self.values**2).sum(axis=1)

    def recompute_nearest(self, selected, alpha: float) -> np.ndarray:
        """From-scratch bicriteria distance of every candidate to `selected`."""
        sel = list(selected)
        if not sel:
            raise EmptyInputError("selected set is empty")
        dk = _sq_cdist(self.keys, self.keys[sel])
        dv = _sq_cdist(self.values, self.values[sel])
        return (alpha * dk + (1.0 - alpha) * dv).min(axis=1)


def _sq_cdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared euclidean distances, (len(a), len(b))."""
    diff = a[:, None, :] - b[None, :, :]
    return (diff**2).sum(axis=2)


class SpanState:
    """Growing span of selected vectors with a cached Cholesky factor of
    the regularized Gram matrix (U^T U + eps I), updated per insertion."""

    def __init__(self, dim: int, eps: float):
        if eps <= 0:
            raise ValidationError("eps must be positive")
        self.dim = dim
        self.eps = eps
        self.columns: list[np.ndarray] = []
        self._chol: np.ndarray | None = None  # lower-triangular factor

    @property
    def rank(self) -> int:
        return len(self.columns)

    @property
    def basis(self) -> np.ndarray:
        """U as a (dim, t) matrix."""
        if not self.columns:
            return np.zeros((self.dim, 0))
        return np.stack(self.columns, axis=1)

    def insert(self, x) -> None:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ShapeError(f"expected vector of length {self.dim}, got {x.shape}")
        if self._chol is None:
            self.columns.append(x.copy())
            self._chol = np.array([[np.sqrt(x @ x + self.eps)]])
            return
        u = self.basis
        c = u.T @ x
        w = solve_triangular(self._chol, c, lower=True)
        diag_sq = x @ x + self.eps - w @ w
        # the eps regularizer keeps the Schur complement strictly positive
        diag = np.sqrt(max(diag_sq, 1e-300))
        t = self.rank
        new = np.zeros((t + 1, t + 1))
        new[:t, :t] = self._chol
        new[t, :t] = w
        new[t, t] = diag
        self.columns.append(x.copy())
        self._chol = new

    def refactorize(self) -> None:
        """From-scratch factorization path for audits."""
        if not self.columns:
            self._chol = None
            return
        u = self.basis
        g = u.T @ u + self.eps * np.eye(self.rank)
        self._chol = np.linalg.cholesky(g)

    def project(self, x: np.ndarray) -> np.ndarray:
        """Apply the regularized projector P = U (U^T U + eps I)^-1 U^T.

        Accepts a vector (dim,) or a stack of rows (n, dim).
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        rows = x[None, :] if single else x
        if rows.shape[1] != self.dim:
            raise ShapeError(f"expected width {self.dim}, got {rows.shape[1]}")
        if self.rank == 0:
            out = np.zeros_like(rows)
        else:
            u = self.basis
            b = rows @ u  # (n, t)
            coef = cho_solve((self._chol, True), b.T).T
            out = coef @ u.T
        return out[0] if single else out

    def residual(self, x: np.ndarray) -> np.ndarray:
        """(I - P) x for the regularized projector."""
        return np.asarray(x, dtype=np.float64) - self.project(x)

    def residual_sq_norms(self, rows: np.ndarray) -> np.ndarray:
        """Regularized residual quadratic form x^T (I - P) x per row."""
        rows = np.asarray(rows, dtype=np.float64)
        sq = (rows**2).sum(axis=1)
        if self.rank == 0:
            return sq
        u = self.basis
        b = rows @ u
        coef = cho_solve((self._chol, True), b.T).T
        return sq - (b * coef).sum(axis=1)


def bicriteria_distance(k_i, v_i, selected_keys, selected_values, alpha: float) -> float:
    """min over selected j of alpha*||k_i-k_j||^2 + (1-alpha)*||v_i-v_j||^2."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError("alpha must be in [0, 1]")
    sk = np.atleast_2d(np.asarray(selected_keys, dtype=np.float64))
    sv = np.atleast_2d(np.asarray(selected_values, dtype=np.float64))
    if sk.shape[0] == 0:
        raise EmptyInputError("selected set is empty; seed first")
    dk = ((sk - np.asarray(k_i, dtype=np.float64)) ** 2).sum(axis=1)
    dv = ((sv - np.asarray(v_i, dtype=np.float64)) ** 2).sum(axis=1)
    return float((alpha * dk + (1.0 - alpha) * dv).min())


def seed_token(pool: CandidatePool) -> int:
    """Index with the largest joint-feature squared norm (lowest index wins ties)."""
    if pool.size == 0:
        raise EmptyInputError("empty candidate pool")
    return int(np.argmax(pool.joint_sq_norms()))


def _check_budget(pool: CandidatePool, b: int) -> None:
    if not 1 <= b <= pool.size:
        raise BudgetError(f"budget {b} outside [1, {pool.size}]")


def d2_select(pool: CandidatePool, b: int, alpha: float) -> SelectionResult:
    """Greedy farthest-first trace under the bicriteria distance.

    Per-step cost is O(N d) thanks to the incremental nearest-distance
    update; the result is index-for-index identical to a full recompute.
    """
    _check_budget(pool, b)
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError("alpha must be in [0, 1]")
    seed = seed_token(pool)
    selected = [seed]
    records = [
        StepRecord(seed, pool.size, float("nan"), float("nan"),
                   float("nan"), float("nan"), float(pool.joint_sq_norms()[seed]))
    ]
    nearest = _dalpha_to_point(pool, seed, alpha)
    nearest[seed] = -np.inf  # mask selected
    for _ in range(b - 1):
        nxt = int(np.argmax(nearest))
        d_raw = float(nearest[nxt])
        selected.append(nxt)
        records.append(
            StepRecord(nxt, int(np.isfinite(nearest).sum()), d_raw, float("nan"),
                       float("nan"), float("nan"), d_raw)
        )
        upd = _dalpha_to_point(pool, nxt, alpha)
        nearest = np.minimum(nearest, upd)
        nearest[nxt] = -np.inf
    pool.nearest_dist = np.where(np.isfinite(nearest), nearest, 0.0)
    return SelectionResult(selected, records)


def _dalpha_to_point(pool: CandidatePool, j: int, alpha: float) -> np.ndarray:
    dk = ((pool.keys - pool.keys[j]) ** 2).sum(axis=1)
    dv = ((pool.values - pool.values[j]) ** 2).sum(axis=1)
    return alpha * dk + (1.0 - alpha) * dv


def exact_residual(span: SpanState, x) -> np.ndarray:
    """(I - P) x; with an empty span the residual is x itself."""
    return span.residual(x)


def orth_score_exact(span_k: SpanState, span_v: SpanState, k_i, v_i, eta: float) -> float:
    """eta*||r_k||^2 + (1-eta)*||r_v||^2 with exact span residuals."""
    if not 0.0 <= eta <= 1.0:
        raise ValidationError("eta must be in [0, 1]")
    rk = span_k.residual(k_i)
    rv = span_v.residual(v_i)
    return float(eta * (rk @ rk) + (1.0 - eta) * (rv @ rv))


def _max_cos_sq(x: np.ndarray, rows: np.ndarray) -> float:
    """max over rows of cos^2(x, row); zero-norm vectors contribute 0."""
    xn = x @ x
    if xn == 0.0:
        return 1.0  # caller multiplies by ||x||^2 = 0; value is irrelevant
    rn = (rows**2).sum(axis=1)
    dots = rows @ x
    ok = rn > 0.0
    if not ok.any():
        return 0.0
    return float((dots[ok] ** 2 / (rn[ok] * xn)).max())


def orth_score_surrogate(selected_keys, selected_values, k_i, v_i, eta: float) -> float:
    """Max-cosine redundancy surrogate for the orthogonal novelty score.

    eta*||k||^2 (1 - max_j cos^2(k, k_j)) + (1-eta)*||v||^2 (1 - max_j cos^2(v, v_j)).
    Equals the exact residual score when a single element is selected.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValidationError("eta must be in [0, 1]")
    sk = np.atleast_2d(np.asarray(selected_keys, dtype=np.float64))
    sv = np.atleast_2d(np.asarray(selected_values, dtype=np.float64))
    if sk.shape[0] == 0:
        raise EmptyInputError("selected set is empty")
    k = np.asarray(k_i, dtype=np.float64)
    v = np.asarray(v_i, dtype=np.float64)
    key_part = (k @ k) * (1.0 - _max_cos_sq(k, sk))
    val_part = (v @ v) * (1.0 - _max_cos_sq(v, sv))
    return float(eta * key_part + (1.0 - eta) * val_part)


def min_max_normalize(scores, eps0: float) -> np.ndarray:
    """(s - min) / (max - min + eps0); maps every finite pool into [0, 1)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise EmptyInputError("cannot normalize an empty score list")
    if not np.isfinite(s).all():
        raise ValidationError("scores must be finite")
    if eps0 <= 0:
        raise ValidationError("eps0 must be positive")
    lo = s.min()
    hi = s.max()
    return (s - lo) / (hi - lo + eps0)


def cords_select(pool: CandidatePool, b: int, config: SelectorConfig) -> SelectionResult:
    """Combined greedy rule: seed by joint norm, then maximize the sum of
    min-max normalized bicriteria distance and orthogonal novelty.

    With lam = 0 the trace is identical to d2_select. Normalization
    statistics are recomputed over the remaining candidates each step.
    """
    _check_budget(pool, b)
    if config.lam == 0.0:
        return d2_select(pool, b, config.alpha)
    alpha, eta, lam = config.alpha, config.eta, config.lam
    exact = config.orth_mode is OrthMode.EXACT_SPAN

    seed = seed_token(pool)
    selected = [seed]
    records = [
        StepRecord(seed, pool.size, float("nan"), float("nan"),
                   float("nan"), float("nan"), float(pool.joint_sq_norms()[seed]))
    ]
    n = pool.size
    active = np.ones(n, dtype=bool)
    active[seed] = False
    nearest = _dalpha_to_point(pool, seed, alpha)

    key_sq = (pool.keys**2).sum(axis=1)
    val_sq = (pool.values**2).sum(axis=1)
    if exact:
        span_k = SpanState(pool.keys.shape[1], config.eps_logdet)
        span_v = SpanState(pool.values.shape[1], config.eps_logdet)
        span_k.insert(pool.keys[seed])
        span_v.insert(pool.values[seed])
    else:
        # running max cos^2 against the selected keys/values
        maxcos_k = _cos_sq_to_point(pool.keys, seed, key_sq)
        maxcos_v = _cos_sq_to_point(pool.values, seed, val_sq)

    for _ in range(b - 1):
        idx = np.flatnonzero(active)
        d_raw = nearest[idx]
        if exact:
            # true residual norms ||(I - P) x||^2, matching orth_score_exact
            rk = (span_k.residual(pool.keys[idx]) ** 2).sum(axis=1)
            rv = (span_v.residual(pool.values[idx]) ** 2).sum(axis=1)
            orth_raw = eta * rk + (1.0 - eta) * rv
        else:
            orth_raw = eta * key_sq[idx] * (1.0 - maxcos_k[idx]) + (
                1.0 - eta
            ) * val_sq[idx] * (1.0 - maxcos_v[idx])
        d_norm = min_max_normalize(d_raw, config.eps0)
        o_norm = min_max_normalize(orth_raw, config.eps0)
        score = d_norm + lam * o_norm
        win = int(np.argmax(score))  # first max -> lowest index in idx order
        nxt = int(idx[win])
        selected.append(nxt)
        records.append(
            StepRecord(nxt, len(idx), float(d_raw[win]), float(orth_raw[win]),
                       float(d_norm[win]), float(o_norm[win]), float(score[win]))
        )
        active[nxt] = False
        nearest = np.minimum(nearest, _dalpha_to_point(pool, nxt, alpha))
        if exact:
            span_k.insert(pool.keys[nxt])
            span_v.insert(pool.values[nxt])
        else:
            maxcos_k = np.maximum(maxcos_k, _cos_sq_to_point(pool.keys, nxt, key_sq))
            maxcos_v = np.maximum(maxcos_v, _cos_sq_to_point(pool.values, nxt, val_sq))
    pool.nearest_dist = np.where(active, nearest, 0.0)
    return SelectionResult(selected, records)


def _cos_sq_to_point(rows: np.ndarray, j: int, sq_norms: np.ndarray) -> np.ndarray:
    """cos^2 of every row against rows[j]; zero norms contribute 0."""
    nj = sq_norms[j]
    if nj == 0.0:
        return np.zeros(rows.shape[0])
    dots = rows @ rows[j]
    out = np.zeros(rows.shape[0])
    ok = sq_norms > 0.0
    out[ok] = dots[ok] ** 2 / (sq_norms[ok] * nj)
    return out


def logdet_coverage(selected_keys, eps: float) -> float:
    """log det of the regularized Gram matrix of the selected keys
    (rows of `selected_keys`); the empty set maps to 0."""
    if eps <= 0:
        raise ValidationError("eps must be positive")
    rows = np.atleast_2d(np.asarray(selected_keys, dtype=np.float64))
    if rows.size and not np.isfinite(rows).all():
        raise ValidationError("keys must be finite")
    t = rows.shape[0]
    if t == 0 or rows.shape[1] == 0:
        return 0.0
    g = rows @ rows.T + eps * np.eye(t)
    sign, val = np.linalg.slogdet(g)
    if sign <= 0:
        raise ValidationError("regularized Gram matrix is not positive definite")
    return float(val)


def logdet_marginal_gain(selected_keys, candidate, eps: float) -> float:
    """Direct log-det difference from adding `candidate` to the selected
    keys. Equals log(eps + k^T (I - P^eps) k) by the Schur complement."""
    rows = np.atleast_2d(np.asarray(selected_keys, dtype=np.float64))
    k = np.asarray(candidate, dtype=np.float64)
    if rows.size and rows.shape[1] != k.shape[0]:
        raise ShapeError("candidate dimension differs from selected keys")
    base = logdet_coverage(rows, eps) if rows.shape[0] else 0.0
    grown = np.vstack([rows, k[None, :]]) if rows.shape[0] else k[None, :]
    return logdet_coverage(grown, eps) - base


def greedy_residual_select(pool_keys, b: int, eps: float) -> list[int]:
    """Pure orthogonal greedy: repeatedly take the candidate with the
    largest regularized residual norm (equivalently the largest log-det
    marginal gain). Ties break to the lowest index."""
    keys = np.atleast_2d(np.asarray(pool_keys, dtype=np.float64))
    n = keys.shape[0]
    if not 1 <= b <= n:
        raise BudgetError(f"budget {b} outside [1, {n}]")
    span = SpanState(keys.shape[1], eps)
    active = np.ones(n, dtype=bool)
    out: list[int] = []
    for _ in range(b):
        idx = np.flatnonzero(active)
        res = span.residual_sq_norms(keys[idx])
        nxt = int(idx[int(np.argmax(res))])
        out.append(nxt)
        active[nxt] = False
        span.insert(keys[nxt])
    return out
