"""Data model for multi-layer KV caches, frame views, and configuration.

All matrices are stored as float64, row-major, and frozen (read-only
numpy arrays) after construction so snapshots can be shared across
workers without copies.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BoundsError,
    ConfigurationError,
    EmptyInputError,
    ShapeError,
    ValidationError,
)


def _frozen_f64(a) -> np.ndarray:
    out = np.array(a, dtype=np.float64, order="C")
    out.setflags(write=False)
    return out


def _frozen_i64(a) -> np.ndarray:
    out = np.array(a, dtype=np.int64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class LayerCache:
    """Key/value store for one decoder layer.

    keys:      (N, d_k) matrix, one row per cached token
    values:    (N, d_v) matrix, row-aligned with keys
    frame_ids: (N,) non-decreasing frame id per token
    positions: (N,) strictly increasing original stream position
    """

    keys: np.ndarray
    values: np.ndarray
    frame_ids: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "keys", _frozen_f64(self.keys))
        object.__setattr__(self, "values", _frozen_f64(self.values))
        object.__setattr__(self, "frame_ids", _frozen_i64(self.frame_ids))
        object.__setattr__(self, "positions", _frozen_i64(self.positions))
        if self.keys.ndim != 2 or self.values.ndim != 2:
            raise ShapeError("keys and values must be 2-D matrices")
        n = self.keys.shape[0]
        if self.values.shape[0] != n:
            raise ShapeError(
                f"keys have {n} rows but values have {self.values.shape[0]}"
            )
        if self.frame_ids.shape != (n,) or self.positions.shape != (n,):
            raise ShapeError("frame_ids and positions must have one entry per token")
        if not (np.isfinite(self.keys).all() and np.isfinite(self.values).all()):
            raise ValidationError("cache entries must be finite")
        if n:
            if np.any(self.frame_ids < 0):
                raise ValidationError("frame_ids must be non-negative")
            if np.any(np.diff(self.frame_ids) < 0):
                raise ValidationError("frame_ids must be non-decreasing")
            if np.any(np.diff(self.positions) <= 0):
                raise ValidationError("positions must be strictly increasing")

    @property
    def n_tokens(self) -> int:
        return self.keys.shape[0]

    @property
    def d_k(self) -> int:
        return self.keys.shape[1]

    @property
    def d_v(self) -> int:
        return self.values.shape[1]

    def take(self, idx) -> "LayerCache":
        """Row-subset copy preserving bookkeeping (idx must be sorted)."""
        idx = np.asarray(idx, dtype=np.int64)
        return LayerCache(
            self.keys[idx], self.values[idx], self.frame_ids[idx], self.positions[idx]
        )


@dataclass(frozen=True)
class CacheSnapshot:
    """Ordered per-layer caches with token alignment across layers."""

    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise EmptyInputError("snapshot needs at least one layer")
        first = self.layers[0]
        for i, layer in enumerate(self.layers):
            if not isinstance(layer, LayerCache):
                raise ValidationError("layers must be LayerCache instances")
            if (
                layer.n_tokens != first.n_tokens
                or layer.d_k != first.d_k
                or layer.d_v != first.d_v
            ):
                raise ShapeError(f"layer {i} shape differs from layer 0")
            if not (
                np.array_equal(layer.frame_ids, first.frame_ids)
                and np.array_equal(layer.positions, first.positions)
            ):
                raise ValidationError(f"layer {i} token bookkeeping differs from layer 0")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_tokens(self) -> int:
        return self.layers[0].n_tokens

    @property
    def d_k(self) -> int:
        return self.layers[0].d_k

    @property
    def d_v(self) -> int:
        return self.layers[0].d_v

    @property
    def frame_ids(self) -> np.ndarray:
        return self.layers[0].frame_ids

    @property
    def positions(self) -> np.ndarray:
        return self.layers[0].positions


class OrthMode(enum.Enum):
    EXACT_SPAN = "exact"
    MAX_COSINE = "maxcos"


class Granularity(enum.Enum):
    TOKEN = "token"
    FRAME = "frame"


@dataclass(frozen=True)
class SelectorConfig:
    """Scalar hyperparameters of the selection rule.

    Defaults follow the recommended operating point
    (alpha, eta, lam, eps0) = (0.25, 0.25, 0.25, 1e-6).
    """

    alpha: float = 0.25
    eta: float = 0.25
    lam: float = 0.25
    eps0: float = 1e-6
    eps_logdet: float = 1e-6
    orth_mode: OrthMode = OrthMode.MAX_COSINE
    granularity: Granularity = Granularity.TOKEN
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must be in [0, 1]")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError("eta must be in [0, 1]")
        if self.lam < 0.0:
            raise ConfigurationError("lam must be >= 0")
        if self.eps0 <= 0.0:
            raise ConfigurationError("eps0 must be > 0")
        if self.eps_logdet <= 0.0:
            raise ConfigurationError("eps_logdet must be > 0")
        if not isinstance(self.orth_mode, OrthMode):
            object.__setattr__(self, "orth_mode", OrthMode(self.orth_mode))
        if not isinstance(self.granularity, Granularity):
            object.__setattr__(self, "granularity", Granularity(self.granularity))


@dataclass(frozen=True)
class BudgetConfig:
    """Memory budget for the streaming manager.

    total_budget is the per-layer token cap |M|; the newest
    floor(recent_fraction * |M|) tokens are always retained.
    """

    total_budget: int
    recent_fraction: float = 0.25
    block_tokens: int | None = None

    def __post_init__(self):
        if self.total_budget < 1:
            raise ConfigurationError("total_budget must be positive")
        if not 0.0 < self.recent_fraction < 1.0:
            raise ConfigurationError("recent_fraction must be in (0, 1)")
        if self.block_tokens is None:
            object.__setattr__(
                self, "block_tokens", max(1, int(0.25 * self.total_budget))
            )
        if self.block_tokens < 1:
            raise ConfigurationError("block_tokens must be positive")
        if self.recent_size < 1:
            raise ConfigurationError("recent tail would be empty at this budget")
        if self.total_budget <= self.recent_size:
            raise ConfigurationError("total_budget must exceed the recent tail size")

    @property
    def recent_size(self) -> int:
        return int(self.recent_fraction * self.total_budget)


@dataclass(frozen=True)
class FrameView:
    """Per-frame centroid summary of a LayerCache.

    frame_token_ranges is an (F, 2) array of [start, stop) token index
    intervals partitioning [0, N).
    """

    centroid_keys: np.ndarray
    centroid_values: np.ndarray
    frame_token_ranges: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "centroid_keys", _frozen_f64(self.centroid_keys))
        object.__setattr__(self, "centroid_values", _frozen_f64(self.centroid_values))
        object.__setattr__(
            self, "frame_token_ranges", _frozen_i64(self.frame_token_ranges)
        )

    @property
    def n_frames(self) -> int:
        return self.centroid_keys.shape[0]


@dataclass(frozen=True)
class StepRecord:
    """Audit trail for one greedy insertion."""

    index: int
    pool_size: int
    raw_dalpha: float
    raw_orth: float
    norm_dalpha: float
    norm_orth: float
    score: float


@dataclass(frozen=True)
class SelectionResult:
    """Ordered greedy trace plus per-step score decomposition."""

    selected: tuple
    step_records: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "selected", tuple(int(i) for i in self.selected))
        object.__setattr__(self, "step_records", tuple(self.step_records))
        if len(set(self.selected)) != len(self.selected):
            raise ValidationError("selected indices must be unique")

    @property
    def sorted_indices(self) -> np.ndarray:
        return np.array(sorted(self.selected), dtype=np.int64)


def joint_feature(cache: LayerCache, i: int) -> np.ndarray:
    """Concatenated [key_i; value_i] row of token i."""
    if not 0 <= i < cache.n_tokens:
        raise BoundsError(f"token index {i} out of range [0, {cache.n_tokens})")
    return np.concatenate([cache.keys[i], cache.values[i]])


def frame_centroids(cache: LayerCache) -> FrameView:
    """Mean key/value per frame, with the covering token ranges."""
    if cache.n_tokens == 0:
        raise EmptyInputError("cannot build frame centroids from an empty cache")
    ids = cache.frame_ids
    # frame boundaries: first token index of each frame, plus N
    starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
    stops = np.r_[starts[1:], cache.n_tokens]
    ck = np.empty((len(starts), cache.d_k))
    cv = np.empty((len(starts), cache.d_v))
    for f, (s, e) in enumerate(zip(starts, stops)):
        ck[f] = cache.keys[s:e].mean(axis=0)
        cv[f] = cache.values[s:e].mean(axis=0)
    ranges = np.stack([starts, stops], axis=1)
    return FrameView(ck, cv, ranges)


def expand_frames(view: FrameView, selected_frames) -> np.ndarray:
    """Token indices covered by the selected frames, ascending."""
    sel = np.asarray(list(selected_frames), dtype=np.int64)
    if sel.size == 0:
        return np.empty(0, dtype=np.int64)
    if len(np.unique(sel)) != len(sel):
        raise ValidationError("duplicate frame index in selection")
    if sel.min() < 0 or sel.max() >= view.n_frames:
        raise BoundsError("frame index out of range")
    chunks = [np.arange(*view.frame_token_ranges[f]) for f in sorted(sel.tolist())]
    return np.concatenate(chunks).astype(np.int64)
