"""Online cache manager: block ingestion, budget enforcement with an
always-retained recent tail, and anchor/follower index reuse across layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BoundsError,
    ConfigurationError,
    EmptyInputError,
    ShapeError,
    ValidationError,
)
from .kvcore import (
    BudgetConfig,
    CacheSnapshot,
    Granularity,
    LayerCache,
    SelectorConfig,
    expand_frames,
    frame_centroids,
)
from .selector import CandidatePool, cords_select


@dataclass(frozen=True)
class LayerSchedule:
    """Which layers run selection (anchors) and which reuse indices.

    follower_map is total over [0, L): every anchor maps to itself and
    every other layer maps to the anchor whose indices it reuses. With
    compress_followers=False, layers outside the active set are left
    uncompressed (memory for those layers is then unbounded); this mode
    exists for experiments only.
    """

    n_layers: int
    active_layers: frozenset
    anchors: frozenset
    follower_map: dict
    compress_followers: bool = True

    def __post_init__(self):
        object.__setattr__(self, "active_layers", frozenset(self.active_layers))
        object.__setattr__(self, "anchors", frozenset(self.anchors))
        if not self.anchors:
            raise ConfigurationError("schedule needs at least one anchor")
        if not self.anchors <= self.active_layers:
            raise ConfigurationError("anchors must be active layers")
        if set(self.follower_map) != set(range(self.n_layers)):
            raise ConfigurationError("follower_map must cover every layer")
        for layer, anchor in self.follower_map.items():
            if anchor not in self.anchors:
                raise ConfigurationError(f"layer {layer} follows non-anchor {anchor}")
        for a in self.anchors:
            if self.follower_map[a] != a:
                raise ConfigurationError("every anchor must map to itself")

    def compressed_layers(self) -> list:
        """Layers whose cache is reduced at each firing."""
        if self.compress_followers:
            return list(range(self.n_layers))
        return sorted(self.active_layers)

    @classmethod
    def default(cls, n_layers: int, active_fraction: float = 0.25) -> "LayerSchedule":
        """Bottom fraction of layers active, single anchor at the lowest one."""
        n_active = max(1, int(active_fraction * n_layers))
        active = frozenset(range(n_active))
        return cls.from_anchors(n_layers, active, {min(active)})

    @classmethod
    def from_anchors(cls, n_layers: int, active, anchors,
                     compress_followers: bool = True) -> "LayerSchedule":
        """Every layer follows the nearest preceding anchor (or the lowest
        anchor when none precedes it)."""
        anchors = sorted(anchors)
        fmap = {}
        for layer in range(n_layers):
            preceding = [a for a in anchors if a <= layer]
            fmap[layer] = preceding[-1] if preceding else anchors[0]
        return cls(n_layers, frozenset(active), frozenset(anchors), fmap,
                   compress_followers)


@dataclass(frozen=True)
class CompressionRecord:
    """One firing of the compressor."""

    trigger_position: int
    old_size: int
    recent_size: int
    retained_positions: dict  # anchor layer -> tuple of retained stream positions


@dataclass
class StreamState:
    """Single-writer streaming state: per-layer compressed persistent
    caches plus a pending uncompressed block buffer."""

    budget: BudgetConfig
    schedule: LayerSchedule
    config: SelectorConfig
    persistent: list | None = None  # list[LayerCache], one per layer
    pending: CacheSnapshot | None = None
    compression_log: list = field(default_factory=list)

    def persistent_tokens(self) -> int:
        """Token count of the bounded (anchor) persistent cache."""
        if self.persistent is None:
            return 0
        anchor = min(self.schedule.anchors)
        return self.persistent[anchor].n_tokens

    def total_tokens(self) -> int:
        n = self.persistent_tokens()
        if self.pending is not None:
            n += self.pending.n_tokens
        return n

    def persistent_snapshot(self) -> CacheSnapshot | None:
        """Aligned snapshot of the persistent cache, plus any pending tail."""
        parts = []
        if self.persistent is not None:
            parts.append(CacheSnapshot(self.persistent))
        if self.pending is not None:
            parts.append(self.pending)
        if not parts:
            return None
        out = parts[0]
        for nxt in parts[1:]:
            out = _concat_snapshots(out, nxt)
        return out


def _concat_layers(a: LayerCache, b: LayerCache) -> LayerCache:
    return LayerCache(
        np.vstack([a.keys, b.keys]),
        np.vstack([a.values, b.values]),
        np.concatenate([a.frame_ids, b.frame_ids]),
        np.concatenate([a.positions, b.positions]),
    )


def _concat_snapshots(a: CacheSnapshot, b: CacheSnapshot) -> CacheSnapshot:
    return CacheSnapshot([_concat_layers(la, lb) for la, lb in zip(a.layers, b.layers)])


def ingest_block(state: StreamState, block: CacheSnapshot) -> StreamState:
    """Append a block to the pending buffer; never compresses."""
    if block.n_tokens == 0:
        return state
    if block.n_layers != state.schedule.n_layers:
        raise ShapeError(
            f"block has {block.n_layers} layers but the schedule covers"
            f" {state.schedule.n_layers}"
        )
    ref = None
    if state.persistent is not None:
        ref = state.persistent[0]
    elif state.pending is not None:
        ref = state.pending.layers[0]
    if ref is not None:
        n_layers = (
            len(state.persistent)
            if state.persistent is not None
            else state.pending.n_layers
        )
        if block.n_layers != n_layers or block.d_k != ref.d_k or block.d_v != ref.d_v:
            raise ShapeError("block layer/dim shape does not match the stream")
        last = -1
        if state.persistent is not None:
            last = max(int(l.positions[-1]) for l in state.persistent if l.n_tokens)
        if state.pending is not None:
            last = max(last, int(state.pending.positions[-1]))
        if int(block.positions[0]) <= last:
            raise ValidationError(
                f"block positions must continue the stream (got"
                f" {int(block.positions[0])} after {last})"
            )
    state.pending = (
        block if state.pending is None else _concat_snapshots(state.pending, block)
    )
    return state


def _recent_split(frame_ids: np.ndarray, n_total: int, recent_target: int) -> int:
    """Split index s so tokens [s, N) form the recent tail. The tail is
    rounded down to a frame boundary so no frame straddles the split."""
    s = max(0, n_total - recent_target)
    boundaries = np.flatnonzero(np.r_[True, frame_ids[1:] != frame_ids[:-1]])
    boundaries = np.r_[boundaries, n_total]
    return int(boundaries[np.searchsorted(boundaries, s, side="left")])


def _select_old_indices(
    cache: LayerCache, old_stop: int, budget_tokens: int, config: SelectorConfig
) -> np.ndarray:
    """Indices into [0, old_stop) chosen by the configured selection rule."""
    old = cache.take(np.arange(old_stop))
    if budget_tokens >= old.n_tokens:
        return np.arange(old.n_tokens, dtype=np.int64)
    if budget_tokens <= 0:
        return np.empty(0, dtype=np.int64)
    if config.granularity is Granularity.TOKEN:
        result = cords_select(CandidatePool.from_layer(old), budget_tokens, config)
        return result.sorted_indices
    view = frame_centroids(old)
    sizes = np.diff(view.frame_token_ranges, axis=1).ravel()
    median_size = int(np.median(sizes))
    n_frames = budget_tokens // max(1, median_size)
    if n_frames < 1:
        raise ConfigurationError(
            f"budget {budget_tokens} is smaller than one frame (median size"
            f" {median_size}) at frame granularity"
        )
    n_frames = min(n_frames, view.n_frames)
    result = cords_select(CandidatePool.from_frame_view(view), n_frames, config)
    tokens = np.sort(expand_frames(view, result.selected))
    if len(tokens) > budget_tokens:
        tokens = tokens[:budget_tokens]  # trim the newest selected tokens
    return tokens.astype(np.int64)


def cascade_apply(anchor_indices, follower: LayerCache) -> LayerCache:
    """Hard index reuse: the follower keeps its own rows at the anchor's
    selected positions (bit-exact row copies)."""
    idx = np.asarray(anchor_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= follower.n_tokens):
        raise BoundsError("anchor index out of range for follower cache")
    return follower.take(np.sort(idx))


def maybe_compress(state: StreamState) -> CompressionRecord | None:
    """Compress once persistent+pending exceeds total_budget + block_tokens.

    The newest tokens (frame-aligned) form the retained recent tail; the
    remainder is reduced per anchor layer and followers reuse indices.
    """
    total = state.total_tokens()
    if total <= state.budget.total_budget + state.budget.block_tokens:
        return None
    if state.pending is None and state.persistent is None:
        return None

    n_layers = state.schedule.n_layers
    if state.persistent is None:
        merged = list(state.pending.layers)
    elif state.pending is None:
        merged = list(state.persistent)
    else:
        merged = [
            _concat_layers(state.persistent[i], state.pending.layers[i])
            for i in range(n_layers)
        ]

    anchor0 = min(state.schedule.anchors)
    ref = merged[anchor0]
    n = ref.n_tokens
    split = _recent_split(ref.frame_ids, n, state.budget.recent_size)
    recent_count = n - split
    b = max(0, state.budget.total_budget - recent_count)

    anchor_sel = {
        a: _select_old_indices(merged[a], split, b, state.config)
        for a in sorted(state.schedule.anchors)
    }
    recent_idx = np.arange(split, n, dtype=np.int64)

    compressed = set(state.schedule.compressed_layers())
    new_layers = []
    for layer_idx in range(n_layers):
        if layer_idx not in compressed:
            new_layers.append(merged[layer_idx])
            continue
        sel = anchor_sel[state.schedule.follower_map[layer_idx]]
        keep = np.concatenate([sel, recent_idx])
        new_layers.append(cascade_apply(keep, merged[layer_idx]))

    state.persistent = new_layers
    state.pending = None
    record = CompressionRecord(
        trigger_position=int(ref.positions[-1]),
        old_size=int(split),
        recent_size=int(recent_count),
        retained_positions={
            a: tuple(int(p) for p in ref.positions[idx])
            for a, idx in anchor_sel.items()
        },
    )
    state.compression_log.append(record)
    return record


def run_stream(
    blocks,
    budget: BudgetConfig,
    schedule: LayerSchedule,
    config: SelectorConfig,
) -> StreamState:
    """Fold ingest + compress over a block sequence; deterministic."""
    blocks = list(blocks)
    if not blocks:
        raise EmptyInputError("block sequence is empty")
    state = StreamState(budget=budget, schedule=schedule, config=config)
    for block in blocks:
        ingest_block(state, block)
        maybe_compress(state)
    return state


def split_into_blocks(snapshot: CacheSnapshot, block_tokens: int):
    """Replay helper: cut a snapshot into consecutive token blocks."""
    if block_tokens < 1:
        raise ValidationError("block_tokens must be positive")
    n = snapshot.n_tokens
    for start in range(0, n, block_tokens):
        idx = np.arange(start, min(start + block_tokens, n))
        yield CacheSnapshot([layer.take(idx) for layer in snapshot.layers])
