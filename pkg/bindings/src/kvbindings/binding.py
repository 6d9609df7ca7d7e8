"""Engine bindings: stateless layer compression plus a stateful
streaming session mirroring the engine's ingest/compress semantics."""
from __future__ import annotations

from types import MappingProxyType

import numpy as np

import kvcoreset
from kvcoreset import (
    BudgetConfig,
    CacheSnapshot,
    CandidatePool,
    KvError,
    LayerCache,
    LayerSchedule,
    SelectorConfig,
    ShapeError,
    StreamState,
    ValidationError,
    cords_select,
    ingest_block,
    maybe_compress,
)

_CONFIG_KEYS = {
    "alpha", "eta", "lam", "lambda", "eps0", "eps_logdet", "orth_mode",
    "granularity", "rng_seed",
}


class SessionClosedError(KvError):
    """The session handle was used after close()."""


def engine_version() -> str:
    """Version string of the underlying selection engine."""
    return kvcoreset.__version__


def _as_feature_buffer(arr, name: str) -> np.ndarray:
    """Validate a contiguous float32/float64 matrix; float64 input is
    passed through as a zero-copy view."""
    arr = np.asarray(arr)
    if arr.dtype not in (np.float32, np.float64):
        raise ValidationError(
            f"{name} must be a float32 or float64 buffer, got {arr.dtype}"
        )
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not arr.flags["C_CONTIGUOUS"]:
        raise ValidationError(f"{name} must be C-contiguous")
    return arr if arr.dtype == np.float64 else arr.astype(np.float64)


def make_config(mapping=None) -> SelectorConfig:
    """SelectorConfig from a plain mapping; accepts 'lambda' for 'lam'."""
    mapping = dict(mapping or {})
    unknown = set(mapping) - _CONFIG_KEYS
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    if "lambda" in mapping:
        if "lam" in mapping and mapping["lam"] != mapping["lambda"]:
            raise ValidationError("'lam' and 'lambda' disagree")
        mapping["lam"] = mapping.pop("lambda")
    return SelectorConfig(**mapping)


def compress_layer(keys, values, budget: int, config=None) -> np.ndarray:
    """Budget-bounded representative token indices for one layer.

    keys is (N, d_k), values is (N, d_v); returns a newly allocated
    ascending int64 index array of length `budget`, identical to the
    engine CLI's retained indices for the same inputs.
    """
    keys = _as_feature_buffer(keys, "keys")
    values = _as_feature_buffer(values, "values")
    if keys.shape[0] != values.shape[0]:
        raise ShapeError(
            f"keys have {keys.shape[0]} rows but values have {values.shape[0]}"
        )
    n = keys.shape[0]
    if not 1 <= budget <= n:
        raise ValidationError(f"budget {budget} outside [1, {n}]")
    cfg = make_config(config)
    if budget == n:
        return np.arange(n, dtype=np.int64)
    result = cords_select(CandidatePool(keys, values), budget, cfg)
    return result.sorted_indices.copy()


class BoundSession:
    """Stateful streaming handle over the engine's cache manager.

    One session owns one stream; blocks go in through ingest(), and the
    engine compresses automatically once the budget-plus-block threshold
    is crossed. The config mirror is read-only.
    """

    def __init__(
        self,
        n_layers: int,
        total_budget: int,
        config=None,
        recent_fraction: float = 0.25,
        block_tokens: int | None = None,
        active_layers=None,
        anchors=None,
    ):
        cfg = make_config(config)
        budget = BudgetConfig(
            total_budget=total_budget,
            recent_fraction=recent_fraction,
            block_tokens=block_tokens,
        )
        if active_layers is None:
            schedule = LayerSchedule.default(n_layers)
        else:
            active = set(active_layers)
            schedule = LayerSchedule.from_anchors(
                n_layers, active,
                set(anchors) if anchors is not None else {min(active)},
            )
        self._state = StreamState(budget, schedule, cfg)
        self._config = MappingProxyType(
            {
                "alpha": cfg.alpha,
                "eta": cfg.eta,
                "lam": cfg.lam,
                "eps0": cfg.eps0,
                "eps_logdet": cfg.eps_logdet,
                "orth_mode": cfg.orth_mode.value,
                "granularity": cfg.granularity.value,
                "rng_seed": cfg.rng_seed,
            }
        )
        self._next_position = 0
        self._closed = False

    @property
    def config(self):
        """Read-only mapping mirror of the selection config."""
        return self._config

    @property
    def closed(self) -> bool:
        return self._closed

    def _check_open(self):
        if self._closed:
            raise SessionClosedError("session is closed")

    def ingest(self, layer_keys, layer_values, frame_ids=None):
        """Feed one block of per-layer key/value buffers.

        layer_keys and layer_values are sequences with one (N, d) buffer
        per layer; frame_ids optionally groups the block's tokens (one
        frame per block when omitted). Returns a compression record dict
        when the block triggered a compaction, else None.
        """
        self._check_open()
        n_layers = self._state.schedule.n_layers
        if len(layer_keys) != n_layers or len(layer_values) != n_layers:
            raise ShapeError(
                f"expected buffers for {n_layers} layers,"
                f" got {len(layer_keys)}/{len(layer_values)}"
            )
        keys = [_as_feature_buffer(k, f"keys[{i}]")
                for i, k in enumerate(layer_keys)]
        values = [_as_feature_buffer(v, f"values[{i}]")
                  for i, v in enumerate(layer_values)]
        n = keys[0].shape[0]
        if n == 0:
            return None
        positions = np.arange(self._next_position, self._next_position + n)
        if frame_ids is None:
            frame_ids = np.zeros(n, dtype=np.int64)
        frame_ids = np.asarray(frame_ids, dtype=np.int64)
        # block-local frame ids are offset into a global frame sequence
        base = self._next_frame_base()
        block = CacheSnapshot(
            [
                LayerCache(k, v, frame_ids + base, positions)
                for k, v in zip(keys, values)
            ]
        )
        ingest_block(self._state, block)
        self._next_position += n
        record = maybe_compress(self._state)
        if record is None:
            return None
        return {
            "trigger_position": record.trigger_position,
            "old_size": record.old_size,
            "recent_size": record.recent_size,
            "retained_positions": {
                a: list(p) for a, p in record.retained_positions.items()
            },
        }

    def _next_frame_base(self) -> int:
        last = -1
        if self._state.persistent is not None:
            layer = self._state.persistent[0]
            if layer.n_tokens:
                last = int(layer.frame_ids[-1])
        if self._state.pending is not None:
            last = max(last, int(self._state.pending.frame_ids[-1]))
        return last + 1

    def retained_positions(self) -> np.ndarray:
        """Current stream positions held for the lowest anchor layer."""
        self._check_open()
        snap = self._state.persistent_snapshot()
        if snap is None:
            return np.empty(0, dtype=np.int64)
        return snap.positions.copy()

    def compression_log(self) -> list:
        self._check_open()
        return list(self._state.compression_log)

    def close(self) -> None:
        self._closed = True
        self._state = None
