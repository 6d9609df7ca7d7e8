"""Cache interchange format (KVD1), synthetic cache generation, and
structured result serialization.

KVD1 layout (little-endian):
  header   magic "KVD1" | u32 version=1 | u32 L | u32 N | u32 d_k
           | u32 d_v | u32 F | u8 dtype (0=f32, 1=f64) | 3 pad bytes
  payload  per layer: keys (N x d_k) then values (N x d_v), row-major
  frames   F+1 u64 token boundaries (first 0, last N, strictly increasing)
  positions N u64 original stream positions
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .errors import FormatError, ValidationError
from .kvcore import CacheSnapshot, LayerCache

MAGIC = b"KVD1"
VERSION = 1
HEADER = struct.Struct("<4sIIIIIIB3x")
DTYPE_CODES = {0: np.float32, 1: np.float64}
RESULTS_SCHEMA = "kvcoreset-results/1"


def write_kvd(snapshot: CacheSnapshot, path, dtype=np.float32) -> None:
    """Serialize a snapshot; write(read(x)) is bit-exact at the stored dtype."""
    dtype = np.dtype(dtype)
    code = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}.get(dtype)
    if code is None:
        raise ValidationError(f"unsupported storage dtype {dtype}")
    frame_ids = snapshot.frame_ids
    n = snapshot.n_tokens
    starts = np.flatnonzero(np.r_[True, frame_ids[1:] != frame_ids[:-1]]) if n else np.empty(0, np.int64)
    boundaries = np.r_[starts, n].astype(np.uint64)
    f = len(boundaries) - 1
    with open(path, "wb") as fh:
        fh.write(
            HEADER.pack(
                MAGIC, VERSION, snapshot.n_layers, n, snapshot.d_k, snapshot.d_v,
                f, code,
            )
        )
        for layer in snapshot.layers:
            fh.write(np.ascontiguousarray(layer.keys, dtype=dtype).tobytes())
            fh.write(np.ascontiguousarray(layer.values, dtype=dtype).tobytes())
        fh.write(boundaries.astype("<u8").tobytes())
        fh.write(snapshot.positions.astype("<u8").tobytes())


def read_kvd(path) -> CacheSnapshot:
    """Parse and validate a KVD1 file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < HEADER.size:
        raise FormatError(
            f"file too short for header: expected {HEADER.size} bytes,"
            f" got {len(data)}", offset=0,
        )
    magic, version, n_layers, n, d_k, d_v, f, code = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", offset=28)
    dtype = np.dtype(DTYPE_CODES[code]).newbyteorder("<")
    item = dtype.itemsize
    payload_len = n_layers * n * (d_k + d_v) * item
    frames_len = (f + 1) * 8
    positions_len = n * 8
    expected = HEADER.size + payload_len + frames_len + positions_len
    if len(data) != expected:
        raise FormatError(
            f"payload length mismatch: expected {expected} bytes, got {len(data)}",
            offset=min(len(data), HEADER.size + payload_len),
        )
    off = HEADER.size + payload_len
    boundaries = np.frombuffer(data, dtype="<u8", count=f + 1, offset=off).astype(np.int64)
    if boundaries[0] != 0 or boundaries[-1] != n or np.any(np.diff(boundaries) <= 0):
        raise FormatError(
            "frame boundaries must start at 0, end at N, and be strictly"
            " increasing", offset=off,
        )
    positions = np.frombuffer(
        data, dtype="<u8", count=n, offset=off + frames_len
    ).astype(np.int64)
    frame_ids = np.repeat(np.arange(f, dtype=np.int64), np.diff(boundaries))

    layers = []
    off = HEADER.size
    per_mat_k = n * d_k * item
    per_mat_v = n * d_v * item
    for _ in range(n_layers):
        keys = np.frombuffer(data, dtype=dtype, count=n * d_k, offset=off).reshape(n, d_k)
        off += per_mat_k
        values = np.frombuffer(data, dtype=dtype, count=n * d_v, offset=off).reshape(n, d_v)
        off += per_mat_v
        layers.append(LayerCache(keys, values, frame_ids, positions))
    return CacheSnapshot(layers)


@dataclass(frozen=True)
class SyntheticSpec:
    """Cluster-structured cache generator parameters."""

    clusters: int = 4
    tokens_per_frame: int = 4
    frames: int = 32
    duplicate_rate: float = 0.0
    noise_scale: float = 0.05
    d_k: int = 8
    d_v: int = 8
    n_layers: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("clusters", "tokens_per_frame", "frames", "d_k", "d_v", "n_layers"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if not 0.0 <= self.duplicate_rate <= 1.0:
            raise ValidationError("duplicate_rate must be in [0, 1]")


def generate_synthetic(spec: SyntheticSpec) -> CacheSnapshot:
    """Gaussian-mixture keys/values with frame structure; a duplicate_rate
    fraction of frames are noise-perturbed near-copies of earlier original
    frames. Pure function of the spec."""
    rng = np.random.default_rng(spec.rng_seed)
    tpf = spec.tokens_per_frame
    n = spec.frames * tpf
    frame_ids = np.repeat(np.arange(spec.frames, dtype=np.int64), tpf)
    positions = np.arange(n, dtype=np.int64)

    frame_cluster = rng.integers(0, spec.clusters, size=spec.frames)
    dup_draw = rng.random(spec.frames)
    layers = []
    for _ in range(spec.n_layers):
        centers_k = rng.standard_normal((spec.clusters, spec.d_k))
        centers_v = rng.standard_normal((spec.clusters, spec.d_v))
        keys = np.empty((n, spec.d_k))
        values = np.empty((n, spec.d_v))
        originals: list[int] = []
        for t in range(spec.frames):
            sl = slice(t * tpf, (t + 1) * tpf)
            if t > 0 and originals and dup_draw[t] < spec.duplicate_rate:
                src = originals[int(rng.integers(0, len(originals)))]
                src_sl = slice(src * tpf, (src + 1) * tpf)
                keys[sl] = keys[src_sl] + spec.noise_scale * rng.standard_normal((tpf, spec.d_k))
                values[sl] = values[src_sl] + spec.noise_scale * rng.standard_normal((tpf, spec.d_v))
            else:
                c = frame_cluster[t]
                keys[sl] = centers_k[c] + spec.noise_scale * rng.standard_normal((tpf, spec.d_k))
                values[sl] = centers_v[c] + spec.noise_scale * rng.standard_normal((tpf, spec.d_v))
                originals.append(t)
        layers.append(LayerCache(keys, values, frame_ids, positions))
    return CacheSnapshot(layers)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable(asdict(obj))
    if hasattr(obj, "value"):  # enums
        return obj.value
    return obj


def write_results(records, metadata, path) -> None:
    """Stable, diffable text output: a schema tag, one metadata object,
    then one JSON object per record with sorted keys."""
    with open(path, "w") as fh:
        fh.write(f"# schema: {RESULTS_SCHEMA}\n")
        fh.write(json.dumps({"metadata": _jsonable(metadata)}, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps({"record": _jsonable(rec)}, sort_keys=True) + "\n")


def read_results(path):
    """Parse a results file back into (metadata, records)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# schema: "):
        raise FormatError("missing results schema tag", offset=0)
    schema = lines[0][len("# schema: "):]
    if schema != RESULTS_SCHEMA:
        raise FormatError(f"unsupported results schema {schema!r}")
    metadata = json.loads(lines[1])["metadata"] if len(lines) > 1 else {}
    records = [json.loads(line)["record"] for line in lines[2:] if line.strip()]
    return metadata, records
