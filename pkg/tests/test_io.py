"""Container format round-trips, corruption handling, synthetic cache
generation, and results serialization."""
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvcoreset import (
    CacheSnapshot,
    FormatError,
    LayerCache,
    SyntheticSpec,
    ValidationError,
    generate_synthetic,
    read_kvd,
    read_results,
    write_kvd,
    write_results,
)
from kvcoreset.kvio import HEADER, MAGIC


def random_snapshot(rng, n_layers=None, n=None, d_k=None, d_v=None):
    n_layers = n_layers or int(rng.integers(1, 4))
    n = n if n is not None else int(rng.integers(1, 40))
    d_k = d_k or int(rng.integers(1, 9))
    d_v = d_v or int(rng.integers(1, 9))
    tokens_per_frame = int(rng.integers(1, 5))
    frame_ids = np.arange(n) // tokens_per_frame
    positions = np.cumsum(rng.integers(1, 4, size=n))
    layers = [
        LayerCache(
            rng.standard_normal((n, d_k)),
            rng.standard_normal((n, d_v)),
            frame_ids,
            positions,
        )
        for _ in range(n_layers)
    ]
    return CacheSnapshot(layers)


class TestRoundTrip:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_bit_exact_at_stored_precision(self, tmp_path, dtype):
        rng = np.random.default_rng(0)
        snap = random_snapshot(rng)
        path = tmp_path / "x.kvd"
        write_kvd(snap, path, dtype=dtype)
        back = read_kvd(path)
        for la, lb in zip(snap.layers, back.layers):
            np.testing.assert_array_equal(la.keys.astype(dtype), lb.keys.astype(dtype))
            np.testing.assert_array_equal(
                la.values.astype(dtype), lb.values.astype(dtype)
            )
            np.testing.assert_array_equal(la.frame_ids, lb.frame_ids)
            np.testing.assert_array_equal(la.positions, lb.positions)

    def test_float64_storage_is_lossless(self, tmp_path):
        rng = np.random.default_rng(1)
        snap = random_snapshot(rng)
        path = tmp_path / "x.kvd"
        write_kvd(snap, path, dtype=np.float64)
        back = read_kvd(path)
        np.testing.assert_array_equal(back.layers[0].keys, snap.layers[0].keys)

    def test_unsupported_dtype_rejected(self, tmp_path):
        snap = random_snapshot(np.random.default_rng(2))
        with pytest.raises(ValidationError):
            write_kvd(snap, tmp_path / "x.kvd", dtype=np.int32)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_roundtrip_property(self, tmp_path_factory, seed):
        rng = np.random.default_rng(seed)
        snap = random_snapshot(rng)
        path = tmp_path_factory.mktemp("kvd") / "x.kvd"
        write_kvd(snap, path, dtype=np.float64)
        back = read_kvd(path)
        assert back.n_layers == snap.n_layers
        for la, lb in zip(snap.layers, back.layers):
            np.testing.assert_array_equal(la.keys, lb.keys)
            np.testing.assert_array_equal(la.values, lb.values)
            np.testing.assert_array_equal(la.frame_ids, lb.frame_ids)
            np.testing.assert_array_equal(la.positions, lb.positions)


class TestCorruption:
    def make_file(self, tmp_path):
        snap = random_snapshot(np.random.default_rng(3), n_layers=1, n=8)
        path = tmp_path / "x.kvd"
        write_kvd(snap, path)
        return path

    def test_bad_magic(self, tmp_path):
        path = self.make_file(tmp_path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="magic") as exc:
            read_kvd(path)
        assert exc.value.offset == 0

    def test_bad_version(self, tmp_path):
        path = self.make_file(tmp_path)
        data = bytearray(path.read_bytes())
        data[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="version") as exc:
            read_kvd(path)
        assert exc.value.offset == 4

    def test_truncated_payload(self, tmp_path):
        path = self.make_file(tmp_path)
        data = path.read_bytes()
        path.write_bytes(data[:-9])
        with pytest.raises(FormatError, match="length mismatch"):
            read_kvd(path)

    def test_short_header(self, tmp_path):
        path = tmp_path / "x.kvd"
        path.write_bytes(MAGIC + b"\x00" * 3)
        with pytest.raises(FormatError, match="header"):
            read_kvd(path)

    def test_unknown_dtype_code(self, tmp_path):
        path = self.make_file(tmp_path)
        data = bytearray(path.read_bytes())
        data[28] = 7  # dtype byte
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="dtype"):
            read_kvd(path)

    def test_non_monotone_frame_table(self, tmp_path):
        snap = random_snapshot(np.random.default_rng(4), n_layers=1, n=8)
        path = tmp_path / "x.kvd"
        write_kvd(snap, path)
        data = bytearray(path.read_bytes())
        # frame table sits between the payload and the positions block
        n, d_k, d_v = snap.n_tokens, snap.d_k, snap.d_v
        off = HEADER.size + n * (d_k + d_v) * 4
        data[off : off + 8] = struct.pack("<Q", 10**6)
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="frame boundaries"):
            read_kvd(path)


class TestSynthetic:
    def test_deterministic_per_seed(self, tmp_path):
        spec = SyntheticSpec(rng_seed=7, n_layers=2, duplicate_rate=0.3)
        a = generate_synthetic(spec)
        b = generate_synthetic(spec)
        np.testing.assert_array_equal(a.layers[1].keys, b.layers[1].keys)
        pa, pb = tmp_path / "a.kvd", tmp_path / "b.kvd"
        write_kvd(a, pa)
        write_kvd(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_shapes_and_bookkeeping(self):
        spec = SyntheticSpec(tokens_per_frame=3, frames=10, d_k=5, d_v=2, n_layers=2)
        snap = generate_synthetic(spec)
        assert snap.n_tokens == 30 and snap.d_k == 5 and snap.d_v == 2
        np.testing.assert_array_equal(snap.frame_ids, np.arange(30) // 3)
        np.testing.assert_array_equal(snap.positions, np.arange(30))

    def test_single_cluster_is_one_blob(self):
        spec = SyntheticSpec(clusters=1, frames=50, noise_scale=0.01, rng_seed=1)
        snap = generate_synthetic(spec)
        spread = snap.layers[0].keys.std(axis=0).max()
        assert spread < 0.1  # all tokens hug the single center

    def test_cluster_recovery(self):
        # 20 well-spread clusters: Lloyd's with k=20 puts >= 90% of tokens
        # within 3*noise of their center, i.e. at least 18 clusters resolved
        from sklearn.cluster import KMeans

        spec = SyntheticSpec(
            clusters=20, frames=200, tokens_per_frame=2, noise_scale=0.05,
            d_k=8, d_v=8, rng_seed=5,
        )
        snap = generate_synthetic(spec)
        feats = np.hstack([snap.layers[0].keys, snap.layers[0].values])
        km = KMeans(n_clusters=20, n_init=4, random_state=0).fit(feats)
        dist = np.linalg.norm(feats - km.cluster_centers_[km.labels_], axis=1)
        tol = 3 * spec.noise_scale * np.sqrt(feats.shape[1])
        assert (dist <= tol).mean() >= 0.9

    def test_all_duplicates_copy_frame_zero(self):
        spec = SyntheticSpec(
            clusters=4, frames=10, tokens_per_frame=2, duplicate_rate=1.0,
            noise_scale=0.01, rng_seed=2,
        )
        snap = generate_synthetic(spec)
        keys = snap.layers[0].keys
        first = keys[:2]
        for f in range(1, 10):
            np.testing.assert_allclose(keys[2 * f : 2 * f + 2], first, atol=0.1)

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            SyntheticSpec(clusters=0)
        with pytest.raises(ValidationError):
            SyntheticSpec(duplicate_rate=1.5)


class TestResults:
    def test_parse_round_trip(self, tmp_path):
        path = tmp_path / "r.txt"
        records = [
            {"layer": 0, "retained_indices": [1, 2, 3]},
            {"layer": 1, "retained_indices": [4, 5]},
            {"layer": 2, "retained_indices": []},
        ]
        meta = {"budget": 3, "values": np.array([1.5, 2.5])}
        write_results(records, meta, path)
        back_meta, back_records = read_results(path)
        assert back_meta["budget"] == 3
        assert back_meta["values"] == [1.5, 2.5]
        assert back_records == records

    def test_missing_schema_tag(self, tmp_path):
        path = tmp_path / "r.txt"
        path.write_text("{}\n")
        with pytest.raises(FormatError, match="schema"):
            read_results(path)

    def test_unsupported_schema(self, tmp_path):
        path = tmp_path / "r.txt"
        path.write_text("# schema: other/9\n{}\n")
        with pytest.raises(FormatError, match="schema"):
            read_results(path)
