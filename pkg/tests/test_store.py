import numpy as np
import pytest

from prunetect import nn, store, zoo
from prunetect.nn import ReLU
from prunetect.store import (
    BadMagicError,
    BlobLengthError,
    HeaderParseError,
    StoreError,
    TruncatedBlobError,
    VersionMismatchError,
)

from genmodels import random_model
from oracles import declared_param_count


class TestRoundTrip:
    def test_save_load_save_byte_identical(self, tmp_path):
        m = zoo.build("toycnn-a", seed=7)
        m.metadata["note"] = "fixture"
        p1, p2 = tmp_path / "a.prnt", tmp_path / "b.prnt"
        store.save(m, p1)
        store.save(store.load(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_roundtrip_bit_exact_over_random_models(self, tmp_path):
        for seed in range(100):
            m = random_model(seed)
            path = tmp_path / "m.prnt"
            store.save(m, path)
            m2 = store.load(path)
            assert m2.architecture_id == m.architecture_id
            assert m2.input_shape == m.input_shape
            assert m2.num_classes == m.num_classes
            assert m2.metadata == m.metadata
            for a, b in zip(m.layers, m2.layers):
                assert type(a) is type(b)
                for (_, x), (_, y) in zip(a.param_items(), b.param_items()):
                    assert np.array_equal(x, y)  # bit-exact floats

    def test_file_size_is_header_plus_8_per_param(self, tmp_path):
        for seed in (0, 5, 9):
            m = random_model(seed)
            path = tmp_path / "m.prnt"
            store.save(m, path)
            assert path.stat().st_size == store.HEADER_SIZE + 8 * declared_param_count(m)
            assert store.file_size_for(m) == path.stat().st_size

    def test_metadata_must_be_strings(self, tmp_path):
        m = random_model(0)
        m.metadata["seed"] = 3  # not a str
        with pytest.raises(StoreError, match="metadata"):
            store.save(m, tmp_path / "m.prnt")


class TestCorruption:
    def save_one(self, tmp_path):
        m = zoo.build("toycnn-a", seed=1)
        path = tmp_path / "m.prnt"
        store.save(m, path)
        return path

    def test_corrupting_any_meaningful_header_byte_raises(self, tmp_path):
        path = self.save_one(tmp_path)
        data = bytearray(path.read_bytes())
        json_len = int.from_bytes(data[6:10], "little")
        rng = np.random.default_rng(0)
        offsets = list(range(0, store.PREAMBLE)) + list(
            rng.integers(store.PREAMBLE, store.PREAMBLE + json_len, size=30))
        for off in offsets:
            corrupted = bytearray(data)
            corrupted[off] ^= 0xFF
            path.write_bytes(bytes(corrupted))
            with pytest.raises(StoreError):
                store.load(path)

    def test_padding_corruption_detected(self, tmp_path):
        path = self.save_one(tmp_path)
        data = bytearray(path.read_bytes())
        data[store.HEADER_SIZE - 1] = ord("x")
        path.write_bytes(bytes(data))
        with pytest.raises(HeaderParseError, match="padding"):
            store.load(path)

    def test_bad_magic(self, tmp_path):
        path = self.save_one(tmp_path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(BadMagicError):
            store.load(path)

    def test_version_mismatch(self, tmp_path):
        path = self.save_one(tmp_path)
        data = bytearray(path.read_bytes())
        data[4:6] = (9).to_bytes(2, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatchError):
            store.load(path)

    def test_truncated_blob(self, tmp_path):
        path = self.save_one(tmp_path)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(TruncatedBlobError):
            store.load(path)

    def test_blob_length_disagreement(self, tmp_path):
        path = self.save_one(tmp_path)
        path.write_bytes(path.read_bytes() + b"\x00" * 8)
        with pytest.raises(BlobLengthError):
            store.load(path)


class TestFingerprint:
    def test_weights_do_not_change_fingerprint(self):
        a = zoo.build("toycnn-a", seed=0)
        b = zoo.build("toycnn-a", seed=999)
        assert store.fingerprint(a) == store.fingerprint(b)
        assert a.architecture_id == b.architecture_id

    def test_structure_changes_digest(self):
        m = zoo.build("toycnn-a", seed=0)
        base = store.fingerprint(m).digest
        # drop a ReLU
        m2 = nn.clone_model(m)
        m2.layers = [l for i, l in enumerate(m2.layers) if not (i == 2 and isinstance(l, ReLU))]
        assert store.fingerprint(m2).digest != base
        # change a shape parameter
        m3 = nn.clone_model(m)
        m3.layers[3].stride = 1
        assert store.fingerprint(m3).digest != base
        # change the input shape
        m4 = nn.clone_model(m)
        m4.input_shape = (3, 48, 48)
        assert store.fingerprint(m4).digest != base

    def test_canonical_text_has_no_floats(self):
        fp = store.fingerprint(zoo.build("toycnn-b", seed=0))
        assert "." not in fp.canonical_text
        assert "e-" not in fp.canonical_text

    def test_reference_table_matches_committed_digests(self):
        refs = store.load_reference_fingerprints()
        assert set(refs) == set(zoo.registered_ids())
        for arch in zoo.registered_ids():
            fp = store.fingerprint(zoo.build(arch, seed=0))
            assert refs[arch][0] == fp.digest
            graph_path = store.builtin_reference_dir() / f"{arch}.graph.txt"
            assert graph_path.read_text() == fp.canonical_text + "\n"

    def test_skeleton_id_pure_function_of_skeleton(self):
        a, b = random_model(3), random_model(3)
        b2 = random_model(4)
        assert store.skeleton_id(a) == store.skeleton_id(b)
        assert store.skeleton_id(a) != store.skeleton_id(b2)

    def test_header_overflow_rejected(self, tmp_path):
        m = random_model(0)
        m.metadata["blob"] = "x" * store.HEADER_BLOCK
        with pytest.raises(store.HeaderOverflowError):
            store.save(m, tmp_path / "m.prnt")
