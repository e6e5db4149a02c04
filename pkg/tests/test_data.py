import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays, array_shapes

from uqshift.data import (DatasetManifest, SynthConfig, generate, load_split, load_tensor, parse_tensor,
                          save_tensor, split, split_indices, write_dataset)
from uqshift.errors import (DimOverflowError, MagicMismatchError, PathError, TruncationError,
                            ValidationError)


class TestTensorFiles:
    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
    def test_float_roundtrip(self, tmp_path_factory, arr):
        path = tmp_path_factory.mktemp("t") / "x.bin"
        save_tensor(path, arr)
        back = load_tensor(path)
        assert back.dtype == np.float64 and back.shape == arr.shape
        assert back.astype(np.float32).tobytes() == arr.tobytes()

    def test_label_roundtrip(self, tmp_path):
        lab = np.random.default_rng(0).integers(0, 3, size=(5, 7)).astype(np.uint8)
        save_tensor(tmp_path / "l.bin", lab, labels=True)
        assert load_tensor(tmp_path / "l.bin").tobytes() == lab.tobytes()

    def test_layout(self, tmp_path):
        save_tensor(tmp_path / "x.bin", np.array([[1.0, 2.0, 3.0]]))
        raw = (tmp_path / "x.bin").read_bytes()
        assert raw[:4] == b"UQTB" and raw[4:8] == (2).to_bytes(4, "little")
        assert raw[8:16] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little") and len(raw) == 28

    def test_bad_magic(self):
        with pytest.raises(MagicMismatchError):
            parse_tensor(b"NOPE" + bytes(8))

    def test_truncated_names_counts(self, tmp_path):
        save_tensor(tmp_path / "x.bin", np.ones((4, 4)))
        raw = (tmp_path / "x.bin").read_bytes()
        with pytest.raises(TruncationError, match=f"expected {len(raw)} bytes, got {len(raw) - 3}"):
            parse_tensor(raw[:-3])

    def test_trailing_bytes(self):
        with pytest.raises(TruncationError):
            parse_tensor(b"UQLB" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + bytes(3))

    def test_too_many_dims(self):
        with pytest.raises(DimOverflowError):
            parse_tensor(b"UQTB" + (99).to_bytes(4, "little"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(PathError):
            load_tensor(tmp_path / "none.bin")


class TestGenerator:
    def test_deterministic(self):
        a, b = generate(SynthConfig(num_images=5)), generate(SynthConfig(num_images=5))
        assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()

    def test_all_classes_present(self):
        d = generate(SynthConfig(num_images=100, seed=4))
        for lab in d.labels:
            assert set(np.unique(lab)) == {0, 1, 2}

    def test_background_majority(self):
        d = generate(SynthConfig(num_images=100, seed=5))
        assert np.mean(d.labels == 0) > 0.6

    def test_range(self):
        d = generate(SynthConfig(num_images=10))
        assert d.images.min() >= 0 and d.images.max() <= 1 and d.images.shape == (10, 1, 32, 32)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            SynthConfig(size=8)


class TestSplits:
    def test_sizes(self):
        parts = split_indices(100, (0.8, 0.1, 0.1))
        assert [len(parts[k]) for k in ("train", "val", "test")] == [80, 10, 10]

    @given(st.integers(10, 300), st.integers(0, 1000))
    def test_partition(self, n, seed):
        parts = split_indices(n, (0.6, 0.2, 0.2), seed)
        allidx = np.concatenate(list(parts.values()))
        assert sorted(allidx.tolist()) == list(range(n))

    def test_seeded(self):
        a, b = split_indices(50, seed=3), split_indices(50, seed=3)
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_empty_split(self):
        with pytest.raises(ValidationError):
            split_indices(3, (0.9, 0.05, 0.05))

    def test_write_and_load(self, tmp_path):
        cfg = SynthConfig(size=16, num_images=10)
        d = generate(cfg)
        mans = write_dataset(tmp_path, d, cfg, (0.6, 0.2, 0.2), seed=1)
        test = load_split(tmp_path / "test.json")
        idx = split_indices(10, (0.6, 0.2, 0.2), 1)["test"]
        np.testing.assert_array_equal(test.labels, d.labels[idx])
        np.testing.assert_allclose(test.images, d.images[idx], atol=1e-7)
        man = DatasetManifest.from_json(json.loads((tmp_path / "train.json").read_text()))
        assert man.config_hash == cfg.digest() and len(man.entries) == 6 == len(mans["train"].entries)
        assert len(split(d, (0.6, 0.2, 0.2), 1)["val"]) == 2

    def test_manifest_missing_file(self, tmp_path):
        cfg = SynthConfig(size=16, num_images=10)
        write_dataset(tmp_path, generate(cfg), cfg, (0.6, 0.2, 0.2))
        entry = json.loads((tmp_path / "val.json").read_text())["entries"][0]["image"]
        (tmp_path / entry).unlink()
        with pytest.raises(PathError):
            load_split(tmp_path / "val.json")
