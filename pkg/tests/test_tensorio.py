import numpy as np
import pytest

from vmr.data import BiasSpec, GenerateConfig, generate_dataset
from vmr.tensorio import MAGIC, attach_features, read_tensor, write_split_features, write_tensor


def test_roundtrip_2d(tmp_path):
    arr = np.random.default_rng(0).normal(size=(7, 5)).astype(np.float32)
    path = tmp_path / "t.vmrt"
    write_tensor(path, arr)
    back = read_tensor(path)
    np.testing.assert_array_equal(back, arr)
    assert back.dtype == np.float32


def test_roundtrip_other_ranks(tmp_path):
    for shape in [(4,), (2, 3, 4)]:
        arr = np.arange(np.prod(shape), dtype=np.float32).reshape(shape)
        path = tmp_path / "t.vmrt"
        write_tensor(path, arr)
        np.testing.assert_array_equal(read_tensor(path), arr)


def test_header_layout(tmp_path):
    arr = np.zeros((2, 3), dtype=np.float32)
    path = tmp_path / "t.vmrt"
    write_tensor(path, arr)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    assert np.frombuffer(raw, "<u4", offset=4, count=1)[0] == 1  # version
    assert np.frombuffer(raw, "<u4", offset=8, count=1)[0] == 2  # ndim
    assert tuple(np.frombuffer(raw, "<u8", offset=12, count=2)) == (2, 3)
    assert len(raw) == 12 + 16 + 2 * 3 * 4


def test_mmap_read(tmp_path):
    arr = np.random.default_rng(1).normal(size=(6, 4)).astype(np.float32)
    path = tmp_path / "t.vmrt"
    write_tensor(path, arr)
    m = read_tensor(path, mmap=True)
    np.testing.assert_array_equal(np.asarray(m), arr)


def test_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.vmrt"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(ValueError):
        read_tensor(path)


def test_split_feature_roundtrip(tmp_path):
    cfg = GenerateConfig(bias=BiasSpec.head_biased(), n_train=4, n_val=0, n_test=2,
                         num_clips=4, feature_dim=6)
    splits = generate_dataset(cfg, 0)
    write_split_features(splits["train"], tmp_path / "feats")
    stripped = generate_dataset(cfg, 0)["train"]
    originals = [s.clip_features.copy() for s in stripped.samples]
    for s in stripped.samples:
        s.clip_features = None
    attach_features(stripped, tmp_path / "feats")
    for s, orig in zip(stripped.samples, originals):
        np.testing.assert_array_equal(s.clip_features, orig)


def test_attach_missing_file(tmp_path):
    cfg = GenerateConfig(bias=BiasSpec.head_biased(), n_train=2, n_val=0, n_test=1,
                         num_clips=4, feature_dim=6)
    split = generate_dataset(cfg, 0)["train"]
    (tmp_path / "feats").mkdir()
    with pytest.raises(FileNotFoundError):
        attach_features(split, tmp_path / "feats")
