import gzip
import struct

import numpy as np
import pytest

from oscqat.data import (
    IdxFormatError,
    iterate_batches,
    load_idx_pair,
    read_idx,
    synthetic_blobs,
    write_idx,
)


def _write_pair(tmp_path, n_images=5, n_labels=5):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (n_images, 4, 3), dtype=np.uint8)
    labels = rng.integers(0, 10, n_labels, dtype=np.uint8)
    write_idx(tmp_path / "img.idx", images)
    write_idx(tmp_path / "lbl.idx", labels)
    return images, labels


def test_idx_roundtrip(tmp_path):
    images, labels = _write_pair(tmp_path)
    assert np.array_equal(read_idx(tmp_path / "img.idx"), images)
    x, y = load_idx_pair(tmp_path / "img.idx", tmp_path / "lbl.idx")
    assert x.shape == (5, 1, 4, 3) and x.dtype == np.float64
    assert np.allclose(x[:, 0] * 255.0, images)
    assert np.array_equal(y, labels)


def test_idx_header_layout(tmp_path):
    write_idx(tmp_path / "a.idx", np.zeros((2, 3), dtype=np.uint8))
    raw = (tmp_path / "a.idx").read_bytes()
    assert struct.unpack(">I", raw[:4])[0] == 0x00000802
    assert struct.unpack(">2I", raw[4:12]) == (2, 3)


def test_gzipped_idx(tmp_path):
    images, _ = _write_pair(tmp_path)
    (tmp_path / "img.idx.gz").write_bytes(gzip.compress((tmp_path / "img.idx").read_bytes()))
    assert np.array_equal(read_idx(tmp_path / "img.idx.gz"), images)


def test_bad_magic_reports_offset(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(struct.pack(">I", 0x00000D03) + b"\x00" * 12)
    with pytest.raises(IdxFormatError) as info:
        read_idx(path)
    assert info.value.offset == 0
    assert "offset 0" in str(info.value)


def test_wrong_kind_of_file(tmp_path):
    _write_pair(tmp_path)
    with pytest.raises(IdxFormatError, match="magic"):
        load_idx_pair(tmp_path / "lbl.idx", tmp_path / "img.idx")


def test_truncated_data_reports_offset(tmp_path):
    _write_pair(tmp_path)
    raw = (tmp_path / "img.idx").read_bytes()
    (tmp_path / "cut.idx").write_bytes(raw[:-7])
    with pytest.raises(IdxFormatError) as info:
        read_idx(tmp_path / "cut.idx")
    assert info.value.offset == len(raw) - 7


def test_truncated_header(tmp_path):
    (tmp_path / "h.idx").write_bytes(struct.pack(">I", 0x00000803) + b"\x00\x00")
    with pytest.raises(IdxFormatError, match="header"):
        read_idx(tmp_path / "h.idx")


def test_count_mismatch_names_both_counts(tmp_path):
    _write_pair(tmp_path, n_images=5, n_labels=4)
    with pytest.raises(ValueError, match="5.*4"):
        load_idx_pair(tmp_path / "img.idx", tmp_path / "lbl.idx")


def test_synthetic_is_deterministic():
    a = synthetic_blobs(n=64, seed=3)
    b = synthetic_blobs(n=64, seed=3)
    c = synthetic_blobs(n=64, seed=4)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])


def test_synthetic_shapes_and_range():
    x, y = synthetic_blobs(classes=5, height=12, width=10, n=100, seed=0)
    assert x.shape == (100, 1, 12, 10)
    assert x.min() >= 0.0 and x.max() <= 1.0
    assert set(np.unique(y)) <= set(range(5))


def test_batches_cover_and_drop_last():
    x = np.arange(10.0)[:, None]
    y = np.arange(10)
    batches = list(iterate_batches(x, y, 4))
    assert [len(b[1]) for b in batches] == [4, 4]
    assert [len(b[1]) for b in iterate_batches(x, y, 4, drop_last=False)] == [4, 4, 2]
    shuffled = list(iterate_batches(x, y, 5, np.random.default_rng(0)))
    assert sorted(np.concatenate([b[1] for b in shuffled]).tolist()) == list(range(10))


def test_batches_skip_singleton_tail():
    x, y = np.zeros((5, 1)), np.zeros(5, dtype=int)
    assert [len(b[1]) for b in iterate_batches(x, y, 4, drop_last=False)] == [4]
