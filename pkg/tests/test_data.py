import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bhddbench.data import (
    IMAGE_MAGIC,
    LABEL_MAGIC,
    BatchPlan,
    Dataset,
    IDXCountMismatchError,
    IDXError,
    IDXLabelError,
    IDXMagicError,
    IDXShapeError,
    IDXTruncatedError,
    decode_one_hot,
    find_split_files,
    load_idx,
    normalize,
    one_hot,
    read_idx_labels,
    shuffled_batches,
    subset,
    subset_indices,
    train_val_split,
    write_dataset,
)


def handmade_images(n=2):
    """IDX image file assembled byte by byte."""
    header = bytes([0, 0, 0x08, 0x03]) + n.to_bytes(4, "big") + (28).to_bytes(4, "big") * 2
    pixels = bytes((i * 7 + k) % 256 for k in range(n) for i in range(784))
    return header + pixels


def handmade_labels(labels):
    return bytes([0, 0, 0x08, 0x01]) + len(labels).to_bytes(4, "big") + bytes(labels)


def write(path, data):
    path.write_bytes(data)
    return path


def test_handmade_fixture_round_trip(tmp_path):
    img = write(tmp_path / "img", handmade_images(2))
    lab = write(tmp_path / "lab", handmade_labels([3, 9]))
    ds = load_idx(img, lab)
    assert len(ds) == 2
    assert ds.images.shape == (2, 28, 28) and ds.images.dtype == np.uint8
    expected = np.frombuffer(handmade_images(2)[16:], dtype=np.uint8).reshape(2, 28, 28)
    np.testing.assert_array_equal(ds.images, expected)
    np.testing.assert_array_equal(ds.labels, [3, 9])


def test_write_read_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.integers(0, 256, (5, 28, 28), dtype=np.uint8), rng.integers(0, 10, 5))
    write_dataset(ds, tmp_path / "i.idx", tmp_path / "l.idx")
    assert (tmp_path / "i.idx").read_bytes()[:16] == struct.pack(">IIII", IMAGE_MAGIC, 5, 28, 28)
    back = load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    write_dataset(back, tmp_path / "i2.idx", tmp_path / "l2.idx")
    assert (tmp_path / "i2.idx").read_bytes() == (tmp_path / "i.idx").read_bytes()


def test_gzip_files_are_read(tmp_path):
    (tmp_path / "i.gz").write_bytes(gzip.compress(handmade_images(1)))
    (tmp_path / "l.gz").write_bytes(gzip.compress(handmade_labels([4])))
    assert load_idx(tmp_path / "i.gz", tmp_path / "l.gz").labels.tolist() == [4]


def test_truncated_header(tmp_path):
    img = write(tmp_path / "img", handmade_images(2)[:10])
    with pytest.raises(IDXTruncatedError, match="truncated at offset 10") as e:
        load_idx(img, write(tmp_path / "lab", handmade_labels([1, 2])))
    assert e.value.offset == 10


def test_truncated_payload(tmp_path):
    img = write(tmp_path / "img", handmade_images(2)[:-5])
    with pytest.raises(IDXTruncatedError):
        load_idx(img, write(tmp_path / "lab", handmade_labels([1, 2])))


def test_bad_magic(tmp_path):
    data = bytearray(handmade_images(1))
    data[2] = 0x09
    with pytest.raises(IDXMagicError) as e:
        load_idx(write(tmp_path / "img", bytes(data)), write(tmp_path / "lab", handmade_labels([1])))
    assert e.value.offset == 0
    with pytest.raises(IDXMagicError):  # label file handed in as images
        load_idx(tmp_path / "lab", tmp_path / "lab")


def test_invalid_label(tmp_path):
    lab = write(tmp_path / "lab", handmade_labels([1, 10]))
    with pytest.raises(IDXLabelError, match="invalid label 10") as e:
        read_idx_labels(lab)
    assert e.value.offset == 9


def test_count_mismatch(tmp_path):
    img = write(tmp_path / "img", handmade_images(2))
    with pytest.raises(IDXCountMismatchError):
        load_idx(img, write(tmp_path / "lab", handmade_labels([1, 2, 3])))
    with pytest.raises(IDXCountMismatchError):
        load_idx(write(tmp_path / "img2", handmade_images(2) + b"\x00"), tmp_path / "lab")


def test_wrong_image_geometry(tmp_path):
    data = bytes([0, 0, 8, 3]) + struct.pack(">III", 1, 27, 28) + bytes(27 * 28)
    with pytest.raises(IDXShapeError):
        load_idx(write(tmp_path / "img", data), write(tmp_path / "lab", handmade_labels([0])))


def test_error_classes_are_distinct():
    classes = [IDXMagicError, IDXTruncatedError, IDXCountMismatchError, IDXLabelError, IDXShapeError]
    assert len(set(classes)) == 5 and all(issubclass(c, IDXError) for c in classes)
    for a in classes:
        for b in classes:
            assert (a is b) or not issubclass(a, b)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_idx(tmp_path / "nope", tmp_path / "nope2")


def test_find_split_files_variants(tmp_path):
    ds = Dataset(np.zeros((1, 28, 28), np.uint8), np.array([0]))
    write_dataset(ds, tmp_path / "train-images-idx3-ubyte.gz", tmp_path / "train-labels.idx1-ubyte")
    img, lab = find_split_files(tmp_path, "train")
    assert img.name.endswith(".gz") and lab.name == "train-labels.idx1-ubyte"
    with pytest.raises(FileNotFoundError):
        find_split_files(tmp_path, "test")


# -- transforms --------------------------------------------------------------------


def test_normalize_values():
    b = np.array([[0, 255, 51] + [0] * 781], dtype=np.uint8).reshape(1, 28, 28)
    x = normalize(b)
    assert x.shape == (1, 1, 28, 28)
    assert x[0, 0, 0, 0] == 0.0 and x[0, 0, 0, 1] == 1.0
    assert x[0, 0, 0, 2] == pytest.approx(0.2)
    allb = np.arange(256, dtype=np.uint8).repeat(4)[:784].reshape(1, 28, 28)
    y = normalize(allb)
    np.testing.assert_array_equal(np.floor(y * 255 + 0.5).astype(np.uint8), allb[:, None])
    flat = normalize(np.arange(256, dtype=np.uint8).repeat(4)[:784].reshape(1, 28, 28)).ravel()
    assert np.all(np.diff(flat) >= 0) and flat.min() >= 0 and flat.max() <= 1


def test_one_hot_and_decode():
    np.testing.assert_array_equal(one_hot([3])[0], np.eye(10)[3])
    v = np.arange(10).repeat(3)
    oh = one_hot(v)
    np.testing.assert_array_equal(oh.sum(axis=1), 1)
    np.testing.assert_array_equal(decode_one_hot(oh), v)
    assert decode_one_hot(np.array([[0.5, 0.5, 0]]))[0] == 0
    with pytest.raises(ValueError):
        one_hot([10])


# -- batching and subsets --------------------------------------------------------------


def test_batches_for_ten_items():
    sizes = [len(b) for b in shuffled_batches(10, BatchPlan(batch_size=3), 0)]
    assert sizes == [3, 3, 3, 1]
    assert [len(b) for b in shuffled_batches(10, BatchPlan(3, drop_last=True), 0)] == [3, 3, 3]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 500), st.integers(1, 64), st.integers(0, 2**31), st.integers(0, 100))
def test_batches_partition_and_are_deterministic(n, bs, seed, epoch):
    plan = BatchPlan(bs, seed)
    a = shuffled_batches(n, plan, epoch)
    b = shuffled_batches(n, plan, epoch)
    assert all(np.array_equal(x, y) for x, y in zip(a, b)) and len(a) == len(b)
    flat = np.concatenate(a) if a else np.array([], dtype=int)
    np.testing.assert_array_equal(np.sort(flat), np.arange(n))


def test_epochs_differ():
    plan = BatchPlan(16, 42)
    assert not np.array_equal(np.concatenate(shuffled_batches(100, plan, 1)),
                              np.concatenate(shuffled_batches(100, plan, 2)))


def balanced(n_per_class, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(10).repeat(n_per_class))
    return Dataset(rng.integers(0, 256, (len(labels), 28, 28), dtype=np.uint8), labels)


def test_subset_examples():
    ds = balanced(30)
    np.testing.assert_array_equal(subset_indices(ds, len(ds)), np.arange(len(ds)))
    s = subset(ds, 100, 42)
    np.testing.assert_array_equal(np.bincount(s.labels, minlength=10), 10)
    np.testing.assert_array_equal(subset(ds, 100, 42).images, s.images)
    assert not np.array_equal(subset_indices(ds, 100, 1), subset_indices(ds, 100, 2))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=10, max_size=10), st.data())
def test_subset_is_near_equal_where_possible(counts, data):
    labels = np.repeat(np.arange(10), counts)
    ds = Dataset(np.zeros((len(labels), 28, 28), np.uint8), labels)
    n = data.draw(st.integers(10, len(labels)))
    got = np.bincount(labels[subset_indices(ds, n, 3)], minlength=10)
    assert got.sum() == n
    # water-filling: a class with items left is at most one below the largest share
    open_ = got < np.array(counts)
    assert np.all(got[open_] >= got.max() - 1)


def test_subset_errors():
    ds = Dataset(np.zeros((20, 28, 28), np.uint8), np.repeat(np.arange(2), 10))
    with pytest.raises(ValueError, match="absent"):
        subset(ds, 15)
    with pytest.raises(ValueError):
        subset(ds, 21)


def test_train_val_split_is_disjoint_and_seeded():
    ds = balanced(12)
    tr, va = train_val_split(ds, 20, 42)
    assert len(tr) == 100 and len(va) == 20 and va.split == "val"
    tr2, va2 = train_val_split(ds, 20, 42)
    np.testing.assert_array_equal(va.images, va2.images)
    both = np.concatenate([tr.images.reshape(len(tr), -1), va.images.reshape(len(va), -1)])
    assert len(np.unique(both, axis=0)) == len(ds)
