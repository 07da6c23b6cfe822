import gzip

import numpy as np
import pytest

from shacnn.cli import builtin_path
from shacnn.data_io import (CIFAR10_RECORD, CIFAR100_RECORD, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, DataFormatError,
                            data_dir, load_cifar10, load_cifar100, load_mnist, make_synthetic, parse_idx,
                            standardize, train_val_split, write_idx)
from shacnn.label_tree import load_tree
from toys import tree_for


def mnist_fixture(tmp_path, n=2, gz=False):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (n, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, n, dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lbl.idx"
    write_idx(ip, images, IDX_IMAGES_MAGIC)
    write_idx(lp, labels, IDX_LABELS_MAGIC)
    if gz:
        for p in (ip, lp):
            p.with_suffix(".idx.gz").write_bytes(gzip.compress(p.read_bytes()))
        ip, lp = ip.with_suffix(".idx.gz"), lp.with_suffix(".idx.gz")
    return ip, lp, images, labels


def hand_idx_header(magic, *dims):
    return magic.to_bytes(4, "big") + b"".join(d.to_bytes(4, "big") for d in dims)


# --- IDX -------------------------------------------------------------------------

@pytest.mark.parametrize("gz", [False, True])
def test_mnist_fixture_round_trip(tmp_path, gz):
    ip, lp, images, labels = mnist_fixture(tmp_path, gz=gz)
    ds = load_mnist(ip, lp)
    assert ds.images.shape == (2, 1, 28, 28)
    assert np.array_equal(np.rint(ds.images[:, 0] * 255).astype(np.uint8), images)
    assert ds.fine_labels.tolist() == labels.tolist()
    assert set(ds.checksums) == {ip.name, lp.name}


def test_hand_built_idx_bytes():
    payload = bytes([0, 255, 17, 3])
    arr = parse_idx(hand_idx_header(IDX_IMAGES_MAGIC, 1, 2, 2) + payload, IDX_IMAGES_MAGIC)
    assert arr.tolist() == [[[0, 255], [17, 3]]]


def test_labels_magic_rejected_as_images(tmp_path):
    ip, lp, _, _ = mnist_fixture(tmp_path)
    with pytest.raises(DataFormatError, match="magic"):
        load_mnist(lp, lp)


@pytest.mark.parametrize("blob,needle", [
    (b"\x00\x00", "shorter"),
    (hand_idx_header(IDX_IMAGES_MAGIC, 1, 2, 2) + b"\x00" * 3, "payload"),
    (hand_idx_header(IDX_IMAGES_MAGIC, 1, 2, 2) + b"\x00" * 5, "payload"),
    (IDX_IMAGES_MAGIC.to_bytes(4, "big") + b"\x00\x00\x00\x01", "header"),
    (hand_idx_header(0x0D03, 1, 1, 1) + b"\x00" * 4, "magic"),
])
def test_malformed_idx(blob, needle):
    with pytest.raises(DataFormatError, match=needle):
        parse_idx(blob, IDX_IMAGES_MAGIC)


def test_mnist_count_mismatch(tmp_path):
    ip, _, _, _ = mnist_fixture(tmp_path, n=3)
    lp = tmp_path / "short.idx"
    write_idx(lp, np.zeros(2, np.uint8), IDX_LABELS_MAGIC)
    with pytest.raises(DataFormatError, match="3 items"):
        load_mnist(ip, lp)


def test_mnist_label_range(tmp_path):
    ip, _, _, _ = mnist_fixture(tmp_path)
    lp = tmp_path / "bad.idx"
    write_idx(lp, np.array([1, 12], np.uint8), IDX_LABELS_MAGIC)
    with pytest.raises(DataFormatError, match="range"):
        load_mnist(ip, lp)


def test_official_mnist_headers():
    root = data_dir() / "mnist"
    ip = root / "train-images.idx3-ubyte"
    if not ip.exists():
        pytest.skip("MNIST not present in the default data directory")
    ds = load_mnist(ip, root / "train-labels.idx1-ubyte")
    assert len(ds) == 60000
    assert ds.images.shape[1:] == (1, 28, 28)


# --- CIFAR -----------------------------------------------------------------------

def cifar_records(rng, n, coarse=None, fine=None):
    pix = rng.integers(0, 256, (n, 3072), dtype=np.uint8)
    cols = []
    if coarse is not None:
        cols.append(np.asarray(coarse, np.uint8)[:, None])
    cols.append(np.asarray(fine, np.uint8)[:, None])
    return np.concatenate(cols + [pix], axis=1), pix


def test_cifar10_single_record(tmp_path):
    rng = np.random.default_rng(1)
    rec, pix = cifar_records(rng, 1, fine=[7])
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(rec.tobytes())
    ds = load_cifar10([path])
    assert ds.fine_labels.tolist() == [7]
    assert np.array_equal(np.rint(ds.images * 255).astype(np.uint8).reshape(1, -1), pix)
    # channel-planar layout: the first 1024 bytes are red, row-major
    assert np.rint(ds.images[0, 0, 0, 1] * 255) == pix[0, 1]
    assert np.rint(ds.images[0, 2, 31, 31] * 255) == pix[0, 3071]


def test_cifar10_multiple_batches(tmp_path):
    rng = np.random.default_rng(2)
    paths = []
    for i in range(2):
        rec, _ = cifar_records(rng, 3, fine=[i, 2, 9])
        paths.append(tmp_path / f"b{i}.bin")
        paths[-1].write_bytes(rec.tobytes())
    assert load_cifar10(paths).fine_labels.tolist() == [0, 2, 9, 1, 2, 9]


@pytest.mark.parametrize("size", [0, 3072, CIFAR10_RECORD + 1])
def test_cifar10_record_size_error(tmp_path, size):
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(size))
    with pytest.raises(DataFormatError, match="multiple"):
        load_cifar10([path])


def test_cifar10_label_range(tmp_path):
    rec, _ = cifar_records(np.random.default_rng(3), 1, fine=[10])
    (tmp_path / "b.bin").write_bytes(rec.tobytes())
    with pytest.raises(DataFormatError, match="label"):
        load_cifar10([tmp_path / "b.bin"])


def test_cifar100_round_trip_and_cross_check(tmp_path):
    tree = load_tree(builtin_path("trees", "cifar100"))
    rng = np.random.default_rng(4)
    fine = np.array([0, 1, 99, 50])
    true_coarse = tree.level_label_matrix(fine)[:, 1]
    rec, pix = cifar_records(rng, 4, coarse=true_coarse, fine=fine)
    path = tmp_path / "train.bin"
    path.write_bytes(rec.tobytes())
    ds = load_cifar100(path, tree)
    assert ds.warnings == 0
    assert ds.fine_labels.tolist() == fine.tolist()
    assert np.array_equal(np.rint(ds.images * 255).astype(np.uint8).reshape(4, -1), pix)

    wrong = (true_coarse + 1) % 20
    rec, _ = cifar_records(rng, 4, coarse=wrong, fine=fine)
    path.write_bytes(rec.tobytes())
    ds = load_cifar100(path, tree)
    assert ds.warnings == 4
    assert len(ds) == 4


def test_cifar100_errors(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(CIFAR10_RECORD))
    with pytest.raises(DataFormatError):
        load_cifar100(path)
    rec, _ = cifar_records(np.random.default_rng(5), 1, coarse=[0], fine=[100])
    path.write_bytes(rec.tobytes())
    with pytest.raises(DataFormatError, match="fine"):
        load_cifar100(path)
    assert CIFAR100_RECORD == 3074


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_cifar10([tmp_path / "nope.bin"])


# --- synthetic -------------------------------------------------------------------

def test_synthetic_empty():
    ds = make_synthetic(tree_for([2, 2]), 0)
    assert len(ds) == 0


def test_synthetic_deterministic():
    tree = tree_for([3, 3])
    a = make_synthetic(tree, 10, seed=4)
    b = make_synthetic(tree, 10, seed=4)
    c = make_synthetic(tree, 10, seed=5)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.fine_labels.tobytes() == b.fine_labels.tobytes()
    assert a.images.tobytes() != c.images.tobytes()
    assert np.bincount(a.fine_labels).tolist() == [10] * 6


def test_synthetic_coarse_level_linearly_separable():
    tree = tree_for([3, 3])
    train = make_synthetic(tree, 200, seed=0)
    test = make_synthetic(tree, 100, seed=1)
    coarse = lambda ds: tree.level_label_matrix(ds.fine_labels)[:, 0]  # noqa: E731
    X = np.c_[train.images.reshape(len(train), -1), np.ones(len(train))]
    Y = np.eye(2)[coarse(train)] * 2 - 1
    w, *_ = np.linalg.lstsq(X, Y, rcond=None)
    Xt = np.c_[test.images.reshape(len(test), -1), np.ones(len(test))]
    acc = float(((Xt @ w).argmax(axis=1) == coarse(test)).mean())
    assert acc >= 0.9


def test_split_and_standardize():
    ds = make_synthetic(tree_for([2, 2]), 25, seed=0)
    tr, va = train_val_split(ds, 0.1, seed=3)
    assert len(tr) == 90 and len(va) == 10
    assert set(np.concatenate([tr.fine_labels, va.fine_labels]).tolist()) <= {0, 1, 2, 3}
    tr2, va2 = train_val_split(ds, 0.1, seed=3)
    assert tr.images.tobytes() == tr2.images.tobytes()
    standardize(tr, va)
    np.testing.assert_allclose(tr.images.mean(), 0.0, atol=1e-12)


def test_data_dir_resolution(monkeypatch, tmp_path):
    monkeypatch.setenv("SHACNN_DATA_DIR", str(tmp_path))
    assert data_dir() == tmp_path
    assert data_dir("/x") == type(tmp_path)("/x")
    monkeypatch.delenv("SHACNN_DATA_DIR")
    assert data_dir().name == "shacnn"
