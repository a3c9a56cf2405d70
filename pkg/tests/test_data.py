import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compmod.data import (
    AugmentOp,
    ConsistencyError,
    Dataset,
    SplitSemanticsSpec,
    augment,
    augment_pair,
    batch_iter,
    gen_split_semantics,
    load_dataset_cache,
    load_idx,
    read_idx,
    save_dataset_cache,
    train_test_split,
    write_idx,
)
from compmod.errors import ConfigError, ContractError, FormatError
from compmod.probe import linear_probe


def test_split_semantics_noiseless_and_deterministic():
    spec = SplitSemanticsSpec(num_classes=3, dim=8, samples_per_class=4, noise_scale=0.0, seed=1)
    ds = gen_split_semantics(spec)
    for c in range(3):
        rows = ds.x[ds.y == c]
        assert np.all(rows == rows[0])
    again = gen_split_semantics(spec)
    assert again.x.tobytes() == ds.x.tobytes() and again.y.tobytes() == ds.y.tobytes()


def test_split_semantics_spec_validation():
    for bad in (dict(dim=7), dict(mask_width=1.0), dict(noise_scale=-1.0), dict(num_classes=1)):
        with pytest.raises(ConfigError):
            SplitSemanticsSpec(**bad)


def test_split_semantics_high_snr_is_linearly_separable():
    spec = SplitSemanticsSpec(num_classes=10, dim=64, samples_per_class=100,
                              center_scale=1.0, noise_scale=0.1, seed=2)
    train, test = train_test_split(gen_split_semantics(spec), 0.3, seed=0)
    assert linear_probe(train.x, train.y, test.x, test.y).accuracy >= 0.99


def test_window_mask_full_width_and_jitter_identity():
    rng = np.random.default_rng(0)
    x = np.arange(1.0, 9.0)
    assert np.all(augment(x, AugmentOp("window_mask", width=0.999), rng) == 0.0)
    np.testing.assert_array_equal(augment(x, AugmentOp("gaussian_jitter", sigma=0.0), rng), x)


def test_window_mask_half_width_enumerated_offsets():
    x = np.arange(1.0, 9.0)
    op = AugmentOp("window_mask", width=0.5)
    seen = set()
    rng = np.random.default_rng(1)
    for _ in range(400):
        out = augment(x, op, rng)
        zeros = np.flatnonzero(out == 0.0)
        assert len(zeros) == 4
        assert np.all(np.diff(zeros) == 1)
        off = zeros[0]
        expected = x.copy()
        expected[off:off + 4] = 0.0
        np.testing.assert_array_equal(out, expected)
        seen.add(int(off))
    assert seen == {0, 1, 2, 3, 4}


def test_window_crop_rescales_kept_block():
    x = np.ones(8)
    out = augment(x, AugmentOp("window_crop", width=0.25), np.random.default_rng(2))
    kept = out[out != 0]
    assert len(kept) == 2 and np.all(kept == 4.0)


def test_feature_drop_extremes():
    x = np.arange(1.0, 6.0)
    rng = np.random.default_rng(3)
    np.testing.assert_array_equal(augment(x, AugmentOp("feature_drop", p=0.0), rng), x)
    assert np.all(augment(x, AugmentOp("feature_drop", p=1.0), rng) == 0.0)


def test_augment_op_validation():
    for bad in (dict(kind="rotate"), dict(kind="window_mask"), dict(kind="gaussian_jitter", sigma=-1), dict(kind="feature_drop", p=2)):
        with pytest.raises(ConfigError):
            AugmentOp(**bad)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["window_mask", "window_crop", "gaussian_jitter", "feature_drop"]),
       st.integers(2, 40))
def test_augment_preserves_shape_and_finiteness(seed, kind, dim):
    rng = np.random.default_rng(seed)
    op = AugmentOp(kind, width=0.3, sigma=0.5, p=0.3)
    out = augment(rng.normal(size=dim), op, rng)
    assert out.shape == (dim,) and np.all(np.isfinite(out))


def test_complementary_pairing_splits_features():
    x = np.arange(1.0, 65.0)
    ops = (AugmentOp("window_mask", width=0.5),)
    rng = np.random.default_rng(4)
    for _ in range(50):
        v1, v2, _ = augment_pair(x, ops, rng, "complementary")
        kept1, kept2 = v1 != 0, v2 != 0
        assert kept1.sum() == 32 and kept2.sum() == 32
        assert not np.any(kept1 & kept2)
        np.testing.assert_array_equal(v1 + v2, x)


def test_independent_window_masks_overlap_less_than_full():
    x = np.arange(1.0, 65.0)
    ops = (AugmentOp("window_mask", width=0.5),)
    rng = np.random.default_rng(5)
    overlaps = []
    for _ in range(200):
        v1, v2, _ = augment_pair(x, ops, rng)
        overlaps.append(np.sum((v1 != 0) & (v2 != 0)))
    assert max(overlaps) <= 32 < 64
    assert np.mean(overlaps) < 64


def _small_ds(n=23, d=6):
    rng = np.random.default_rng(6)
    return Dataset(rng.normal(size=(n, d)), rng.integers(0, 3, size=n))


def test_batch_iter_determinism_and_coverage():
    ds = _small_ds()
    a = list(batch_iter(ds, 5, seed=11))
    b = list(batch_iter(ds, 5, seed=11))
    assert len(a) == 4
    for x, y in zip(a, b):
        assert x.x1.tobytes() == y.x1.tobytes() and x.x2.tobytes() == y.x2.tobytes()
    emitted = np.concatenate([batch.indices for batch in a])
    assert len(set(emitted.tolist())) == 20
    perm = np.random.default_rng(11).permutation(23)
    assert set(emitted.tolist()) == set(perm[:20].tolist())
    assert all(not np.array_equal(batch.x1, batch.x2) for batch in a)
    c = list(batch_iter(ds, 5, seed=12))
    assert c[0].x1.tobytes() != a[0].x1.tobytes()


def test_batch_iter_contracts():
    ds = _small_ds(4)
    with pytest.raises(ContractError):
        next(batch_iter(ds, 5, 0))
    with pytest.raises(ContractError):
        next(batch_iter(ds, 1, 0))


def _write_raw(path, magic, dims, payload):
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + payload)


def test_idx_header_constants_and_scaling(tmp_path):
    imgs = np.array([[[0, 255], [128, 1]]], dtype=np.uint8)
    write_idx(tmp_path / "img", imgs)
    write_idx(tmp_path / "lab", np.array([7], dtype=np.uint8))
    assert (tmp_path / "img").read_bytes()[:4] == bytes([0, 0, 8, 3])
    assert (tmp_path / "lab").read_bytes()[:4] == bytes([0, 0, 8, 1])
    ds = load_idx(tmp_path / "img", tmp_path / "lab")
    assert ds.x.shape == (1, 4)
    assert ds.x[0, 1] == 1.0 and ds.x[0, 0] == 0.0
    assert ds.y.tolist() == [7]


def test_idx_gzip(tmp_path):
    write_idx(tmp_path / "img.gz", np.zeros((2, 3, 3), dtype=np.uint8))
    with gzip.open(tmp_path / "img.gz") as fh:
        assert fh.read(4) == bytes([0, 0, 8, 3])
    assert read_idx(tmp_path / "img.gz", 2051).shape == (2, 3, 3)


def test_idx_errors(tmp_path):
    _write_raw(tmp_path / "bad", 2049, (1,), b"\x00")
    with pytest.raises(FormatError, match="2049"):
        read_idx(tmp_path / "bad", 2051)
    write_idx(tmp_path / "img", np.zeros((3, 2, 2), dtype=np.uint8))
    write_idx(tmp_path / "lab", np.zeros(2, dtype=np.uint8))
    with pytest.raises(ConsistencyError):
        load_idx(tmp_path / "img", tmp_path / "lab")
    _write_raw(tmp_path / "short", 2051, (2, 2, 2), b"\x00" * 5)
    with pytest.raises(FormatError):
        read_idx(tmp_path / "short", 2051)


def test_dataset_cache_roundtrip(tmp_path):
    ds = gen_split_semantics(SplitSemanticsSpec(num_classes=2, dim=4, samples_per_class=3, seed=9))
    save_dataset_cache(tmp_path / "cache.bin", ds)
    assert (tmp_path / "cache.bin").stat().st_size == 8 * (6 * 4 + 6)
    back = load_dataset_cache(tmp_path / "cache.bin")
    assert back.x.tobytes() == ds.x.tobytes()
    assert back.y.tolist() == ds.y.tolist()
    assert back.meta["spec"]["seed"] == 9


def test_digits_surrogate_is_valid_idx(tmp_path):
    from compmod.data import write_digits_idx

    paths = write_digits_idx(tmp_path, n_train=50, n_test=20, seed=0)
    train = load_idx(*paths["train"])
    test = load_idx(*paths["t10k"])
    assert train.x.shape == (50, 784) and test.x.shape == (20, 784)
    assert 0.0 <= train.x.min() and train.x.max() <= 1.0
    assert set(train.y.tolist()) <= set(range(10))
