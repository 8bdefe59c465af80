import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cloth.data import (Dataset, SyntheticSpec, area_downsample, batch_iter, load_cache, load_idx,
                        make_gaussian_shift, make_two_moons_rotated, parse_idx_images, parse_idx_labels,
                        rotation_matrix, save_cache, split_holdout, write_idx)
from cloth.errors import DataError, FormatError, ParameterError
from cloth.numerics import SeededStream


def test_gaussian_shift_shapes_and_label_shift():
    src, tgt = make_gaussian_shift(SyntheticSpec(seed=1))
    assert len(src) == len(tgt) == 1500 and src.dim == 2
    counts = np.bincount(tgt.evaluation_labels(), minlength=3) / len(tgt)
    np.testing.assert_allclose(counts, [0.5, 0.3, 0.2], atol=0.04)
    src_counts = np.bincount(src.training_labels(), minlength=3) / len(src)
    assert src_counts.max() - src_counts.min() < 0.06


def test_gaussian_shift_deterministic_per_seed():
    a, _ = make_gaussian_shift(SyntheticSpec(seed=4))
    b, _ = make_gaussian_shift(SyntheticSpec(seed=4))
    c, _ = make_gaussian_shift(SyntheticSpec(seed=5))
    np.testing.assert_array_equal(a.features, b.features)
    assert not np.array_equal(a.features, c.features)


def test_spec_validation():
    with pytest.raises(ParameterError):
        make_gaussian_shift(SyntheticSpec(proportions=[0.5, 0.5, 0.5]))
    with pytest.raises(ParameterError):
        make_gaussian_shift(SyntheticSpec(noise=0.0))
    with pytest.raises(ParameterError):
        make_gaussian_shift(SyntheticSpec(translation=[1.0]))


@given(st.floats(-360, 360))
def test_rotation_is_orthogonal(angle):
    r = rotation_matrix(2, angle)
    np.testing.assert_allclose(r @ r.T, np.eye(2), atol=1e-12)


def test_two_moons():
    src, tgt = make_two_moons_rotated(200, 45.0, seed=2)
    assert src.num_classes == 2 and len(tgt) == 200


def test_target_labels_hidden_from_training():
    _, tgt = make_gaussian_shift(SyntheticSpec(n=30))
    with pytest.raises(DataError):
        tgt.training_labels()
    assert tgt.evaluation_labels().shape == (30,)


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.array([[np.nan]]), None, "source", 2)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1)), [0, 2], "source", 2)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1)), None, "other", 2)


def test_holdout_split_partitions_rows():
    src, _ = make_gaussian_shift(SyntheticSpec(n=100))
    train, hold = split_holdout(src, 0.1, SeededStream(0))
    assert len(train) == 90 and len(hold) == 10
    rows = {tuple(r) for r in train.features} | {tuple(r) for r in hold.features}
    assert len(rows) == 100
    same, none = split_holdout(src, 0.0, SeededStream(0))
    assert same is src and none is None


@given(st.integers(1, 50), st.integers(1, 50))
def test_batches_cover_each_epoch_without_repeats(n, b):
    b = min(b, n)
    it = batch_iter(n, b, SeededStream(0))
    seen = []
    while len(seen) < n:
        seen.extend(next(it).tolist())
    assert sorted(seen) == list(range(n))


def test_drop_last_keeps_full_batches():
    it = batch_iter(10, 4, SeededStream(0), drop_last=True)
    assert all(len(next(it)) == 4 for _ in range(10))
    with pytest.raises(ParameterError):
        next(batch_iter(3, 4, SeededStream(0)))


def test_idx_round_trip(tmp_path, gen):
    imgs = gen.integers(0, 256, size=(5, 16, 16), dtype=np.uint8)
    labels = np.array([0, 3, 9, 1, 2])
    write_idx(tmp_path / "i", tmp_path / "l", imgs, labels)
    ds = load_idx(tmp_path / "i", tmp_path / "l", downsample_to=8)
    assert ds.features.shape == (5, 64)
    np.testing.assert_array_equal(ds.evaluation_labels(), labels)
    expected = imgs[0].reshape(8, 2, 8, 2).mean(axis=(1, 3)) / 255.0
    np.testing.assert_allclose(ds.features[0].reshape(8, 8), expected)


def test_area_downsample_preserves_mean(gen):
    imgs = gen.uniform(size=(3, 28, 28))
    out = area_downsample(imgs, 8)
    np.testing.assert_allclose(out.mean(axis=(1, 2)), imgs.mean(axis=(1, 2)))


def test_idx_errors():
    with pytest.raises(FormatError):
        parse_idx_images(b"\x00\x00\x08\x03\x00\x00\x00\x02\x00\x00\x00\x02\x00\x00\x00\x02\x00")
    with pytest.raises(FormatError):
        parse_idx_labels(b"\x00\x00\x08\x03")


def test_cache_round_trip(tmp_path):
    src, tgt = make_gaussian_shift(SyntheticSpec(n=40))
    save_cache(tmp_path / "s.bin", src)
    back = load_cache(tmp_path / "s.bin", "source")
    np.testing.assert_array_equal(back.features, src.features)
    np.testing.assert_array_equal(back.training_labels(), src.training_labels())
