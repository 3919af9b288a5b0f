import hashlib

import numpy as np
import pytest

from xjepa.dataset import (
    NUM_CLASSES,
    POINTS_PER_OBJECT,
    TEST,
    TRAIN,
    ShapeClass,
    gen_dataset,
    gen_shape,
    instance_seed,
    load_dataset,
    sample_surface,
    save_dataset,
)
from xjepa.evaluation import FeatureMatrix, linear_probe


def test_class_enumeration_is_stable():
    assert [c.label for c in ShapeClass] == ["sphere", "cube", "cylinder", "cone", "torus", "ellipsoid",
                                              "pyramid", "capsule"]
    assert NUM_CLASSES == 8


class TestGenShape:
    def test_clean_sphere_is_on_unit_sphere(self):
        c = gen_shape(ShapeClass.SPHERE, 7, noise=0.0)
        np.testing.assert_allclose(np.linalg.norm(c.positions, axis=1), 1.0, atol=1e-6)

    def test_deterministic(self):
        a, b = gen_shape(ShapeClass.TORUS, 123), gen_shape(ShapeClass.TORUS, 123)
        for name in ("positions", "colors", "normals"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_cube_points_lie_on_faces(self):
        rng = np.random.default_rng(5)
        pos, normals = sample_surface(ShapeClass.CUBE, rng, 4096)
        half = np.abs(pos).max(axis=0)
        on_face = np.isclose(np.abs(pos), half, atol=1e-6).any(axis=1)
        assert on_face.all()
        # each normal points along the axis of the face it was sampled on
        axis = np.abs(normals).argmax(axis=1)
        np.testing.assert_allclose(np.abs(pos[np.arange(len(pos)), axis]), half[axis], atol=1e-12)

    @pytest.mark.parametrize("cls", list(ShapeClass))
    def test_normalized_with_unit_normals_and_colors(self, cls):
        c = gen_shape(cls, 11)
        assert c.positions.shape == (POINTS_PER_OBJECT, 3) and c.positions.dtype == np.float32
        assert np.linalg.norm(c.positions.astype(np.float64).mean(axis=0)) <= 1e-6
        assert abs(np.linalg.norm(c.positions.astype(np.float64), axis=1).max() - 1) <= 1e-6
        np.testing.assert_allclose(np.linalg.norm(c.normals, axis=1), 1.0, atol=1e-6)
        assert c.colors.min() >= 0 and c.colors.max() <= 1
        assert c.label == int(cls)

    @pytest.mark.parametrize("cls", [ShapeClass.SPHERE, ShapeClass.CUBE, ShapeClass.CONE])
    def test_clean_normals_point_outward(self, cls):
        c = gen_shape(cls, 3, noise=0.0, orientation="none")
        assert np.mean(np.sum(c.positions * c.normals, axis=1) > 0) > 0.9

    def test_bad_orientation(self):
        with pytest.raises(ValueError):
            gen_shape(ShapeClass.CUBE, 0, orientation="tilted")


class TestGenDataset:
    def test_split_arithmetic(self):
        ds = gen_dataset(10, seed=0, test_fraction=0.5, n_points=64)
        assert len(ds.train()) == 40 and len(ds.test()) == 40
        for split in (ds.train(), ds.test()):
            assert np.bincount(split.labels, minlength=8).tolist() == [5] * 8

    def test_ids_unique_and_splits_disjoint(self):
        ds = gen_dataset(6, seed=3, test_fraction=1 / 3, n_points=32)
        assert len(set(ds.object_ids.tolist())) == len(ds)
        assert not set(ds.train().object_ids.tolist()) & set(ds.test().object_ids.tolist())
        assert set(np.unique(ds.splits)) == {TRAIN, TEST}

    def test_same_seed_identical(self):
        a = gen_dataset(3, seed=9, test_fraction=0.5, n_points=64)
        b = gen_dataset(3, seed=9, test_fraction=0.5, n_points=64)
        assert [c.positions.tobytes() for c in a.clouds] == [c.positions.tobytes() for c in b.clouds]
        assert (a.splits == b.splits).all()

    def test_different_seeds_differ(self):
        a = gen_dataset(25, seed=1, test_fraction=0.5, n_points=64)
        b = gen_dataset(25, seed=2, test_fraction=0.5, n_points=64)
        h = lambda c: hashlib.sha256(c.positions.tobytes()).digest()  # noqa: E731
        differ = np.mean([h(x) != h(y) for x, y in zip(a.clouds, b.clouds)])
        assert differ >= 0.99

    def test_instance_seeds_distinct(self):
        seeds = {instance_seed(0, i) for i in range(1000)}
        assert len(seeds) == 1000
        assert instance_seed(0, 5) != instance_seed(1, 5)

    @pytest.mark.parametrize("n,frac", [(1, 0.5), (4, 0.0), (4, 1.0)])
    def test_invalid_sizes(self, n, frac):
        with pytest.raises(ValueError):
            gen_dataset(n, seed=0, test_fraction=frac, n_points=16)

    def test_fraction_keeps_balance(self):
        ds = gen_dataset(10, seed=0, test_fraction=0.5, n_points=16).train()
        sub = ds.fraction(0.4)
        assert np.bincount(sub.labels).tolist() == [2] * 8


def _eigen_features(ds):
    rows = []
    for c in ds.clouds:
        p = c.positions.astype(np.float64)
        rows.append(np.sort(np.linalg.eigvalsh(np.cov(p.T)))[::-1])
    return FeatureMatrix(np.array(rows), ds.labels, ds.object_ids)


def test_dataset_is_linearly_learnable_from_covariance_eigenvalues():
    ds = gen_dataset(40, seed=0, test_fraction=0.5)
    result = linear_probe(_eigen_features(ds.train()), _eigen_features(ds.test()), reg_lambda=1e-4)
    assert result.test_accuracy >= 0.95


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        ds = gen_dataset(2, seed=4, test_fraction=0.5, n_points=32)
        save_dataset(ds, tmp_path / "a.xjds")
        back = load_dataset(tmp_path / "a.xjds")
        save_dataset(back, tmp_path / "b.xjds")
        assert (tmp_path / "a.xjds").read_bytes() == (tmp_path / "b.xjds").read_bytes()
        assert (back.object_ids == ds.object_ids).all() and (back.splits == ds.splits).all()
        for x, y in zip(ds.clouds, back.clouds):
            assert x.positions.tobytes() == y.positions.tobytes()
            assert x.normals.tobytes() == y.normals.tobytes()

    def test_header_layout(self, tmp_path):
        ds = gen_dataset(2, seed=0, test_fraction=0.5, n_points=8)
        save_dataset(ds, tmp_path / "d.xjds")
        raw = (tmp_path / "d.xjds").read_bytes()
        assert raw[:4] == b"XJDS"
        assert np.frombuffer(raw[4:16], dtype="<u4").tolist() == [1, 16, 8]
        assert len(raw) == 16 + 16 * (8 + 1 + 3 * 8 * 3 * 4 + 1)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(ValueError):
            load_dataset(tmp_path / "x")
