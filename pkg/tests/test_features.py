import numpy as np
import pytest

from idam.data import synth_composite, synth_primitive
from idam.errors import ConfigError
from idam.features import (
    FpfhConfig,
    StubExtractor,
    compute_fpfh,
    estimate_normals,
    extract,
    make_extractor,
    pair_features,
)
from idam.geometry import random_transform


def angle_deg(a, b):
    cos = np.abs(np.einsum("ij,ij->i", a, b)) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    return np.degrees(np.arccos(np.clip(cos, -1, 1)))


def test_planar_normals():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-1, 1, 500), rng.uniform(-1, 1, 500), np.zeros(500)])
    n = estimate_normals(pts, 0.2)
    assert np.max(angle_deg(n, np.tile([0, 0, 1.0], (500, 1)))) < 1e-6
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0)


def test_sphere_normals_radial_and_outward():
    pts = synth_primitive("sphere", 20000, np.random.default_rng(1))
    n = estimate_normals(pts, 0.1)
    assert np.max(angle_deg(n, pts)) < 5.0
    assert np.all(np.einsum("ij,ij->i", n, pts) > 0)


def test_sparse_points_fall_back_to_nearest_neighbours():
    rng = np.random.default_rng(2)
    pts = np.column_stack([rng.uniform(-1, 1, 60), rng.uniform(-1, 1, 60), np.zeros(60)])
    n = estimate_normals(pts, 1e-4)  # no point has 3 radius neighbours
    assert np.max(angle_deg(n, np.tile([0, 0, 1.0], (60, 1)))) < 1e-6


def test_too_few_points():
    with pytest.raises(ValueError):
        estimate_normals(np.zeros((2, 3)), 0.1)
    with pytest.raises(ValueError):
        compute_fpfh(np.random.default_rng(0).normal(size=(4, 3)))


def test_pair_features_symmetric_and_in_range():
    rng = np.random.default_rng(3)
    p1, p2 = rng.normal(size=(200, 3)), rng.normal(size=(200, 3))
    n1 = rng.normal(size=(200, 3))
    n2 = rng.normal(size=(200, 3))
    n1 /= np.linalg.norm(n1, axis=1, keepdims=True)
    n2 /= np.linalg.norm(n2, axis=1, keepdims=True)
    a = pair_features(p1, n1, p2, n2)
    np.testing.assert_allclose(a, pair_features(p2, n2, p1, n1), atol=1e-12)
    assert np.all(np.abs(a[:, 0]) <= np.pi) and np.all(np.abs(a[:, 1:]) <= 1.0 + 1e-12)


def test_pair_features_degenerate_is_zero():
    p = np.zeros((1, 3))
    n = np.array([[0, 0, 1.0]])
    np.testing.assert_array_equal(pair_features(p, n, p, n), 0.0)


class TestFpfh:
    @pytest.fixture(scope="class")
    @staticmethod
    def cloud():
        return synth_primitive("box", 768, np.random.default_rng(4))

    def test_shape_and_subhistogram_sums(self, cloud):
        f = compute_fpfh(cloud)
        assert f.shape == (768, 33) and FpfhConfig().dim == 33
        sums = f.reshape(-1, 3, 11).sum(axis=2)
        ok = sums > 0
        np.testing.assert_allclose(sums[ok], 100.0, atol=1e-9)
        assert ok.all()

    @pytest.mark.parametrize("kind", ["box", "cylinder", "composite"])
    def test_rigid_invariance(self, kind):
        rng = np.random.default_rng(5)
        if kind == "composite":
            cloud = synth_composite(3, 768, rng)
        else:
            cloud = synth_primitive(kind, 768, rng)
        f = compute_fpfh(cloud)
        for _ in range(5):
            t = random_transform(180.0, 1.0, rng)
            np.testing.assert_allclose(compute_fpfh(t.apply(cloud)), f, atol=1e-6)

    def test_permutation_equivariance(self, cloud):
        perm = np.random.default_rng(6).permutation(len(cloud))
        np.testing.assert_allclose(compute_fpfh(cloud[perm]), compute_fpfh(cloud)[perm], atol=1e-9)

    def test_deterministic(self, cloud):
        assert compute_fpfh(cloud).tobytes() == compute_fpfh(cloud).tobytes()

    def test_isolated_points_give_zero_rows(self):
        rng = np.random.default_rng(7)
        pts = np.vstack([rng.normal(scale=0.05, size=(30, 3)), [[50.0, 0, 0], [-50.0, 0, 0]]])
        f = compute_fpfh(pts)
        np.testing.assert_array_equal(f[-2:], 0.0)

    def test_radius_too_small(self, cloud):
        with pytest.raises(ValueError):
            compute_fpfh(cloud, FpfhConfig(feature_radius=1e-9))


def test_stub_and_registry():
    ext = make_extractor("stub", dim=5, value=2.0)
    f = extract(ext, np.zeros((4, 3)))
    np.testing.assert_array_equal(f, np.full((4, 5), 2.0))
    assert isinstance(ext, StubExtractor)
    assert make_extractor("fpfh").dim == 33
    with pytest.raises(ConfigError):
        make_extractor("shot")
    with pytest.raises(ConfigError):
        make_extractor("fpfh", not_an_option=1)
    with pytest.raises(ConfigError):
        FpfhConfig(normal_radius=0.0)


def test_extract_rejects_bad_output():
    class Broken:
        name = "broken"

        def __call__(self, pts):
            return np.full((len(pts), 3), np.nan)

    with pytest.raises(ValueError):
        extract(Broken(), np.zeros((3, 3)))
