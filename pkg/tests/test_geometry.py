import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idam.geometry import (
    RigidTransform,
    apply_transform,
    as_points,
    compose,
    compute_metrics,
    euler_deg_to_rotation,
    random_transform,
    rot_z,
    rotation_angle_deg,
    rotation_to_euler_deg,
)


def rand_tf(rng):
    return random_transform(180.0, 2.0, rng)


def test_identity_apply_is_noop():
    pts = np.random.default_rng(0).normal(size=(50, 3))
    np.testing.assert_array_equal(apply_transform(RigidTransform.identity(), pts), pts)


def test_rotation_about_z_moves_x_to_y():
    t = RigidTransform(rot_z(90.0), np.zeros(3))
    np.testing.assert_allclose(apply_transform(t, [[1.0, 0.0, 0.0]]), [[0.0, 1.0, 0.0]], atol=1e-15)


def test_apply_then_inverse_roundtrip():
    rng = np.random.default_rng(1)
    for _ in range(20):
        t = rand_tf(rng)
        pts = rng.normal(size=(30, 3))
        np.testing.assert_allclose(t.inverse().apply(t.apply(pts)), pts, atol=1e-12)


def test_compose_identity_and_inverse():
    rng = np.random.default_rng(2)
    t = rand_tf(rng)
    c = compose(RigidTransform.identity(), t)
    np.testing.assert_allclose(c.rotation, t.rotation, atol=1e-15)
    np.testing.assert_allclose(c.translation, t.translation, atol=1e-15)
    i = compose(t, t.inverse())
    np.testing.assert_allclose(i.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(i.translation, 0.0, atol=1e-12)


def test_compose_matches_sequential_application():
    rng = np.random.default_rng(3)
    for _ in range(50):
        t1, t2 = rand_tf(rng), rand_tf(rng)
        p = rng.normal(size=(1, 3))
        np.testing.assert_allclose(compose(t2, t1).apply(p), t2.apply(t1.apply(p)), atol=1e-12)


def test_compose_associative():
    rng = np.random.default_rng(4)
    for _ in range(50):
        a, b, c = rand_tf(rng), rand_tf(rng), rand_tf(rng)
        left, right = compose(compose(a, b), c), compose(a, compose(b, c))
        np.testing.assert_allclose(left.rotation, right.rotation, atol=1e-9)
        np.testing.assert_allclose(left.translation, right.translation, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rigidity_preserves_pairwise_distances(seed):
    rng = np.random.default_rng(seed)
    t = rand_tf(rng)
    pts = rng.normal(size=(20, 3))
    before = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    moved = t.apply(pts)
    after = np.linalg.norm(moved[:, None] - moved[None], axis=-1)
    np.testing.assert_allclose(after, before, atol=1e-9)


def test_invalid_rotation_rejected():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(2 * np.eye(3), np.zeros(3))


def test_as_points_contract():
    with pytest.raises(ValueError):
        as_points(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        as_points([[0.0, np.nan, 1.0]])
    with pytest.raises(ValueError):
        as_points(np.zeros((4, 2)))


def test_row12_roundtrip():
    t = rand_tf(np.random.default_rng(5))
    back = RigidTransform.from_row12(t.to_row12())
    np.testing.assert_array_equal(back.rotation, t.rotation)
    np.testing.assert_array_equal(back.translation, t.translation)


class TestEuler:
    def test_identity(self):
        np.testing.assert_array_equal(rotation_to_euler_deg(np.eye(3)), [0.0, 0.0, 0.0])

    def test_single_axis_z(self):
        np.testing.assert_allclose(rotation_to_euler_deg(rot_z(45.0)), [45.0, 0.0, 0.0], atol=1e-12)

    def test_roundtrip_random(self):
        rng = np.random.default_rng(6)
        angles = np.column_stack(
            [rng.uniform(-179.9, 180, 1000), rng.uniform(-89, 89, 1000), rng.uniform(-179.9, 180, 1000)]
        )
        worst = max(np.max(np.abs(rotation_to_euler_deg(euler_deg_to_rotation(a)) - a)) for a in angles)
        assert worst < 1e-6

    def test_ranges(self):
        rng = np.random.default_rng(7)
        for _ in range(500):
            e = rotation_to_euler_deg(rand_tf(rng).rotation)
            assert -180 < e[0] <= 180 and -180 < e[2] <= 180 and -90 <= e[1] <= 90

    def test_minus_180_maps_to_plus_180(self):
        np.testing.assert_allclose(rotation_to_euler_deg(rot_z(180.0)), [180.0, 0.0, 0.0], atol=1e-12)

    def test_gimbal_lock_sets_roll_zero(self):
        R = euler_deg_to_rotation([30.0, 90.0, 0.0])
        e = rotation_to_euler_deg(R)
        assert e[2] == 0.0 and e[1] == pytest.approx(90.0)
        np.testing.assert_allclose(euler_deg_to_rotation(e), R, atol=1e-12)


def test_rotation_angle_small_is_accurate():
    # arccos((tr - 1) / 2) would lose everything below ~1e-6 deg here
    assert rotation_angle_deg(rot_z(1e-9)) == pytest.approx(1e-9, rel=1e-6)
    assert rotation_angle_deg(rot_z(120.0)) == pytest.approx(120.0)


class TestMetrics:
    def test_zero_when_equal(self):
        rng = np.random.default_rng(8)
        tfs = [rand_tf(rng) for _ in range(5)]
        m = compute_metrics(tfs, tfs)
        assert (m.rmse_rot_deg, m.mae_rot_deg, m.rmse_trans, m.mae_trans) == (0.0, 0.0, 0.0, 0.0)

    def test_single_angle_error(self):
        m = compute_metrics([RigidTransform(rot_z(10.0), np.zeros(3))], [RigidTransform.identity()])
        assert m.mae_rot_deg == pytest.approx(10 / 3)
        assert m.rmse_rot_deg == pytest.approx(10 / np.sqrt(3))

    def test_translation_offset(self):
        m = compute_metrics([RigidTransform(np.eye(3), [0.3, 0.0, 0.0])], [RigidTransform.identity()])
        assert m.mae_trans == pytest.approx(0.1)
        assert m.rmse_trans == pytest.approx(0.3 / np.sqrt(3))
        assert m.rmse_rot_deg == 0.0

    def test_rmse_at_least_mae(self):
        rng = np.random.default_rng(9)
        m = compute_metrics([rand_tf(rng) for _ in range(10)], [rand_tf(rng) for _ in range(10)])
        assert m.rmse_rot_deg >= m.mae_rot_deg >= 0 and m.rmse_trans >= m.mae_trans >= 0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_metrics([RigidTransform.identity()], [])


class TestRandomTransform:
    def test_zero_ranges_identity(self):
        t = random_transform(0.0, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(t.rotation, np.eye(3))
        np.testing.assert_array_equal(t.translation, np.zeros(3))

    def test_seed_determinism(self):
        a = random_transform(45, 0.5, np.random.default_rng(42))
        b = random_transform(45, 0.5, np.random.default_rng(42))
        np.testing.assert_array_equal(a.rotation, b.rotation)
        np.testing.assert_array_equal(a.translation, b.translation)

    def test_monte_carlo_bounds(self):
        rng = np.random.default_rng(10)
        angles, trans = [], []
        for _ in range(10_000):
            t = random_transform(45.0, 0.5, rng)
            angles.append(rotation_to_euler_deg(t.rotation))
            trans.append(t.translation)
        angles, trans = np.array(angles), np.array(trans)
        assert angles.min() >= -1e-9 and angles.max() <= 45.0 + 1e-9
        assert trans.min() >= -0.5 and trans.max() <= 0.5

    def test_negative_range_rejected(self):
        with pytest.raises(ValueError):
            random_transform(-1.0, 0.5, np.random.default_rng(0))
