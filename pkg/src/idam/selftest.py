"""Quick built-in property checks, each against an independent oracle.

Run with ``idam selftest``; prints one PASS/FAIL line per check and returns
a nonzero exit code if any check fails.
"""

from __future__ import annotations

import time

import numpy as np

from .data import synth_composite
from .features import compute_fpfh
from .geometry import RigidTransform, euler_deg_to_rotation, random_transform, rotation_error_deg
from .icp import icp_register
from .neighbors import SpatialIndex, brute_force_knn
from .nn import Mlp, mlp_backward, mlp_forward
from .pipeline import IdamConfig, IdamModel, build_augmented_tensor, hybrid_weights, similarity_forward
from .procrustes import solve_weighted_procrustes


def check_procrustes(rng) -> str:
    worst_r = worst_t = 0.0
    for _ in range(200):
        gt = random_transform(180.0, 1.0, rng)
        p = rng.normal(size=(int(rng.integers(3, 50)), 3))
        est = solve_weighted_procrustes(p, gt.apply(p), rng.uniform(0.1, 1.0, len(p)))
        worst_r = max(worst_r, rotation_error_deg(est, gt))
        worst_t = max(worst_t, float(np.linalg.norm(est.translation - gt.translation)))
        mirrored = solve_weighted_procrustes(p, p * [-1.0, 1.0, 1.0])
        assert abs(np.linalg.det(mirrored.rotation) - 1.0) < 1e-9
    assert worst_r < 1e-9 and worst_t < 1e-10, (worst_r, worst_t)
    return f"max rotation error {worst_r:.2e} deg, translation {worst_t:.2e}"


def check_neighbors(rng) -> str:
    for _ in range(20):
        pts = rng.uniform(-1, 1, (int(rng.integers(1, 600)), 3))
        pts[: len(pts) // 4] = np.round(pts[: len(pts) // 4], 1)
        index = SpatialIndex(pts)
        k = min(len(pts), 8)
        for q in rng.uniform(-1, 1, (5, 3)):
            assert index.knn(q, k) == brute_force_knn(pts, q, k)
    return "knn equals brute force on 20 clouds"


def check_fpfh(rng) -> str:
    cloud = synth_composite(int(rng.integers(1000)), 512, rng)
    f = compute_fpfh(cloud)
    moved = compute_fpfh(random_transform(180.0, 1.0, rng).apply(cloud))
    err = float(np.max(np.abs(moved - f)))
    assert err <= 1e-6, err
    return f"rigid-motion difference {err:.1e}"


def check_gradients(rng) -> str:
    p = Mlp.init([6, 8, 4, 1], rng)
    for b in p.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    x = rng.normal(size=(5, 6))
    dy = rng.normal(size=(5, 1))
    _, cache = mlp_forward(p, x)
    _, grads = mlp_backward(p, cache, dy)
    h = 1e-5
    worst = 0.0
    for arr, g in zip(p.arrays(), grads.arrays()):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = float(np.sum(dy * mlp_forward(p, x)[0]))
            arr[idx] = old - h
            down = float(np.sum(dy * mlp_forward(p, x)[0]))
            arr[idx] = old
            num[idx] = (up - down) / (2 * h)
        worst = max(worst, float(np.linalg.norm(num - g) / max(np.linalg.norm(num), 1e-12)))
    assert worst < 1e-4, worst
    return f"relative error {worst:.1e}"


def check_similarity(rng) -> str:
    model = IdamModel.init(IdamConfig(), seed=int(rng.integers(1000)))
    for M in (8, 64, 128):
        t = build_augmented_tensor(rng.normal(size=(M, 3)), rng.normal(size=(M, 3)), rng.uniform(0, 10, (M, 33)), rng.uniform(0, 10, (M, 33)))
        S, F, _ = similarity_forward(t, model)
        assert np.max(np.abs(S.sum(axis=1) - 1)) < 1e-6
        _, w = hybrid_weights(F, model)
        assert abs(w.sum() - 1) < 1e-9 and np.sum(w == 0) >= M // 2
    return "rows sum to 1, hybrid weights normalized"


def check_icp(rng) -> str:
    cloud = synth_composite(int(rng.integers(1000)), 512, rng)
    gt = RigidTransform(euler_deg_to_rotation(rng.uniform(0, 10, 3)), np.zeros(3))
    res = icp_register(cloud, gt.apply(cloud))
    err = rotation_error_deg(res.transform, gt)
    assert err < 0.1 and np.all(np.diff(res.objective) <= 1e-12), err
    return f"rotation error {err:.2e} deg after {len(res.iterations)} iterations"


CHECKS = [
    ("procrustes", check_procrustes),
    ("neighbors", check_neighbors),
    ("fpfh", check_fpfh),
    ("gradients", check_gradients),
    ("similarity", check_similarity),
    ("icp", check_icp),
]


def run_selftest(seed: int = 0) -> int:
    failures = 0
    for name, check in CHECKS:
        t0 = time.perf_counter()
        try:
            detail = check(np.random.default_rng([seed, len(name)]))
            status = "PASS"
        except AssertionError as exc:
            detail, status = f"assertion failed {exc}", "FAIL"
            failures += 1
        print(f"{status} {name:<11} {detail} ({time.perf_counter() - t0:.2f}s)")
    print(f"selftest seed={seed}: {len(CHECKS) - failures}/{len(CHECKS)} passed")
    return 1 if failures else 0
