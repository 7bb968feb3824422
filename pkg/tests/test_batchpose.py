import numpy as np
import pytest

from conftest import make_dataset, mean_joint_error_mm, random_pose
from monocap.batchpose import (Batch, BatchError, BatchProblem, LambdaWeights, PoseWeights,
                               batch_objective, blend_weight, dct_basis, energy_2d, energy_3d,
                               energy_d, estimate_poses, init_poses, load_poses, load_poses_bin,
                               optimize_batch, partition, partition_and_blend, poses_to_x,
                               save_poses)
from monocap.detections import FrameDetections
from monocap.kinematics import SkeletonPose
from monocap.solver import ResidualBlock, check_jacobian


def cosine_row(k, n):
    i = np.arange(n)
    c = np.sqrt(1.0 / n) if k == 0 else np.sqrt(2.0 / n)
    return c * np.cos(np.pi * (i + 0.5) * k / n)


# ---------------------------------------------------------------- DCT prior

def test_dct_basis_properties():
    sub = dct_basis(50, 8)
    assert np.allclose(sub.basis @ sub.basis.T, np.eye(8), atol=1e-10)
    P = sub.projector
    assert np.allclose(P, P.T, atol=1e-10)
    assert np.allclose(P @ P, P, atol=1e-10)
    assert np.allclose(P @ np.full(50, 3.2), 0, atol=1e-10)
    assert np.allclose(sub.basis[0], sub.basis[0, 0])


def test_dct_rows_in_and_out_of_span():
    sub = dct_basis(50, 8)
    assert np.allclose(sub.projector @ cosine_row(5, 50), 0, atol=1e-10)
    r20 = cosine_row(20, 50)
    out = sub.projector @ r20
    assert np.allclose(out, r20, atol=1e-10)
    assert abs(np.linalg.norm(out) - 1) < 1e-10


def test_dct_too_short():
    with pytest.raises(BatchError):
        dct_basis(5, 8)


def test_energy_d_zero_in_subspace(rng):
    sub = dct_basis(50, 8)
    S = rng.normal(size=(33, 8)) @ sub.basis
    lam = LambdaWeights().vector()
    assert energy_d(S, lam, sub) <= 1e-9


def test_energy_d_single_out_of_span_row():
    sub = dct_basis(50, 8)
    lam = LambdaWeights().vector()
    S = np.zeros((33, 50))
    S[10] = cosine_row(20, 50)
    assert energy_d(S, lam, sub) == pytest.approx(lam[10] ** 2 / 50, rel=1e-12)


def test_energy_d_matches_least_squares_oracle(rng):
    for n in (8, 13, 50):
        sub = dct_basis(n, 8)
        lam = rng.uniform(0.5, 700, 33)
        S = rng.normal(size=(33, n))
        B = np.stack([cosine_row(k, n) for k in range(8)], axis=1)  # (n, 8)
        total = 0.0
        for p in range(33):
            coef, *_ = np.linalg.lstsq(B, S[p], rcond=None)
            total += lam[p] ** 2 * np.sum((S[p] - B @ coef) ** 2)
        assert energy_d(S, lam, sub) == pytest.approx(total / n, rel=1e-9)


def test_energy_d_invariant_to_subspace_shift(rng):
    sub = dct_basis(30, 8)
    lam = LambdaWeights().vector()
    S = rng.normal(size=(33, 30))
    shift = rng.normal(size=(33, 8)) @ sub.basis
    assert energy_d(S + shift, lam, sub) == pytest.approx(energy_d(S, lam, sub), rel=1e-9)


def test_lambda_weights():
    lam = LambdaWeights().vector()
    assert lam.shape == (33,)
    assert np.all(lam[:3] == 1) and np.all(lam[3:] == 600)
    with pytest.raises(ValueError):
        LambdaWeights(0.0).vector()


# ---------------------------------------------------------------- data terms

@pytest.fixture(scope="module")
def small_ds(rig, template, cam):
    return make_dataset(rig, template, cam, num_frames=12, seed=3)


def test_energy_2d_examples(rig, cam, small_ds):
    dets, poses = small_ds.detections, small_ds.poses
    assert energy_2d(poses, dets, rig, cam) < 1e-20
    d0 = dets[4]
    moved = d0.d2d.copy()
    moved[7] += [3.0, 4.0]
    dets2 = list(dets)
    dets2[4] = FrameDetections(4, moved, d0.conf2d, d0.d3d, d0.conf3d)
    assert energy_2d(poses, dets2, rig, cam) == pytest.approx(25 / (12 * 16), rel=1e-9)
    c = d0.conf2d.copy()
    c[7] = 0.0
    dets2[4] = FrameDetections(4, moved, c, d0.d3d, d0.conf3d)
    assert energy_2d(poses, dets2, rig, cam) < 1e-20


def test_energy_2d_brute_force(rig, cam, rng):
    from monocap.kinematics import joint_positions, project

    poses = [random_pose(rig, rng) for _ in range(4)]
    dets = [FrameDetections(f, rng.uniform(0, 600, (16, 2)), rng.uniform(0, 1, 16) > 0.2,
                            np.zeros((16, 3)), np.ones(16)) for f in range(4)]
    total = 0.0
    for p, d in zip(poses, dets):
        J = joint_positions(rig, p)
        for i in range(16):
            if d.conf2d[i] > 0:
                total += np.sum((project(cam, J[i]) - d.d2d[i]) ** 2)
    assert energy_2d(poses, dets, rig, cam) == pytest.approx(total / (4 * 16), rel=1e-9)


def test_energy_3d_examples(rig, small_ds):
    dets, poses = small_ds.detections, small_ds.poses
    gates = np.ones(12)
    assert energy_3d(poses, dets, rig, gates) < 1e-24
    d0 = dets[2]
    moved = d0.d3d.copy()
    moved[5] += [0.0, 0.0, 0.1]
    dets2 = list(dets)
    dets2[2] = FrameDetections(2, d0.d2d, d0.conf2d, moved, d0.conf3d)
    assert energy_3d(poses, dets2, rig, gates) == pytest.approx(0.01 / (12 * 16), rel=1e-9)
    shifted = [SkeletonPose(p.t + 1.0, p.r, p.theta) for p in poses]
    assert energy_3d(poses, dets2, rig, np.zeros(12)) == 0.0
    assert energy_3d(shifted, dets, rig, gates) < 1e-24


def test_data_and_prior_jacobians(rig, cam, small_ds, rng):
    dets = small_ds.detections[:9]
    prob = BatchProblem(dets, rig, cam, rng.uniform(0, 1, 9), PoseWeights(K=8))
    for _ in range(3):
        x = poses_to_x([random_pose(rig, rng) for _ in range(9)])
        for b in prob.blocks():
            blk = ResidualBlock(b.residual, b.jacobian)
            assert check_jacobian(blk, x) < 1e-4, b.name


# ---------------------------------------------------------------- init / batch

def test_init_recovers_noise_free_pose(rig, cam, small_ds):
    init, rep = init_poses(small_ds.detections, rig, cam)
    assert not rep.flagged
    assert mean_joint_error_mm(rig, init, small_ds.joints) < 1.0
    lo, hi = rig.param_bounds()
    assert all(np.all(p.vector() >= lo) and np.all(p.vector() <= hi) for p in init)


def test_init_no_detections_flagged(rig, cam, small_ds):
    d = small_ds.detections[0]
    empty = FrameDetections(0, d.d2d, np.zeros(16), d.d3d, np.zeros(16))
    init, rep = init_poses([empty], rig, cam)
    assert rep.flagged == [0]
    assert np.array_equal(init[0].vector(), SkeletonPose.zeros(rig).vector())


def test_init_deterministic_for_repeated_frame(rig, cam, small_ds):
    d = small_ds.detections[5]
    init, _ = init_poses([d, FrameDetections(1, d.d2d, d.conf2d, d.d3d, d.conf3d)], rig, cam)
    assert np.array_equal(init[0].vector(), init[1].vector())


@pytest.fixture(scope="module")
def noisy_batch(rig, template, cam):
    ds = make_dataset(rig, template, cam, num_frames=30, seed=5, sigma_2d=3.0, sigma_3d=0.02)
    dets = ds.detections
    init, _ = init_poses(dets, rig, cam)
    return ds, dets, init


def test_optimize_batch_never_increases_objective(rig, cam, noisy_batch):
    ds, dets, init = noisy_batch
    b = Batch(0, 29, init, np.ones(30))
    before = batch_objective(b, dets, rig, cam)
    out, rep = optimize_batch(b, dets, rig, cam)
    assert rep.final_objective <= rep.initial_objective
    assert batch_objective(out, dets, rig, cam) <= before
    assert rep.initial_objective == pytest.approx(before, rel=1e-12)
    lo, hi = rig.param_bounds()
    assert all(np.all(p.vector() >= lo) and np.all(p.vector() <= hi) for p in out.poses)


def test_optimize_batch_noise_free(rig, cam, template):
    ds = make_dataset(rig, template, cam, num_frames=20, seed=11)
    init, _ = init_poses(ds.detections, rig, cam)
    # perturb the init so that the prior has work to do
    rng = np.random.default_rng(0)
    start = [SkeletonPose(p.t, p.r, p.theta + rng.normal(scale=0.02, size=27)) for p in init]
    lo, hi = rig.param_bounds()
    start = [SkeletonPose.from_vector(np.clip(p.vector(), lo, hi)) for p in start]
    b = Batch(0, 19, start, np.ones(20))
    out, _ = optimize_batch(b, ds.detections, rig, cam)
    sub = dct_basis(20, 8)
    lam = LambdaWeights().vector()
    assert mean_joint_error_mm(rig, out.poses, ds.joints) <= mean_joint_error_mm(rig, start, ds.joints)
    assert energy_d(out.matrix(), lam, sub) < energy_d(b.matrix(), lam, sub)


def test_gated_corrupted_frame_pulled_to_subspace(rig, cam, template):
    ds = make_dataset(rig, template, cam, num_frames=20, seed=2)
    dets = list(ds.detections)
    d = dets[10]
    dets[10] = FrameDetections(10, d.d2d, d.conf2d, d.d3d[::-1].copy() * 1.0, d.conf3d)
    init, _ = init_poses(dets, rig, cam)
    gates = np.ones(20)
    gates[10] = 0.0
    out, _ = optimize_batch(Batch(0, 19, init, gates), dets, rig, cam)
    sub = dct_basis(20, 8)
    S0 = np.stack([p.vector() for p in init], axis=1)
    S1 = out.matrix()
    lam = LambdaWeights().vector()[:, None]
    dev0 = np.linalg.norm((lam * S0 @ sub.projector)[:, 10])
    dev1 = np.linalg.norm((lam * S1 @ sub.projector)[:, 10])
    assert dev1 < dev0


def test_without_prior_batch_reproduces_init(rig, cam, small_ds):
    w = PoseWeights(w_d=0.0)
    init, _ = init_poses(small_ds.detections, rig, cam, w)
    out, _ = optimize_batch(Batch(0, 11, init, np.ones(12)), small_ds.detections, rig, cam, w)
    for a, b in zip(init, out.poses):
        assert np.abs(a.vector() - b.vector()).max() < 1e-4


# ---------------------------------------------------------------- partition / blend

def test_partition_layouts():
    assert partition(50) == [(0, 49)]
    assert partition(90) == [(0, 49), (40, 89)]
    assert partition(130) == [(0, 49), (40, 89), (80, 129)]
    # a tail shorter than K is extended backwards
    assert partition(93)[-1] == (80, 92)
    assert partition(22, 10, 2) == [(0, 9), (8, 17), (14, 21)]
    with pytest.raises(BatchError):
        partition(5)


def test_blend_ramp():
    assert [blend_weight(k, 10) for k in range(10)] == [(9 - k) / 9 for k in range(10)]


def _const_batch(rig, s, e, value):
    p = SkeletonPose(np.full(3, value), np.zeros(3), np.full(27, value))
    return Batch(s, e, [p.copy() for _ in range(e - s + 1)])


def test_single_batch_passthrough(rig):
    b = _const_batch(rig, 0, 49, 0.3)
    out = partition_and_blend(50, [b])
    assert all(np.array_equal(o.vector(), p.vector()) for o, p in zip(out, b.poses))


def test_equal_batches_blend_to_same(rig):
    out = partition_and_blend(90, [_const_batch(rig, 0, 49, 0.3), _const_batch(rig, 40, 89, 0.3)])
    assert all(np.allclose(o.vector(), out[0].vector(), atol=1e-15) for o in out)


def test_blend_endpoints_and_ramp(rig):
    a, b = _const_batch(rig, 0, 49, 0.0), _const_batch(rig, 40, 89, 1.0)
    out = partition_and_blend(90, [a, b])
    assert out[40].theta[0] == 0.0
    assert out[49].theta[0] == 1.0
    for k, f in enumerate(range(40, 50)):
        assert out[f].theta[0] == pytest.approx(1 - (9 - k) / 9)


def test_coverage_gap(rig):
    with pytest.raises(BatchError, match="gap"):
        partition_and_blend(90, [_const_batch(rig, 0, 39, 0.0), _const_batch(rig, 45, 89, 0.0)])


def test_estimate_poses_stages(rig, cam, small_ds):
    est = estimate_poses(small_ds.detections, rig, cam, batch_size=8, overlap=3)
    assert len(est["poses"]) == 12
    assert [(b.f_start, b.f_end) for b in est["batches"]] == partition(12, 8, 3)
    assert est["gates"].tolist() == [1.0] * 12


# ---------------------------------------------------------------- files

def test_pose_files_roundtrip(tmp_path, rig, rng):
    poses = [random_pose(rig, rng) for _ in range(5)]
    path, sidecar = save_poses(tmp_path / "p.json", poses)
    back = load_poses(path)
    assert all(np.array_equal(a.vector(), b.vector()) for a, b in zip(poses, back))
    X = load_poses_bin(sidecar, 33)
    assert X.shape == (5, 33)
    assert np.array_equal(X, np.stack([p.vector() for p in poses]))
    assert sidecar.stat().st_size == 5 * 33 * 8
