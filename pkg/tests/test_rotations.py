import numpy as np
from scipy.spatial.transform import Rotation

from monocap.rotations import (dual_quat_apply, dual_quat_from_rt, log_so3, matrix_to_quat,
                               quat_slerp, quat_to_matrix, quat_to_rotvec, right_jacobian,
                               rodrigues, rodrigues_batch, rotvec_to_quat)


def test_rodrigues_matches_scipy(rng):
    for r in rng.normal(size=(20, 3)):
        assert np.allclose(rodrigues(r), Rotation.from_rotvec(r).as_matrix(), atol=1e-12)
    R = rng.normal(size=(7, 3))
    assert np.allclose(rodrigues_batch(R), Rotation.from_rotvec(R).as_matrix(), atol=1e-12)


def test_small_angle_and_log_roundtrip(rng):
    assert np.allclose(rodrigues(np.zeros(3)), np.eye(3))
    for r in rng.uniform(-1.5, 1.5, size=(20, 3)):
        assert np.allclose(log_so3(rodrigues(r)), r, atol=1e-9)


def test_quaternion_conversions(rng):
    for r in rng.normal(size=(20, 3)):
        q = rotvec_to_quat(r)
        assert np.allclose(quat_to_matrix(q), rodrigues(r), atol=1e-12)
        q2 = matrix_to_quat(rodrigues(r))
        assert min(np.abs(q - q2).max(), np.abs(q + q2).max()) < 1e-9
        assert np.allclose(rodrigues(quat_to_rotvec(q)), rodrigues(r), atol=1e-9)


def test_slerp_halfway_about_z():
    q0 = rotvec_to_quat(np.zeros(3))
    q1 = rotvec_to_quat(np.array([0.0, 0.0, np.pi / 2]))
    mid = quat_slerp(q0, q1, 0.5)
    assert np.allclose(quat_to_rotvec(mid), [0.0, 0.0, np.pi / 4])


def test_right_jacobian_by_differences(rng):
    r = rng.normal(size=3) * 0.7
    J = right_jacobian(r)
    eps = 1e-6
    R = rodrigues(r)
    for k in range(3):
        d = np.zeros(3)
        d[k] = eps
        # R(r + d) ~ R(r) exp(J d)
        w = log_so3(R.T @ rodrigues(r + d)) / eps
        assert np.allclose(w, J[:, k], atol=1e-5)


def test_dual_quaternion_applies_rigid_motion(rng):
    R = Rotation.from_rotvec(rng.normal(size=3)).as_matrix()
    t = rng.normal(size=3)
    P = rng.normal(size=(5, 3))
    dq = dual_quat_from_rt(R, t)
    out = dual_quat_apply(np.broadcast_to(dq, (5, 8)), P)
    assert np.allclose(out, P @ R.T + t, atol=1e-12)
