import numpy as np
import pytest

from monocap.kinematics import load_default_rig
from monocap.synth import DEFAULT_CAMERA, default_base_pose, make_actor_template


@pytest.fixture(scope="session")
def rig():
    return load_default_rig()


@pytest.fixture(scope="session")
def template(rig):
    return make_actor_template(rig)


@pytest.fixture(scope="session")
def cam():
    return DEFAULT_CAMERA


@pytest.fixture
def base_pose(rig):
    return default_base_pose(rig)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(rig, rng, depth=4.0, spread=0.8):
    """In-bounds pose: angles drawn in the middle ``spread`` of each range."""
    from monocap.kinematics import SkeletonPose

    lo, hi = rig.angle_bounds.T
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * spread
    theta = mid + rng.uniform(-1, 1, rig.angle_count) * half
    t = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.2), depth])
    return SkeletonPose(t, rng.normal(scale=0.2, size=3), theta)


def make_dataset(rig, template, cam, num_frames=50, seed=0, sigma_2d=0.0, sigma_3d=0.0,
                 rescale=True, **kw):
    """Synthetic in-subspace motion; d3d is rescaled to the rig unless ``rescale=False``."""
    from monocap.detections import rescale_sequence
    from monocap.synth import NoiseSpec, random_dct_motion, synth_generate

    coef = random_dct_motion(rig, num_frames, np.random.default_rng(seed))
    ds = synth_generate(rig, template, cam, (coef, num_frames),
                        NoiseSpec(sigma_2d, sigma_3d), seed=seed, **kw)
    if rescale:
        ds.detections = rescale_sequence(ds.detections, rig)
    return ds


def mean_joint_error_mm(rig, poses, joints):
    from monocap.kinematics import joint_positions

    return 1000.0 * float(np.mean([np.linalg.norm(joint_positions(rig, p) - J, axis=1).mean()
                                   for p, J in zip(poses, joints)]))


# ---------------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, tuple[str, bool]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", tuple(m.args)))


def pytest_runtest_logreport(report):
    info = dict(report.user_properties).get("criterion")
    if info is None or not (report.when == "call" or report.failed):
        return
    number, title = info
    ok = _CRITERIA.get(number, (title, True))[1]
    _CRITERIA[number] = (title, ok and report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}  {'PASS' if ok else 'FAIL'}  {title}")
