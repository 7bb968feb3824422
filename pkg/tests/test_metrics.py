import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from monocap.metrics import (MetricsError, evaluate, joint_error, load_metrics_csv, metrics_csv,
                             render_report, similarity_align, summary_csv)


def seq(rng, n=4, j=16):
    return rng.normal(size=(n, j, 3)) * 0.3 + [0, 0, 4]


def test_identity_zero_error(rng):
    J = seq(rng)
    masks = rng.random((4, 8, 8)) > 0.5
    rep = evaluate(J, J, J, J, masks, masks)
    m = rep.means()
    for k in ("joint_similarity_mm", "joint_procrustes_mm", "joint_raw_mm", "vertex_mm"):
        assert m[k] < 1e-9
    assert m["iou"] == 1.0
    assert rep.skipped == []


def test_similarity_invariance(rng):
    J = seq(rng)
    Q = Rotation.random(random_state=3).as_matrix()
    P = 1.7 * J @ Q.T + [0.3, -2.0, 1.0]
    rep = evaluate(P, J)
    assert rep.means()["joint_similarity_mm"] < 1e-9
    assert rep.means()["joint_procrustes_mm"] < 1e-9
    assert rep.means()["joint_raw_mm"] > 100


def test_single_joint_offset_raw():
    J = np.random.default_rng(0).normal(size=(1, 16, 3))
    P = J.copy()
    P[0, 4, 0] += 0.010
    assert evaluate(P, J).joint_raw[0] == pytest.approx(10 / 16)


def test_similarity_align_matches_umeyama_oracle(rng):
    # brute-force check: the returned transform beats random perturbations of itself
    X = rng.normal(size=(16, 3))
    Y = X @ Rotation.random(random_state=5).as_matrix().T * 0.8 + rng.normal(scale=0.05, size=(16, 3))
    T = similarity_align(X, Y)
    best = np.sum((T.apply(X) - Y) ** 2)
    for _ in range(200):
        dR = Rotation.from_rotvec(rng.normal(scale=0.01, size=3)).as_matrix()
        s = T.scale * (1 + rng.normal(scale=0.01))
        t = T.translation + rng.normal(scale=0.01, size=3)
        assert np.sum((s * X @ (dR @ T.rotation).T + t - Y) ** 2) >= best - 1e-12
    assert np.isclose(np.linalg.det(T.rotation), 1.0)


def test_degenerate_frames_skipped(rng):
    J = seq(rng, n=3)
    J[1] = np.outer(np.linspace(0, 1, 16), [1.0, 2.0, 3.0])   # collinear
    rep = evaluate(J + 0.01, J)
    assert rep.skipped == [1]
    assert math.isnan(rep.joint_similarity[1])
    assert not math.isnan(rep.means()["joint_similarity_mm"])


def test_iou_symmetric(rng):
    a = rng.random((2, 10, 10)) > 0.5
    b = rng.random((2, 10, 10)) > 0.5
    J = seq(rng, n=2)
    assert np.allclose(evaluate(J, J, pred_masks=a, gt_masks=b).iou,
                       evaluate(J, J, pred_masks=b, gt_masks=a).iou)


def test_shape_mismatch():
    with pytest.raises(MetricsError):
        evaluate(np.zeros((2, 16, 3)), np.zeros((3, 16, 3)))
    with pytest.raises(MetricsError):
        similarity_align(np.zeros((4, 3)), np.zeros((5, 3)))


def test_joint_error():
    assert joint_error(np.zeros((2, 3)), np.array([[3.0, 4, 0], [0, 0, 1]])) == 3.0


def test_csv_roundtrip_and_summary(tmp_path, rng):
    J = seq(rng)
    rep = evaluate(J + 0.002, J, J, J + 0.001)
    text = metrics_csv(rep)
    assert text.splitlines()[0] == ("frame,joint_similarity_mm,joint_procrustes_mm,joint_raw_mm,"
                                    "vertex_mm,skipped")
    (tmp_path / "m.csv").write_text(text)
    back = load_metrics_csv(tmp_path / "m.csv")
    assert metrics_csv(back) == text
    rows = dict(line.split(",") for line in summary_csv(rep).splitlines()[1:])
    assert float(rows["joint_raw_mm"]) == pytest.approx(2 * np.sqrt(3), abs=1e-6)


def test_report_single_frame(tmp_path, rng):
    rep = evaluate(seq(rng, n=1) + 0.001, seq(np.random.default_rng(1), n=1))
    files = render_report(rep, tmp_path)
    names = sorted(f.name for f in files)
    assert "joint_raw_mm.svg" in names and "metrics.csv" in names
    svg = (tmp_path / "joint_raw_mm.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg


def test_report_constant_series(tmp_path):
    J = np.tile(np.random.default_rng(2).normal(size=(1, 16, 3)), (5, 1, 1))
    rep = evaluate(J + [0.003, 0, 0], J)
    assert np.allclose(rep.joint_raw, 3.0)
    render_report(rep, tmp_path)
    assert (tmp_path / "summary.csv").read_text().splitlines()[3] == "joint_raw_mm,3.000000"


def test_report_deterministic(tmp_path, rng):
    rep = evaluate(seq(rng) + 0.002, seq(np.random.default_rng(9)))
    render_report(rep, tmp_path / "a")
    render_report(rep, tmp_path / "b")
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_empty_report_rejected(tmp_path):
    rep = evaluate(np.zeros((0, 16, 3)), np.zeros((0, 16, 3)))
    with pytest.raises(MetricsError):
        render_report(rep, tmp_path)
