import json

import numpy as np
import pytest

from conftest import make_dataset
from monocap.cli import main
from monocap.pipeline import (ConfigError, PipelineConfig, PipelineError, StageError,
                              read_mesh_sequence, run, write_mesh_sequence,
                              write_synthetic_dataset)
from monocap.synth import NoiseSpec, synth_generate


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory, rig, template, cam):
    ds = make_dataset(rig, template, cam, num_frames=12, seed=4, rescale=False)
    out = tmp_path_factory.mktemp("ds")
    write_synthetic_dataset(ds, out)
    return out


@pytest.fixture(scope="module")
def masked_dir(tmp_path_factory, rig, template, cam):
    ds = make_dataset(rig, template, cam, num_frames=10, seed=6, rescale=False, render=True)
    out = tmp_path_factory.mktemp("dsm")
    cfg = PipelineConfig()
    cfg.refine.M = 300
    write_synthetic_dataset(ds, out, cfg)
    return out


# ---------------------------------------------------------------- config

def test_toml_and_json_configs_agree(tmp_path, dataset_dir):
    cfg = PipelineConfig.load(dataset_dir / "config.toml")
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert PipelineConfig.load(tmp_path / "c.json") == cfg
    (tmp_path / "c.toml").write_text(cfg.to_toml())
    assert PipelineConfig.load(tmp_path / "c.toml") == cfg


def test_defaults():
    cfg = PipelineConfig()
    assert (cfg.pose.w_3d, cfg.pose.w_d, cfg.pose.K, cfg.pose.batch, cfg.pose.overlap) == (0.1, 50.0, 8, 50, 10)
    assert cfg.pose.lam == (1.0, 600.0, 600.0) and cfg.pose.thres_pck == 0.4
    assert cfg.refine.w_stab == 0.06 and cfg.refine.w_arap == (0.6, 0.2) and cfg.refine.M == 1000


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        PipelineConfig.from_dict({"pose": {"w3d": 1.0}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"extra": 1})


def test_validation_errors(dataset_dir):
    cfg = PipelineConfig.load(dataset_dir / "config.toml")
    cfg.pose.w_d = -1.0
    with pytest.raises(ConfigError, match="w_d"):
        cfg.validate()
    cfg = PipelineConfig.load(dataset_dir / "config.toml")
    cfg.paths.detections = "missing.json"
    with pytest.raises(ConfigError, match="not found"):
        cfg.validate()
    cfg = PipelineConfig.load(dataset_dir / "config.toml")
    cfg.stages.refinement = True
    with pytest.raises(ConfigError, match="refinement needs"):
        cfg.validate()


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError) as e:
        PipelineConfig.load(tmp_path / "nope.toml")
    assert e.value.exit_code == 1


# ---------------------------------------------------------------- runs

def run_into(config_path, out, **overrides):
    cfg = PipelineConfig.load(config_path)
    cfg.paths.output = str(out)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return run(cfg)


def test_pose_only_run(tmp_path, dataset_dir):
    res = run_into(dataset_dir / "config.toml", tmp_path / "o")
    out = tmp_path / "o"
    for name in ("poses_init.json", "poses_batch.json", "poses_final.json", "poses_final.json.bin",
                 "gates.json", "metrics.csv", "summary.csv", "timings.json", "manifest.json"):
        assert (out / name).exists(), name
    assert res.metrics.means()["joint_raw_mm"] < 2.0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert not (out / "masks_pass1").exists()
    V, F = read_mesh_sequence(out / "meshes")
    assert V.shape[0] == 12 and np.allclose(V, res.vertices, atol=1e-6)


def test_rerun_is_byte_identical(tmp_path, dataset_dir):
    run_into(dataset_dir / "config.toml", tmp_path / "a")
    run_into(dataset_dir / "config.toml", tmp_path / "b")
    for name in ("poses_final.json", "poses_batch.json", "metrics.csv", "gates.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_parallel_run_matches_serial(tmp_path, dataset_dir):
    run_into(dataset_dir / "config.toml", tmp_path / "a")
    run_into(dataset_dir / "config.toml", tmp_path / "b", parallelism=3)
    assert (tmp_path / "a" / "poses_final.json").read_bytes() == \
        (tmp_path / "b" / "poses_final.json").read_bytes()


def test_refinement_with_user_masks(tmp_path, masked_dir):
    res = run_into(masked_dir / "config.toml", tmp_path / "o")
    m = res.metrics.means()
    assert m["iou"] > 0.98
    assert m["joint_raw_mm"] < 5.0
    assert set(res.stages) >= {"init", "batch", "pose_refined", "final"}
    assert (tmp_path / "o" / "masks_pass1").is_dir()


def test_stage_failure_writes_error(tmp_path, dataset_dir):
    bad = tmp_path / "ds"
    bad.mkdir()
    for f in dataset_dir.iterdir():
        if f.is_file():
            (bad / f.name).write_bytes(f.read_bytes())
    (bad / "detections.json").write_text("{not json")
    with pytest.raises(PipelineError) as e:
        run_into(bad / "config.toml", tmp_path / "o")
    err = json.loads((tmp_path / "o" / "error.json").read_text())
    assert err["stage"] == "load" and err["exit_code"] == e.value.exit_code
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["status"] == "failed"
    assert isinstance(e.value, (StageError, ConfigError))


def test_mesh_sequence_roundtrip(tmp_path, rng):
    V = rng.normal(size=(3, 5, 3))
    F = np.array([[0, 1, 2], [2, 3, 4]])
    write_mesh_sequence(tmp_path, F, V)
    V2, F2 = read_mesh_sequence(tmp_path)
    assert np.array_equal(F2, F) and np.allclose(V2, V, atol=1e-9)


# ---------------------------------------------------------------- synthetic data

def test_synth_noise_statistics(rig, template, cam):
    X = np.tile(np.zeros(33), (700, 1))
    X[:, 2] = 4.0
    clean = synth_generate(rig, template, cam, X)
    noisy = synth_generate(rig, template, cam, X, NoiseSpec(2.0, 0.0), seed=1)
    diff = np.concatenate([n.d2d - c.d2d for n, c in zip(noisy.detections, clean.detections)])
    assert diff.size >= 10_000
    assert 1.8 <= diff.std() <= 2.2
    assert abs(diff.mean()) < 0.1


def test_synth_zero_noise_is_projection(rig, template, cam):
    from monocap.kinematics import project_points

    ds = make_dataset(rig, template, cam, num_frames=10, seed=2)
    for d, J in zip(ds.detections, ds.joints):
        uv, _ = project_points(cam, J)
        assert np.array_equal(d.d2d, uv)


# ---------------------------------------------------------------- CLI

def test_cli_end_to_end(tmp_path, capsys):
    ds = tmp_path / "ds"
    assert main(["synth", str(ds), "--frames", "10", "--seed", "3"]) == 0
    assert main(["run", str(ds / "config.toml"), "--output", str(tmp_path / "out")]) == 0
    out = tmp_path / "out"
    assert main(["evaluate", str(ds / "config.toml"), "--poses", str(out / "poses_final.json"),
                 "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "metrics.csv").read_text() == (out / "metrics.csv").read_text()
    assert main(["report", str(out / "metrics.csv"), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "joint_raw_mm.svg").exists()


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.toml")]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 1 and err["error"] == "ConfigError"
    bad = tmp_path / "bad.toml"
    bad.write_text("[pose\nw_3d = ")
    assert main(["run", str(bad)]) == 1
    assert main(["report", str(tmp_path / "none.csv"), "--out", str(tmp_path / "r")]) == 1


def test_cli_convert_detections(tmp_path):
    rows = ["frame,joint,x,y,conf2d,X,Y,Z,conf3d"]
    for f in range(2):
        for j in range(16):
            rows.append(f"{f},{j},{10 + j},{20 + f},1,0,{0.1 * j},0,1")
    (tmp_path / "d.csv").write_text("\n".join(rows) + "\n")
    assert main(["convert-detections", str(tmp_path / "d.csv"), "--out", str(tmp_path / "d.json")]) == 0
    doc = json.loads((tmp_path / "d.json").read_text())
    assert len(doc["frames"]) == 2
