"""End-to-end orchestration: configuration, stage execution, outputs and evaluation."""
from __future__ import annotations

import json
import logging
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .batchpose import LambdaWeights, PoseWeights, estimate_poses, save_poses
from .detections import load_detections, rescale_sequence
from .kinematics import (ActorTemplate, Camera, SkeletonPose, SkeletonRig, joint_positions,
                         load_camera, load_template, skin_mesh)
from .raster import extract_contour, load_mask_png, render_mask, save_mask_png
from .refine import (RefinementConfig, model_trimap, refine_pose, refine_surface,
                     second_pass_segmentation, surface_graph, temporal_smooth)
from .segment import GrabCutParams, grabcut, load_image, motion_weights, save_trimap_png
from .solver import LMOptions

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".jpg", ".jpeg")


class PipelineError(RuntimeError):
    exit_code = 2


class ConfigError(PipelineError):
    exit_code = 1


class StageError(PipelineError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------- configuration

@dataclass
class PathsConfig:
    template: str = ""
    rig: str = ""
    camera: str = ""
    detections: str = ""
    output: str = "out"
    frames: str | None = None
    masks: str | None = None
    ground_truth: str | None = None


@dataclass
class PoseConfig:
    w_3d: float = 0.1              # w_3d
    w_d: float = 50.0              # w_d
    lam: tuple = (1.0, 600.0, 600.0)  # (lambda_t, lambda_R, lambda_Theta)
    K: int = 8                     # DCT subspace size
    batch: int = 50
    overlap: int = 10
    thres_pck: float = 0.4         # thres_pck
    gating: bool = True


@dataclass
class RefineConfig:
    w_stab: float = 0.06           # w_stab
    w_arap: tuple = (0.6, 0.2)     # w_arap per ICP iteration
    M: int = 1000                  # deformation graph nodes
    window: int = 5                # temporal smoothing window
    pose_iters: int = 3
    rebuild_graph_per_frame: bool = True
    # "displacement": smooth the refinement offsets from the skinned mesh;
    # "vertices": smooth absolute vertex positions
    smooth: str = "displacement"


@dataclass
class StagesConfig:
    refinement: bool = True
    segmentation: bool = True
    pose_refinement: bool = True
    surface_refinement: bool = True


@dataclass
class SolverConfig:
    max_iters: int = 50
    function_tol: float = 1e-7


@dataclass
class SegmentationConfig:
    k: int = 5
    gamma: float = 50.0
    mu: float = 1.0
    sigma_m: float = 0.1
    iters: int = 5
    seed: int = 0


_SECTIONS = {"paths": PathsConfig, "pose": PoseConfig, "refine": RefineConfig,
             "stages": StagesConfig, "solver": SolverConfig, "segmentation": SegmentationConfig}


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    pose: PoseConfig = field(default_factory=PoseConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    stages: StagesConfig = field(default_factory=StagesConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    parallelism: int = 1
    base_dir: Path = field(default_factory=Path.cwd, repr=False, compare=False)

    # ---- construction
    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "PipelineConfig":
        doc = dict(doc)
        kwargs = {}
        for name, section in _SECTIONS.items():
            sub = doc.pop(name, {}) or {}
            if not isinstance(sub, dict):
                raise ConfigError(f"[{name}] must be a table")
            known = {f.name for f in fields(section)}
            extra = set(sub) - known
            if extra:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
            obj = section(**sub)
            for k in ("lam", "w_arap"):
                if hasattr(obj, k):
                    setattr(obj, k, tuple(float(v) for v in getattr(obj, k)))
            kwargs[name] = obj
        if "parallelism" in doc:
            kwargs["parallelism"] = int(doc.pop("parallelism"))
        if doc:
            raise ConfigError(f"unknown top-level keys: {sorted(doc)}")
        cfg = cls(**kwargs)
        cfg.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        try:
            if path.suffix.lower() == ".json":
                doc = json.loads(text)
            else:
                import tomli
                doc = tomli.loads(text)
        except Exception as e:  # noqa: BLE001 - parse errors of either format
            raise ConfigError(f"{path}: {e}") from e
        return cls.from_dict(doc, path.parent)

    def to_dict(self) -> dict:
        out = {"parallelism": self.parallelism}
        for name in _SECTIONS:
            sec = asdict(getattr(self, name))
            out[name] = {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in sec.items() if v is not None}
        return out

    def to_toml(self) -> str:
        def val(v):
            if isinstance(v, bool):
                return "true" if v else "false"
            if isinstance(v, str):
                return json.dumps(v)
            if isinstance(v, list):
                return "[" + ", ".join(val(x) for x in v) + "]"
            return repr(v)

        d = self.to_dict()
        lines = [f"parallelism = {d.pop('parallelism')}"]
        for name, sec in d.items():
            lines += ["", f"[{name}]"] + [f"{k} = {val(v)}" for k, v in sec.items()]
        return "\n".join(lines) + "\n"

    # ---- derived settings
    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.paths.output)

    def pose_weights(self) -> PoseWeights:
        return PoseWeights(self.pose.w_3d, self.pose.w_d, LambdaWeights(*self.pose.lam), self.pose.K)

    def lm_options(self) -> LMOptions:
        return LMOptions(max_iters=self.solver.max_iters, function_tol=self.solver.function_tol)

    def refinement_config(self) -> RefinementConfig:
        r = self.refine
        return RefinementConfig(w_stab=r.w_stab, pose_iters=r.pose_iters, w_arap=r.w_arap,
                                window=r.window, graph_nodes=r.M,
                                rebuild_graph_per_frame=r.rebuild_graph_per_frame)

    def grabcut_params(self) -> GrabCutParams:
        return GrabCutParams(**asdict(self.segmentation))

    @property
    def refinement_enabled(self) -> bool:
        s = self.stages
        return s.refinement and (s.pose_refinement or s.surface_refinement)

    def validate(self) -> None:
        p = self.paths
        for key in ("template", "rig", "camera", "detections"):
            v = getattr(p, key)
            if not v:
                raise ConfigError(f"paths.{key} is required")
            if not self.resolve(v).exists():
                raise ConfigError(f"paths.{key}: file not found: {self.resolve(v)}")
        for key in ("frames", "masks", "ground_truth"):
            v = getattr(p, key)
            if v is not None and not self.resolve(v).exists():
                raise ConfigError(f"paths.{key}: not found: {self.resolve(v)}")
        q = self.pose
        positive = {"pose.w_3d": q.w_3d, "pose.w_d": q.w_d, "pose.thres_pck": q.thres_pck,
                    "refine.w_stab": self.refine.w_stab, "solver.function_tol": self.solver.function_tol,
                    "segmentation.gamma": self.segmentation.gamma, "segmentation.sigma_m": self.segmentation.sigma_m}
        positive.update({f"pose.lam[{i}]": v for i, v in enumerate(q.lam)})
        positive.update({f"refine.w_arap[{i}]": v for i, v in enumerate(self.refine.w_arap)})
        for name, v in positive.items():
            if not v > 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        ints = {"pose.K": q.K, "pose.batch": q.batch, "refine.M": self.refine.M,
                "solver.max_iters": self.solver.max_iters, "segmentation.k": self.segmentation.k,
                "segmentation.iters": self.segmentation.iters, "parallelism": self.parallelism}
        for name, v in ints.items():
            if int(v) < 1:
                raise ConfigError(f"{name} must be at least 1, got {v}")
        if q.overlap < 0 or q.overlap >= q.batch:
            raise ConfigError("pose.overlap must lie in [0, pose.batch)")
        if len(q.lam) != 3:
            raise ConfigError("pose.lam needs three entries (translation, rotation, angles)")
        if self.refine.window < 1 or self.refine.window % 2 == 0:
            raise ConfigError("refine.window must be a positive odd number")
        if self.refine.smooth not in ("displacement", "vertices"):
            raise ConfigError("refine.smooth must be 'displacement' or 'vertices'")
        if self.segmentation.mu < 0:
            raise ConfigError("segmentation.mu must be nonnegative")
        if self.refinement_enabled and p.masks is None and not (p.frames and self.stages.segmentation):
            raise ConfigError("refinement needs paths.masks, or paths.frames with segmentation on")


# ---------------------------------------------------------------- inputs

@dataclass
class Inputs:
    template: ActorTemplate
    rig: SkeletonRig
    cam: Camera
    detections: list
    frames: list[Path] | None = None
    masks: list[Path] | None = None
    ground_truth: dict | None = None


def list_images(directory: Path) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_ground_truth(path) -> dict:
    with np.load(path) as z:
        return {k: z[k] for k in z.files}


def load_inputs(cfg: PipelineConfig) -> Inputs:
    try:
        template, rig = load_template(cfg.resolve(cfg.paths.template), cfg.resolve(cfg.paths.rig))
        cam = load_camera(cfg.resolve(cfg.paths.camera))
        dets = rescale_sequence(load_detections(cfg.resolve(cfg.paths.detections), rig.names), rig)
    except (OSError, ValueError, KeyError) as e:
        raise ConfigError(f"cannot load inputs: {e}") from e
    inp = Inputs(template, rig, cam, dets)
    n = len(dets)
    for key in ("frames", "masks"):
        d = cfg.resolve(getattr(cfg.paths, key))
        if d is None:
            continue
        files = list_images(d)
        if len(files) != n:
            raise ConfigError(f"{key}: {len(files)} images for {n} detection frames in {d}")
        setattr(inp, key, files)
    if cfg.paths.ground_truth:
        inp.ground_truth = load_ground_truth(cfg.resolve(cfg.paths.ground_truth))
    return inp


# ---------------------------------------------------------------- outputs

def write_mesh_sequence(out_dir: Path, triangles: np.ndarray, vertices: np.ndarray) -> list[str]:
    """Shared ``faces.obj`` plus one vertex-only OBJ per frame; returns relative file names."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "faces.obj").write_text(
        "".join(f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in np.asarray(triangles).tolist()))
    names = []
    for f, V in enumerate(vertices):
        name = f"frame_{f:05d}.obj"
        (out_dir / name).write_text("".join(f"v {x!r} {y!r} {z!r}\n" for x, y, z in V.tolist()))
        names.append(name)
    return names


def read_mesh_sequence(mesh_dir) -> tuple[np.ndarray, np.ndarray]:
    from .kinematics import load_obj

    mesh_dir = Path(mesh_dir)
    _, F = load_obj(mesh_dir / "faces.obj")
    frames = sorted(mesh_dir.glob("frame_*.obj"))
    V = np.stack([load_obj(p)[0] for p in frames]) if frames else np.zeros((0, 0, 3))
    return V, F


@dataclass
class RunResult:
    poses: list[SkeletonPose]
    vertices: np.ndarray
    stages: dict[str, list[SkeletonPose]] = field(default_factory=dict)
    masks: list[np.ndarray] | None = None
    metrics: object | None = None
    timings: dict[str, float] = field(default_factory=dict)
    flagged: dict[str, list[int]] = field(default_factory=dict)
    output_dir: Path | None = None


class _Run:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = cfg.output_dir
        self.files: dict[str, object] = {}
        self.timings: dict[str, float] = {}
        self.stages_done: list[str] = []

    def _map(self, fn, items):
        if self.cfg.parallelism <= 1:
            return list(map(fn, items))
        with ThreadPoolExecutor(self.cfg.parallelism) as ex:
            return list(ex.map(fn, items))

    def stage(self, name, fn, *args):
        log.info("stage %s", name)
        t0 = time.perf_counter()
        try:
            result = fn(*args)
        except PipelineError as e:
            if getattr(e, "stage", None) is None:
                e.stage = name
            raise
        except Exception as e:  # noqa: BLE001 - reported with the stage name
            raise StageError(name, e) from e
        self.timings[name] = time.perf_counter() - t0
        self.stages_done.append(name)
        return result

    def write_poses(self, key: str, poses):
        path, sidecar = save_poses(self.out / f"poses_{key}.json", poses)
        self.files[f"poses_{key}"] = path.name
        self.files[f"poses_{key}_bin"] = sidecar.name

    def manifest(self, status: str, error: dict | None = None):
        doc = {"status": status, "stages": self.stages_done, "files": self.files,
               "config": self.cfg.to_dict()}
        if error:
            doc["error"] = error
        (self.out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _frame_masks_stage(run: _Run, inp: Inputs, poses, tag: str, prev_masks=None):
    """Silhouette per frame: user masks when given, otherwise GrabCut on a model trimap."""
    if inp.masks is not None:
        return [load_mask_png(p) for p in inp.masks], None
    cfg = run.cfg
    params = cfg.grabcut_params()
    tdir = run.out / "trimaps"
    tdir.mkdir(parents=True, exist_ok=True)
    images = [load_image(p) for p in inp.frames]

    def one(f):
        prev = images[f - 1] if f > 0 else None
        tm = model_trimap(inp.rig, inp.template, poses[f], inp.cam)
        save_trimap_png(tdir / f"{tag}_{f:05d}.png", tm)
        return grabcut(images[f], tm, motion_weights(images[f], prev), params).mask

    return run._map(one, range(len(images))), images


def _write_masks(run: _Run, masks, tag: str):
    mdir = run.out / f"masks_{tag}"
    mdir.mkdir(parents=True, exist_ok=True)
    for f, m in enumerate(masks):
        save_mask_png(mdir / f"frame_{f:05d}.png", m)
    run.files[f"masks_{tag}"] = mdir.name


def run(cfg: PipelineConfig) -> RunResult:
    """init -> gate -> batch solve -> blend, then the optional silhouette refinement.

    Every intermediate pose sequence is written under the output directory.
    Failures leave the outputs written so far plus ``error.json`` and raise
    a :class:`PipelineError`.
    """
    cfg.validate()
    run_ = _Run(cfg)
    run_.out.mkdir(parents=True, exist_ok=True)
    err_path = run_.out / "error.json"
    if err_path.exists():
        err_path.unlink()
    try:
        return _run(cfg, run_)
    except PipelineError as e:
        stage = getattr(e, "stage", "input")
        cause = getattr(e, "cause", e)
        error = {"stage": stage, "type": type(cause).__name__, "message": str(cause),
                 "exit_code": e.exit_code,
                 "traceback": traceback.format_exception_only(type(cause), cause)}
        err_path.write_text(json.dumps(error, indent=2, sort_keys=True) + "\n")
        run_.manifest("failed", error)
        raise


def _run(cfg: PipelineConfig, run_: _Run) -> RunResult:
    inp = run_.stage("load", load_inputs, cfg)
    rig, template, cam = inp.rig, inp.template, inp.cam
    weights = cfg.pose_weights()

    est = run_.stage("batch_pose", lambda: estimate_poses(
        inp.detections, rig, cam, weights, cfg.pose.batch, cfg.pose.overlap, cfg.pose.thres_pck,
        cfg.pose.gating, cfg.lm_options(), map_fn=run_._map))
    run_.write_poses("init", est["init"])
    run_.write_poses("batch", est["poses"])
    gates = [float(g) for g in est["gates"]]
    (run_.out / "gates.json").write_text(json.dumps(gates) + "\n")
    run_.files["gates"] = "gates.json"
    stages = {"init": est["init"], "batch": est["poses"]}
    flagged = {"init": list(est["init_report"].flagged)}

    poses = est["poses"]
    verts = np.stack([skin_mesh(template, rig, p) for p in poses])
    final_masks = None
    if cfg.refinement_enabled:
        rcfg = cfg.refinement_config()
        name = "segment_pass1" if inp.masks is None else "load_masks"
        masks, images = run_.stage(name, _frame_masks_stage, run_, inp, poses, "pass1")
        _write_masks(run_, masks, "pass1")

        if cfg.stages.pose_refinement:
            def pose_one(f):
                return refine_pose(poses[f], template, rig, cam, extract_contour(masks[f]), rcfg)

            res = run_.stage("pose_refine", run_._map, pose_one, range(len(poses)))
            poses = [r[0] for r in res]
            flagged["pose_refine"] = [f for f, r in enumerate(res) if r[1].flagged]
            run_.write_poses("pose_refined", poses)
            stages["pose_refined"] = poses
            verts = np.stack([skin_mesh(template, rig, p) for p in poses])

        if inp.masks is None and cfg.stages.pose_refinement:
            params = cfg.grabcut_params()

            def seg_one(f):
                prev = images[f - 1] if f > 0 else None
                m, tm = second_pass_segmentation(images[f], prev, rig, template, poses[f], cam, params)
                save_trimap_png(run_.out / "trimaps" / f"pass2_{f:05d}.png", tm)
                return m

            masks = run_.stage("segment_pass2", run_._map, seg_one, range(len(poses)))
            _write_masks(run_, masks, "pass2")

        if cfg.stages.surface_refinement:
            cached = None if rcfg.rebuild_graph_per_frame else surface_graph(
                verts[0], template.triangles, rcfg)

            def surf_one(f):
                g = surface_graph(verts[f], template.triangles, rcfg, cached)
                return refine_surface(g, extract_contour(masks[f]), cam, rcfg)

            res = run_.stage("surface_refine", run_._map, surf_one, range(len(poses)))
            flagged["surface_refine"] = [f for f, r in enumerate(res) if r[1].flagged]
            refined = np.stack([r[0] for r in res])
            if cfg.refine.smooth == "vertices":
                verts = run_.stage("temporal_smooth", temporal_smooth, refined, rcfg.window)
            else:
                verts = verts + run_.stage("temporal_smooth", temporal_smooth, refined - verts,
                                           rcfg.window)
        final_masks = masks

    run_.write_poses("final", poses)
    stages["final"] = poses
    names = run_.stage("write_meshes", write_mesh_sequence, run_.out / "meshes",
                       template.triangles, verts)
    run_.files["meshes"] = {"dir": "meshes", "faces": "faces.obj", "frames": names}
    (run_.out / "flagged.json").write_text(json.dumps(flagged, sort_keys=True) + "\n")
    run_.files["flagged"] = "flagged.json"

    metrics = None
    if inp.ground_truth is not None:
        metrics = run_.stage("evaluate", evaluate_run, inp, poses, verts)
        from .metrics import metrics_csv, summary_csv
        (run_.out / "metrics.csv").write_text(metrics_csv(metrics))
        (run_.out / "summary.csv").write_text(summary_csv(metrics))
        run_.files["metrics"] = "metrics.csv"
        run_.files["summary"] = "summary.csv"

    (run_.out / "timings.json").write_text(json.dumps(run_.timings, indent=2) + "\n")
    run_.files["timings"] = "timings.json"
    if metrics is not None:
        metrics.runtime = dict(run_.timings)
    run_.manifest("ok")
    return RunResult(poses, verts, stages, final_masks, metrics, dict(run_.timings), flagged,
                     run_.out)


def evaluate_run(inp: Inputs, poses, verts):
    from .metrics import MetricsError, evaluate

    gt = inp.ground_truth
    if "joints" not in gt:
        raise MetricsError("ground truth has no 'joints' array")
    pred_joints = np.stack([joint_positions(inp.rig, p) for p in poses])
    gv = gt.get("vertices")
    pred_masks = gt_masks = None
    if "masks" in gt:
        gt_masks = gt["masks"]
        pred_masks = [render_mask(v, inp.template.triangles, inp.cam) for v in verts]
    return evaluate(pred_joints, gt["joints"], verts if gv is not None else None, gv,
                    pred_masks, gt_masks)


# ---------------------------------------------------------------- synthetic datasets

def write_synthetic_dataset(ds, out_dir, config: PipelineConfig | None = None) -> Path:
    """Write a dataset and a ready-to-run ``config.toml``; returns the config path."""
    from .detections import save_detections
    from .kinematics import save_camera, save_obj, save_rig

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_obj(out / "template.obj", ds.template.vertices, ds.template.triangles)
    save_rig(out / "rig.json", ds.rig, ds.template.skin_weights)
    save_camera(out / "camera.json", ds.cam)
    save_detections(out / "detections.json", ds.detections, ds.rig.names)
    save_poses(out / "gt_poses.json", ds.poses)
    gt = {"joints": ds.joints, "vertices": ds.vertices}
    cfg = config or PipelineConfig()
    cfg.paths = PathsConfig("template.obj", "rig.json", "camera.json", "detections.json",
                            "output", ground_truth="ground_truth.npz")
    if ds.masks is not None:
        gt["masks"] = ds.masks
        (out / "masks").mkdir(exist_ok=True)
        for f, m in enumerate(ds.masks):
            save_mask_png(out / "masks" / f"frame_{f:05d}.png", m)
    if ds.frames is not None:
        from .segment import save_image
        (out / "frames").mkdir(exist_ok=True)
        for f, img in enumerate(ds.frames):
            save_image(out / "frames" / f"frame_{f:05d}.png", img)
        cfg.paths.frames = "frames"
    elif ds.masks is not None:
        cfg.paths.masks = "masks"
    if cfg.paths.frames is None and cfg.paths.masks is None:
        cfg.stages.refinement = False
    np.savez_compressed(out / "ground_truth.npz", **gt)
    path = out / "config.toml"
    path.write_text(cfg.to_toml())
    return path
