"""Command-line pipeline: synth -> train -> render -> extract-mesh -> composite, plus utilities.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import dataclass, replace
from dataclasses import field as dc_field
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("n2s")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
IMAGE_SUFFIXES = {".png", ".ppm", ".jpg", ".jpeg"}


class ConfigError(ValueError):
    pass


# --- config and manifest ---------------------------------------------------------

SECTIONS = ("paths", "field", "render", "train", "geometry", "synth", "rewards", "preset", "seed")


@dataclass
class PipelineConfig:
    paths: dict = dc_field(default_factory=dict)
    field: dict = dc_field(default_factory=dict)
    render: dict = dc_field(default_factory=dict)
    train: dict = dc_field(default_factory=dict)
    geometry: dict = dc_field(default_factory=dict)
    synth: dict = dc_field(default_factory=dict)
    rewards: dict = dc_field(default_factory=dict)
    preset: str = "desk"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        for key in d:
            if key not in SECTIONS:
                raise ConfigError(f"unknown config section '{key}'")
        cfg = cls(**d)
        if cfg.preset not in ("desk", "paper"):
            raise ConfigError(f"unknown preset '{cfg.preset}'")
        return cfg

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in SECTIONS}

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class RunManifest:
    """Tool version, config hash, stage timings and hashes of every output file."""

    def __init__(self, command: str, config: PipelineConfig):
        self.command = command
        self.config_hash = config.hash()
        self.timings: dict[str, float] = {}
        self.outputs: list[Path] = []

    def stage(self, name: str):
        manifest = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                manifest.timings[name] = time.perf_counter() - self.t0

        return _Timer()

    def add(self, path) -> Path:
        path = Path(path)
        self.outputs.append(path)
        return path

    def write(self, out_dir: Path) -> Path:
        files = sorted(set(self.outputs))
        record = {
            "tool_version": __version__,
            "command": self.command,
            "config_hash": self.config_hash,
            "timings": self.timings,
            "outputs": [{"path": str(p.relative_to(out_dir)), "sha256": sha256_file(p)} for p in files],
        }
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
        return path


def verify_manifest(out_dir) -> bool:
    out_dir = Path(out_dir)
    record = json.loads((out_dir / "manifest.json").read_text())
    return all(
        (out_dir / o["path"]).exists() and sha256_file(out_dir / o["path"]) == o["sha256"] for o in record["outputs"]
    )


def read_json(path, what: str):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path}: invalid JSON ({exc})") from exc


def write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def _build(cls, section: dict, name: str, base=None):
    try:
        if base is None:
            return cls.from_dict(section)
        merged = {**base.to_dict(), **section}
        unknown = set(section) - set(base.to_dict())
        if unknown:
            raise ConfigError(f"unknown {name} config key '{sorted(unknown)[0]}'")
        return cls.from_dict(merged)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{name} config: {exc}") from exc


def field_config(cfg: PipelineConfig):
    from .field import FieldConfig, desk_field_config

    base = desk_field_config() if cfg.preset == "desk" else FieldConfig()
    return _build(FieldConfig, cfg.field, "field", base)


def render_config(cfg: PipelineConfig, base=None):
    from .render import RenderConfig, desk_render_config

    if base is None:
        base = desk_render_config() if cfg.preset == "desk" else RenderConfig()
    return _build(RenderConfig, cfg.render, "render", base)


def train_config(cfg: PipelineConfig):
    from .train import TrainConfig, desk_train_config

    base = desk_train_config() if cfg.preset == "desk" else TrainConfig()
    tc = _build(TrainConfig, cfg.train, "train", base)
    if "seed" not in cfg.train:
        tc = replace(tc, seed=cfg.seed)
    return tc


# --- commands ---------------------------------------------------------------------


def cmd_keyframes(args, cfg: PipelineConfig, out: Path, manifest: RunManifest) -> None:
    from .ingest import DataError, load_image, select_keyframes, sharpness_score

    frames_dir = Path(args.frames or cfg.paths.get("frames", ""))
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"frames directory not found: {frames_dir}")
    files = sorted(p for p in frames_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no frames in {frames_dir}")
    with manifest.stage("load"):
        frames = [load_image(p) for p in files]
    with manifest.stage("select"):
        chosen = select_keyframes(frames, args.n)
    key_dir = out / "keyframes"
    key_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for i in chosen:
        dst = key_dir / files[i].name
        shutil.copyfile(files[i], dst)
        manifest.add(dst)
        index.append({"index": i, "name": files[i].name, "sharpness": sharpness_score(frames[i])})
    manifest.add(write_json(out / "keyframes.json", index))


def cmd_parse_sfm(args, cfg: PipelineConfig, out: Path, manifest: RunManifest) -> None:
    from .ingest import parse_sfm_cameras, parse_sfm_images

    sfm = Path(args.sfm or cfg.paths.get("sfm", ""))
    for name in ("cameras.txt", "images.txt"):
        if not (sfm / name).exists():
            raise FileNotFoundError(f"{sfm / name} not found")
    camera = parse_sfm_cameras((sfm / "cameras.txt").read_text())
    poses = parse_sfm_images((sfm / "images.txt").read_text())
    manifest.add(write_json(out / "camera.json", camera.to_dict()))
    manifest.add(write_json(out / "poses.json", [{"name": n, **p.to_dict()} for n, p in poses]))


def _write_sfm_dir(directory: Path, dataset, manifest: RunManifest) -> None:
    from .ingest import format_sfm_cameras, format_sfm_images, save_png

    img_dir = directory / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for im in dataset.images:
        path = img_dir / im.name
        save_png(path, im.image)
        manifest.add(path)
    (directory / "cameras.txt").write_text(format_sfm_cameras(dataset.camera))
    (directory / "images.txt").write_text(format_sfm_images([(im.name, im.pose) for im in dataset.images]))
    manifest.add(directory / "cameras.txt")
    manifest.add(directory / "images.txt")


def cmd_synth(args, cfg: PipelineConfig, out: Path, manifest: RunManifest) -> None:
    from .synthetic import SyntheticSceneSpec, generate_synthetic_scene

    spec_dict = dict(cfg.synth.get("spec", {}))
    if args.spec:
        spec_dict.update(read_json(args.spec, "scene spec"))
    unknown = set(cfg.synth) - {"spec", "train", "test"}
    if unknown:
        raise ConfigError(f"unknown synth config key '{sorted(unknown)[0]}'")
    spec = _build(SyntheticSceneSpec, spec_dict, "scene spec")
    n_train = args.train if args.train is not None else int(cfg.synth.get("train", 150))
    n_test = args.test if args.test is not None else int(cfg.synth.get("test", 10))
    with manifest.stage("trace"):
        train, test, scene = generate_synthetic_scene(spec, n_train, n_test, cfg.seed)
    with manifest.stage("write"):
        _write_sfm_dir(out / "train", train, manifest)
        if test is not None:
            _write_sfm_dir(out / "test", test, manifest)
        record = scene.record()
        record["scene_bounds"] = [list(b) for b in scene.scene_bounds()]
        record["seed"] = cfg.seed
        manifest.add(write_json(out / "sdf.json", record))


def _load_dataset(path):
    from .ingest import load_sfm_dataset

    path = Path(path)
    if not (path / "cameras.txt").exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return load_sfm_dataset(path)


def cmd_train(args, cfg: PipelineConfig, out: Path, manifest: RunManifest) -> None:
    from .checkpoint import load_checkpoint
    from .train import fit

    fc, rc, tc = field_config(cfg), render_config(cfg), train_config(cfg)
    data = args.data or cfg.paths.get("dataset")
    if not data:
        raise ConfigError("no dataset given (--data or paths.dataset)")
    with manifest.stage("load"):
        dataset = _load_dataset(data)
        test_dir = args.test or cfg.paths.get("test")
        test = _load_dataset(test_dir) if test_dir else None
    ckpt = out / "checkpoint.n2s"
    metrics = out / "metrics.csv"
    initial, start, resume = None, 0, None
    if args.resume:
        resume = Path(args.resume)
        if not resume.exists():
            raise FileNotFoundError(f"checkpoint not found: {resume}")
        initial, extras = load_checkpoint(resume)
        start = int(extras.get("step", 0))
        if resume.resolve() != ckpt.resolve():
            shutil.copyfile(resume, ckpt)
        prev_metrics = resume.parent / "metrics.csv"
        if prev_metrics.exists() and prev_metrics.resolve() != metrics.resolve():
            shutil.copyfile(prev_metrics, metrics)
    extras = {
        "render": rc.to_dict(),
        "train": tc.to_dict(),
        "camera": dataset.camera.to_dict(),
        "scene_bounds": [list(b) for b in dataset.scene_bounds],
        "camera_center": np.mean([im.pose.position for im in dataset.images], axis=0).tolist(),
    }
    with manifest.stage("fit"):
        fit(dataset, fc, rc, tc, test=test, checkpoint_path=ckpt, metrics_path=metrics,
            resume_from=resume, initial_field=initial, start_step=start, extras=extras)
    manifest.add(ckpt)
    manifest.add(metrics)


def _load_checkpoint(path):
    from .checkpoint import load_checkpoint

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _parse_resolution(text):
    if text is None:
        return None
    try:
        w, h = (int(v) for v in str(text).lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"resolution must look like WxH, got {text!r}") from exc
    return w, h


def _load_poses(path):
    from .ingest import Pose

    data = read_json(path, "poses")
    if isinstance(data, dict):
        data = [data]
    try:
        return [(d.get("name", f"{i:04d}"), Pose.from_dict(d)) for i, d in enumerate(data)]
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"poses {path}: {exc}") from exc


def _load_camera(path):
    from .ingest import CameraIntrinsics

    try:
        return CameraIntrinsics.from_dict(read_json(path, "camera"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"camera {path}: {exc}") from exc


def cmd_render(args, cfg: PipelineConfig, out: Path, manifest: RunManifest) -> None:
    from .ingest import save_png
    from .render import RenderConfig, render_image, write_pfm

    field_, extras = _load_checkpoint(args.checkpoint)
    base = RenderConfig.from_dict(extras["render"]) if "render" in extras else None
    rc = render_config(cfg, base)
    camera = _load_camera(args.camera)
    poses = _load_poses(args.poses)
    resolution = _parse_resolution(args.resolution)
    render_dir = out / "renders"
    render_dir.mkdir(parents=True, exist_ok=True)
    with manifest.stage("render"):
        for i, (name, pose) in enumerate(poses):
            image, depth = render_image(field_, camera, pose, rc, resolution)
            path = render_dir / f"{i:04d}.png"
            save_png(path, image)
            manifest.add(path)
            depth_path = render_dir / f"{i:04d}_depth.pfm"
            write_pfm(depth_path, depth)
            manifest.add(depth_path)


def _floor_points(mesh, selection) -> np.ndarray:
    sel = np.asarray(selection)
    if sel.ndim == 1:
        idx = sel.astype(np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(mesh.vertices)):
            raise ConfigError("floor selection index out of range")
        return mesh.vertices[idx]
    # xyz probes snap to their nearest mesh vertex
    probes = sel.reshape(-1, 3).astype(np.float64)
    d = ((probes[:, None, :] - mesh.vertices[None, :, :]) ** 2).sum(-1)
    return mesh.vertices[np.argmin(d, axis=1)]


GEOMETRY_KEYS = {
    "bounds", "resolution", "threshold", "floor_selection", "yaw", "scale_reference", "crop",
    "z_tolerance", "workspace", "cell_size", "clearance", "height_band",
}


def cmd_extract_mesh(args, cfg: PipelineConfig, out: Path, manifest: RunManifest) -> None:
    from . import geometry as geo

    g = dict(cfg.geometry)
    unknown = set(g) - GEOMETRY_KEYS
    if unknown:
        raise ConfigError(f"unknown geometry config key '{sorted(unknown)[0]}'")
    if args.threshold is not None:
        g["threshold"] = args.threshold
    if args.floor_selection:
        g["floor_selection"] = args.floor_selection
    field_, extras = _load_checkpoint(args.checkpoint)
    bounds = g.get("bounds", extras.get("scene_bounds"))
    if bounds is None:
        raise ConfigError("geometry.bounds missing and checkpoint has no scene bounds")
    res = g.get("resolution", 64)
    res = (res,) * 3 if isinstance(res, int) else tuple(res)
    with manifest.stage("voxelize"):
        grid = geo.voxelize_density(field_, bounds, res)
    with manifest.stage("marching_cubes"):
        mesh = geo.marching_cubes(grid, float(g.get("threshold", 0.5)))
    record = {"units": "scene", "triangles_raw": len(mesh), "convex_parts": []}
    sel_path = g.get("floor_selection")
    if sel_path:
        selection = read_json(sel_path, "floor selection")
        if len(mesh) == 0:
            raise ValueError("empty mesh: cannot align")
        with manifest.stage("align"):
            toward = None
            if "camera_center" in extras:
                toward = extras["camera_center"]
            plane = geo.fit_floor_plane(_floor_points(mesh, selection), toward)
            transform = geo.compute_alignment(plane, float(g.get("yaw", 0.0)), tuple(g.get("scale_reference", (1.0, 1.0))))
            mesh = geo.apply_transform(mesh, transform)
            manifest.add(write_json(out / "alignment.json", transform.to_dict()))
            mesh, floor = geo.replace_floor(mesh, float(g.get("z_tolerance", 0.02)))
            manifest.add(write_json(out / "floor.json", floor.to_dict()))
            if "crop" in g:
                mesh = geo.crop_mesh(mesh, g["crop"])
        record["units"] = "world"
        if "workspace" in g:
            with manifest.stage("free_space"):
                fmap = geo.free_space_map(
                    mesh, g["workspace"], float(g.get("cell_size", 0.05)), float(g.get("clearance", 0.25)),
                    tuple(g.get("height_band", (float(g.get("z_tolerance", 0.02)), 1.0))),
                )
            manifest.add(write_json(out / "free_space.json", fmap.to_dict()))
    elif "crop" in g:
        mesh = geo.crop_mesh(mesh, g["crop"])
    record["triangles"] = len(mesh)
    mesh_path = out / "mesh.obj"
    mesh_path.write_text(geo.export_obj(mesh))
    manifest.add(mesh_path)
    manifest.add(write_json(out / "mesh_manifest.json", record))


def cmd_composite(args, cfg: PipelineConfig, out: Path, manifest: RunManifest) -> None:
    from .compositor import overlay, render_objects
    from .ingest import DataError, load_image, save_png

    image_path = Path(args.image)
    if not image_path.exists():
        raise FileNotFoundError(f"image not found: {image_path}")
    static = load_image(image_path)
    camera = _load_camera(args.camera)
    pose = _load_poses(args.pose)[0][1]
    objects = read_json(args.objects, "objects")
    if static.shape[:2] != (camera.height, camera.width):
        raise DataError(
            f"render is {static.shape[1]}x{static.shape[0]} but camera is {camera.width}x{camera.height}"
        )
    try:
        layers = render_objects(objects, camera, pose)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"objects {args.objects}: {exc}") from exc
    path = out / "composite.png"
    save_png(path, overlay(static, layers))
    manifest.add(path)


def _reward_item(item: dict, default_task: str, cfg_dict: dict):
    from . import simkit

    if "fn" in item:
        fns = {
            "rho": simkit.rho, "r_ball": simkit.r_ball, "r_turn": simkit.r_turn, "r_speed": simkit.r_speed,
            "r_navigate": simkit.r_navigate, "r_navigate_sparse": simkit.r_navigate_sparse,
            "exponential_filter": simkit.exponential_filter,
        }
        name = item["fn"]
        if name == "r_pose":
            joints = simkit.load_joint_specs(item.get("task", default_task))
            return simkit.r_pose(item["args"]["q"], joints)
        if name == "total_reward":
            rc = simkit.RewardConfig.from_dict({**cfg_dict, "task": item.get("task", default_task)})
            return simkit.total_reward(rc.task, item["components"], rc)
        if name not in fns:
            raise ConfigError(f"unknown reward function '{name}'")
        value = fns[name](**item.get("args", {}))
        return value.tolist() if isinstance(value, np.ndarray) else float(value)
    task = item.get("task", default_task)
    rc = simkit.RewardConfig.from_dict({**cfg_dict, "task": task})
    inputs = simkit.RewardInputs(**item["inputs"])
    comps = simkit.reward_components(inputs, rc)
    return {"components": comps, "total": simkit.total_reward(task, comps, rc)}


def cmd_rewards_eval(args, cfg: PipelineConfig, out: Path, manifest: RunManifest) -> None:
    data = read_json(args.inputs, "reward inputs")
    items = data["items"] if isinstance(data, dict) else data
    task = data.get("task", "navigation") if isinstance(data, dict) else "navigation"
    rcfg = {k: v for k, v in cfg.rewards.items() if k != "task"}
    task = cfg.rewards.get("task", task)
    try:
        results = [_reward_item(item, task, rcfg) for item in items]
    except ConfigError:
        raise
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"reward inputs: {exc}") from exc
    manifest.add(write_json(out / "rewards.json", results))


COMMANDS = {
    "keyframes": cmd_keyframes,
    "parse-sfm": cmd_parse_sfm,
    "synth": cmd_synth,
    "train": cmd_train,
    "render": cmd_render,
    "extract-mesh": cmd_extract_mesh,
    "composite": cmd_composite,
    "rewards-eval": cmd_rewards_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="n2s", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keyframes", parents=[common], help="pick the sharpest frame per video partition")
    p.add_argument("--frames", help="directory of video frames")
    p.add_argument("--n", type=int, required=True)

    p = sub.add_parser("parse-sfm", parents=[common], help="convert SfM text output to JSON")
    p.add_argument("--sfm", help="directory with cameras.txt and images.txt")

    p = sub.add_parser("synth", parents=[common], help="ray-trace a synthetic room dataset")
    p.add_argument("--spec", help="scene spec JSON")
    p.add_argument("--train", type=int)
    p.add_argument("--test", type=int)

    p = sub.add_parser("train", parents=[common], help="fit a radiance field")
    p.add_argument("--data", help="training dataset directory")
    p.add_argument("--test", help="held-out dataset directory")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("render", parents=[common], help="render views from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--camera", required=True, help="camera intrinsics JSON")
    p.add_argument("--poses", required=True, help="camera-to-world poses JSON")
    p.add_argument("--resolution", help="WxH")

    p = sub.add_parser("extract-mesh", parents=[common], help="collision mesh, alignment and free-space map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--floor-selection", help="JSON list of vertex indices or xyz probes")

    p = sub.add_parser("composite", parents=[common], help="overlay dynamic objects on a render")
    p.add_argument("--image", required=True)
    p.add_argument("--objects", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--pose", required=True)

    p = sub.add_parser("rewards-eval", parents=[common], help="evaluate reward formulas from JSON")
    p.add_argument("--inputs", required=True)
    return parser


def _set_threads() -> None:
    n = os.environ.get("N2S_THREADS")
    if not n:
        return
    try:
        n = max(1, int(n))
    except ValueError as exc:
        raise ConfigError(f"N2S_THREADS must be an integer, got {n!r}") from exc
    import torch

    torch.set_num_threads(n)
    try:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:  # pragma: no cover
        pass


def _exit_code(exc: BaseException) -> int | None:
    from .checkpoint import CheckpointError
    from .field import CorruptParameters
    from .ingest import DataError
    from .render import DistortionInversionError
    from .train import NonFiniteLoss

    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (NonFiniteLoss, DistortionInversionError, CorruptParameters, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, CheckpointError, FileNotFoundError)):
        return EXIT_DATA
    if isinstance(exc, ValueError):
        return EXIT_DATA
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _set_threads()
        if args.config and not Path(args.config).exists():
            raise ConfigError(f"config not found: {args.config}")
        raw = read_json(args.config, "config") if args.config else {}
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        cfg = PipelineConfig.from_dict(raw)
        if args.seed is not None:
            cfg.seed = args.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(args.command, cfg)
        COMMANDS[args.command](args, cfg, out, manifest)
        manifest.write(out)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"n2s {args.command}: error: {exc}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
