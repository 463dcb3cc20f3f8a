"""Command-line entry points: generate, refine, evaluate, export-il."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import BundleError, dump_json, find_bundles, load_bundle, pose_table, save_bundle
from .datagen import DEFAULT_CAMERA, AugmentationConfig, ScenarioConfig, build_state, generate_scene, perturb_pose
from .environment import (
    STEP_SIZES,
    EnvConfig,
    ScoringContext,
    export_il_dataset,
    il_records,
    refine_scene,
    write_trajectory_csv,
)
from .geometry import RigidTransform
from .metrics import THRESHOLDS, evaluate_pose, summarize
from .plausibility import fit_plane_ransac
from .scoring import CameraIntrinsics

LOG_ENV = "SCENEREFINE_LOG"
EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
log = logging.getLogger("scenerefine")


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# helpers


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_manifest(path: Path, command: str, cfg: dict, seed: int, timings: dict, outputs: list) -> None:
    """Write the run manifest via a temp file and rename so readers never see a partial file."""
    doc = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "version": __version__,
        "timings": timings,
        "outputs": sorted(str(o) for o in outputs),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest-", suffix=".json")
    with os.fdopen(fd, "w") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def _check_keys(section: str, d: dict, allowed) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {', '.join(unknown)}")


def _build(cls, section: str, d: dict):
    _check_keys(section, d, [f.name for f in fields(cls)])
    try:
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from None


def parse_steps(text: str) -> tuple:
    try:
        steps = tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"--steps: not a comma-separated list of numbers: {text!r}") from None
    if not steps or any(s <= 0 for s in steps) or list(steps) != sorted(set(steps)):
        raise argparse.ArgumentTypeError("--steps: need strictly increasing positive values")
    return steps


def env_config(args, cfg: dict) -> EnvConfig:
    section = dict(cfg.get("refine", {}))
    _check_keys("refine", section, [f.name for f in fields(EnvConfig)] + ["points", "plane"])
    section.pop("points", None)
    section.pop("plane", None)
    for flag, key in (("iterations", "iterations"), ("epsilon", "epsilon"), ("tau_d", "tau_d"),
                      ("tau_n", "tau_n"), ("steps", "steps")):
        v = getattr(args, flag, None)
        if v is not None:
            section[key] = v
    try:
        env = EnvConfig.from_dict(section)
        env.space
        env.score
    except (TypeError, ValueError) as e:
        raise ConfigError(f"refine: {e}") from None
    if env.iterations < 0:
        raise ConfigError("refine: iterations must be >= 0")
    if env.epsilon <= 0:
        raise ConfigError("refine: epsilon must be positive")
    return env


def _map(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, *zip(*jobs)))


# --------------------------------------------------------------------------
# generate

GENERATE_KEYS = ("count", "scenario", "perturbation", "camera")


def generate_settings(cfg: dict, seed: int):
    _check_keys("config", cfg, GENERATE_KEYS + ("refine",))
    count = cfg.get("count", 10)
    if not isinstance(count, int) or count < 1:
        raise ConfigError("count: must be a positive integer")
    scenario = _build(ScenarioConfig, "scenario", {**cfg.get("scenario", {}), "seed": seed})
    perturb = _build(AugmentationConfig, "perturbation", cfg.get("perturbation", {}))
    cam_d = cfg.get("camera", DEFAULT_CAMERA.to_dict())
    _check_keys("camera", cam_d, ["fx", "fy", "cx", "cy", "width", "height"])
    try:
        cam = CameraIntrinsics.from_dict(cam_d)
    except (KeyError, ValueError) as e:
        raise ConfigError(f"camera: {e}") from None
    return count, scenario, perturb, cam


def _generate_one(index, scenario, perturb, cam, out_dir):
    seed = derive_seed(scenario.seed, index)
    scene = generate_scene(scenario, cam, seed=seed)
    rng = np.random.default_rng(derive_seed(scenario.seed, index, 1))
    inits = {o.object_id: perturb_pose(o.gt, perturb, rng, o.model.scale) for o in scene.objects}
    path = save_bundle(scene, Path(out_dir) / f"scene_{index:04d}", inits)
    return str(path)


def cmd_generate(args) -> int:
    t0 = time.perf_counter()
    cfg = read_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("scenario", {}).get("seed", 0)
    if args.count is not None:
        cfg["count"] = args.count
    count, scenario, perturb, cam = generate_settings(cfg, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(i, scenario, perturb, cam, str(out)) for i in range(count)]
    paths = _map(_generate_one, jobs, args.workers)
    outputs = [Path(p).relative_to(out) for p in paths]
    effective = {"count": count, "scenario": scenario.to_dict(), "perturbation": _jsonable(asdict(perturb)),
                 "camera": cam.to_dict()}
    write_manifest(out / "manifest.json", "generate", effective, seed,
                   {"total_s": time.perf_counter() - t0}, outputs)
    log.info("wrote %d scene bundles to %s", count, out)
    return EXIT_OK


def _jsonable(d: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


# --------------------------------------------------------------------------
# refine


def visible_indices(scene, min_pixels: int = 3) -> list:
    return [i for i, o in enumerate(scene.objects) if int((scene.labels == o.object_id).sum()) >= min_pixels]


def fit_scene_plane(scene, seed: int, where: str = ""):
    bg = (scene.labels == 0) & (scene.depth > 0)
    pts, _, _ = scene.cam.backproject(scene.depth, bg)
    if len(pts) < 3:
        raise DataError(f"{where}: not enough background pixels to fit the plane")
    return fit_plane_ransac(pts, seed=seed)


def load_state(bundle_path, points: int, plane_mode: str, seed: int):
    """Scene bundle -> (SceneState at the stored initial estimates, scoring context)."""
    scene, inits = load_bundle(bundle_path)
    visible = visible_indices(scene)
    if not visible:
        raise DataError(f"{bundle_path}: no visible objects")
    estimates = [inits.get(scene.objects[i].object_id, scene.objects[i].gt) for i in visible]
    plane = fit_scene_plane(scene, seed, str(bundle_path)) if plane_mode == "ransac" else None
    state = build_state(scene, estimates, n=points, seed=seed, plane=plane, indices=visible)
    masks = [scene.labels == scene.objects[i].object_id for i in visible]
    return state, ScoringContext(scene.cam, scene.depth, scene.normals, masks)


def _refine_one(bundle, out_dir, policy, env: EnvConfig, points, plane_mode, seed):
    name = Path(bundle).name
    state, scoring = load_state(bundle, points, plane_mode, seed)
    trajs = refine_scene(state, policy, env.iterations, env, scoring)
    dest = Path(out_dir) / name
    dest.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(trajs, dest / "trajectory.csv")
    best, init, best_iter, rows = {}, {}, {}, []
    for t, obj in zip(trajs, state.objects):
        idx, pose = t.best()
        best[t.object_id], init[t.object_id], best_iter[str(t.object_id)] = pose, t.init_pose, idx
        if obj.gt is not None:
            add0 = evaluate_pose(obj.model.target_cloud, obj.gt, t.init_pose, obj.model.diameter).add
            add1 = evaluate_pose(obj.model.target_cloud, obj.gt, pose, obj.model.diameter).add
            rows.append({"object_id": t.object_id, "add_init": add0, "add_best": add1})
    dump_json({"best": pose_table(best), "init": pose_table(init), "best_iteration": best_iter},
              dest / "poses.json")
    return name, rows


def cmd_refine(args) -> int:
    t0 = time.perf_counter()
    cfg = read_config(args.config)
    env = env_config(args, cfg)
    section = cfg.get("refine", {})
    points = int(section.get("points", 1024))
    plane_mode = args.plane or section.get("plane", "ransac")
    if plane_mode not in ("ransac", "gt"):
        raise ConfigError("refine.plane: expected 'ransac' or 'gt'")
    seed = args.seed if args.seed is not None else 0
    bundles = find_bundles(args.scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(str(b), str(out), args.policy, env, points, plane_mode, derive_seed(seed, i))
            for i, b in enumerate(bundles)]
    results = _map(_refine_one, jobs, args.workers)
    rows = [dict(r, scene=name) for name, rs in results for r in rs]
    improved = [r["add_best"] < r["add_init"] for r in rows]
    summary = {
        "policy": args.policy,
        "scenes": len(results),
        "objects": len(rows),
        "improvement_rate": float(np.mean(improved)) if rows else None,
        "mean_add_init": float(np.mean([r["add_init"] for r in rows])) if rows else None,
        "mean_add_best": float(np.mean([r["add_best"] for r in rows])) if rows else None,
    }
    dump_json(summary, out / "summary.json")
    outputs = ["summary.json"] + [f"{name}/{f}" for name, _ in results for f in ("trajectory.csv", "poses.json")]
    effective = {"policy": args.policy, "env": _jsonable(env.to_dict()), "points": points, "plane": plane_mode,
                 "scenes": [Path(b).name for b in bundles]}
    write_manifest(out / "manifest.json", "refine", effective, seed, {"total_s": time.perf_counter() - t0}, outputs)
    log.info("refined %d objects; improvement rate %s", len(rows), summary["improvement_rate"])
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate

PER_OBJECT_FIELDS = ["scene", "object_id", "class_id", "symmetric", "diameter", "add", "adi", "ad"]


def cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    bundles = find_bundles(args.scenes)
    poses_root = Path(args.poses)
    records = []
    for b in bundles:
        scene, _ = load_bundle(b)
        if (poses_root / b.name).is_dir():
            pose_file = poses_root / b.name / "poses.json"
        elif poses_root.is_file() and len(bundles) == 1:
            pose_file = poses_root
        else:
            raise DataError(f"no poses for scene {b.name} under {poses_root}")
        if not pose_file.exists():
            raise DataError(f"missing pose file for scene {b.name}: {pose_file}")
        doc = json.loads(pose_file.read_text())
        if args.key not in doc:
            raise DataError(f"{pose_file}: no {args.key!r} pose table")
        est = {int(k): v for k, v in doc[args.key].items()}
        by_id = {o.object_id: o for o in scene.objects}
        extra = sorted(set(est) - set(by_id))
        if extra:
            raise DataError(f"{pose_file}: object id(s) {extra} not in scene {b.name}")
        for oid in sorted(est):
            o = by_id[oid]
            pose = RigidTransform.from_dict(est[oid])
            rec = evaluate_pose(o.model.target_cloud, o.gt, pose, o.model.diameter,
                                symmetric=o.model.symmetry.variant != "none", object_class=o.model.class_id,
                                scene=b.name, object_id=oid)
            records.append(rec)
    if not records:
        raise DataError("no poses to evaluate")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = summarize(records)
    report["thresholds"] = list(THRESHOLDS)
    report["auc_max_threshold_m"] = 0.10
    dump_json(report, out / "metrics.json")
    with open(out / "per_object.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PER_OBJECT_FIELDS)
        for r in records:
            w.writerow([r.scene, r.object_id, r.object_class, int(r.symmetric), repr(r.diameter), repr(r.add),
                        repr(r.adi), repr(r.ad)])
    write_manifest(out / "manifest.json", "evaluate", {"key": args.key, "scenes": [b.name for b in bundles]}, 0,
                   {"total_s": time.perf_counter() - t0}, ["metrics.json", "per_object.csv"])
    print(json.dumps(report["mean"], sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# export-il


def cmd_export_il(args) -> int:
    """Expert rollouts from perturbed initial estimates until ``--episodes`` object trajectories exist."""
    t0 = time.perf_counter()
    cfg = read_config(args.config)
    env = env_config(args, cfg)
    perturb = _build(AugmentationConfig, "perturbation", cfg.get("perturbation", {}))
    seed = args.seed if args.seed is not None else 0
    bundles = find_bundles(args.scenes)
    if args.episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    scenes = [load_bundle(b)[0] for b in bundles]
    visible = [visible_indices(sc) for sc in scenes]
    if not any(visible):
        raise DataError("scenes contain no visible objects")
    records, episodes, rnd = [], 0, 0
    while episodes < args.episodes:
        for i, (scene, idx) in enumerate(zip(scenes, visible)):
            if episodes >= args.episodes:
                break
            if not idx:
                continue
            rng = np.random.default_rng(derive_seed(seed, rnd, i))
            p = rng.uniform(*perturb.foreground_range)
            est = [perturb_pose(scene.objects[j].gt, perturb, rng, scene.objects[j].model.scale) for j in idx]
            state = build_state(scene, est, perturb.points_per_object, derive_seed(seed, rnd, i, 1), p,
                                indices=idx, presample=perturb.presample)
            trajs = refine_scene(state, "expert", env.iterations, env, keep_observations=True)
            trajs = trajs[: args.episodes - episodes]
            records += il_records(trajs, episodes)
            episodes += len(trajs)
        rnd += 1
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"episodes": episodes, "iterations": env.iterations, "seed": seed}
    export_il_dataset(records, out, env.steps, meta)
    effective = {"env": _jsonable(env.to_dict()), "perturbation": _jsonable(asdict(perturb)),
                 "episodes": args.episodes, "scenes": [Path(b).name for b in bundles]}
    write_manifest(out.with_name(out.name + ".manifest.json"), "export-il", effective, seed,
                   {"total_s": time.perf_counter() - t0}, [out.name])
    log.info("exported %d episodes (%d records) to %s", episodes, len(records), out)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, refine_flags: bool) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="base seed (default 0)")
    p.add_argument("--workers", type=int, default=1, help="scene-level worker processes")
    if refine_flags:
        p.add_argument("--iterations", type=int, help="refinement iterations (default 10)")
        p.add_argument("--epsilon", type=float, help="contact threshold in metres (default 0.01)")
        p.add_argument("--tau-d", dest="tau_d", type=float, help="depth score threshold in metres (default 0.02)")
        p.add_argument("--tau-n", dest="tau_n", type=float, help="normal score threshold (default 0.7)")
        p.add_argument("--steps", type=parse_steps,
                       help="comma-separated step sizes (default " + ",".join(map(str, STEP_SIZES)) + ")")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scenerefine", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic scene bundles")
    _common(g, False)
    g.add_argument("--count", type=int, help="number of scenes (overrides the config)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("refine", help="refine the stored initial estimates of every scene")
    _common(r, True)
    r.add_argument("--scenes", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--policy", choices=("expert", "greedy"), default="greedy")
    r.add_argument("--plane", choices=("ransac", "gt"), help="support plane source (default ransac)")
    r.set_defaults(func=cmd_refine)

    e = sub.add_parser("evaluate", help="ADD/ADI/AD recalls and AUC of refined poses")
    e.add_argument("--poses", required=True, help="refine output directory or a single poses.json")
    e.add_argument("--scenes", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--key", default="best", choices=("best", "init"), help="which pose table to score")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("export-il", help="expert rollouts as an imitation-learning dataset")
    _common(x, True)
    x.add_argument("--scenes", required=True)
    x.add_argument("--out", required=True, help="output .jsonl file")
    x.add_argument("--episodes", type=int, default=128, help="object trajectories to export (default 128)")
    x.set_defaults(func=cmd_export_il)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(), format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, BundleError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
