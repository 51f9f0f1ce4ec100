"""Command-line pipeline: generate data, train stages, reconstruct, evaluate.

Exit codes: 0 success, 2 config/clobber violation, 3 generation budget
exhausted, 4 missing prerequisite checkpoint, 5 non-finite training loss,
6 iso-surface extraction failed (collapsed field).
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import initial as initial_mod
from . import keypoints as kp_mod
from . import meshmetrics as mm
from . import primitives as pr
from . import refine as refine_mod
from . import scenes
from . import train as train_mod

EXIT_CONFIG = 2
EXIT_GENERATION = 3
EXIT_MISSING_CHECKPOINT = 4
EXIT_NON_FINITE = 5
EXIT_COLLAPSED_FIELD = 6


class ConfigError(ValueError):
    pass


class MissingCheckpointError(RuntimeError):
    pass


STAGES = ("initial", "refiner", "keypoint")


def default_config() -> dict:
    cfg = {
        "generation": asdict(scenes.GenerationConfig()),
        "model": {
            "initial": initial_mod.InitialConfig().to_dict(),
            "refiner": refine_mod.RefinerConfig().to_dict(),
            "keypoint": kp_mod.KeypointRefinerConfig().to_dict(),
        },
        "optimizer": {
            "preset": "desk",
            "initial": {},
            "refiner": {},
            "keypoint": {},
        },
        "training": {
            "seed": 0,
            "refiner_corrupt_sigma": 0.0,
            "keypoint_corrupt_sigma": 10.0,
        },
        "metrics": {
            "iou_samples": 100_000,
            "surface_samples": 10_000,
            "resolution": 64,
            "pad_mm": 20.0,
            "seed": 0,
            "mpjpe_alignment": "none",
        },
    }
    cfg["generation"]["center_sigma"] = list(cfg["generation"]["center_sigma"])
    return cfg


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be an object")
            # optimizer stage overrides are sparse dicts validated downstream
            if path == "optimizer" and key in STAGES:
                allowed = train_mod.OptimizerConfig().to_dict()
                for k in value:
                    if k not in allowed:
                        raise ConfigError(f"unknown config key: {where}.{k}")
                out[key] = copy.deepcopy(value)
            else:
                out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_run_config(path: str | None) -> dict:
    defaults = default_config()
    if path is None:
        return defaults
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        user = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(user, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return _merge(defaults, user)


def generation_config(cfg: dict) -> scenes.GenerationConfig:
    g = dict(cfg["generation"])
    g["center_sigma"] = tuple(g["center_sigma"])
    try:
        return scenes.GenerationConfig(**g)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"generation config invalid: {e}") from e


def model_config(stage: str, cfg: dict):
    d = dict(cfg["model"][stage])
    try:
        if stage == "initial":
            return initial_mod.InitialConfig(**d)
        if stage == "refiner":
            d["enc_channels"] = tuple(d["enc_channels"])
            return refine_mod.RefinerConfig(**d)
        if stage == "keypoint":
            return kp_mod.KeypointRefinerConfig(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"model.{stage} config invalid: {e}") from e
    raise ConfigError(f"unknown stage {stage!r}")


def optimizer_config(stage: str, cfg: dict) -> train_mod.OptimizerConfig:
    preset = cfg["optimizer"]["preset"]
    if preset not in ("desk", "paper"):
        raise ConfigError(f"optimizer.preset must be 'desk' or 'paper', got {preset!r}")
    base = train_mod.desk_preset(stage) if preset == "desk" else train_mod.paper_preset(stage)
    overrides = dict(cfg["optimizer"][stage])
    if not overrides:
        return base
    merged = base.to_dict()
    merged.update(overrides)
    merged["betas"] = tuple(merged["betas"])
    try:
        return train_mod.OptimizerConfig(**merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"optimizer.{stage} config invalid: {e}") from e


def _build_model(stage: str, config) :
    if stage == "initial":
        return initial_mod.InitialOccupancyModel(config)
    if stage == "refiner":
        return refine_mod.RefinerModel(config)
    return kp_mod.KeypointRefinerModel(config)


def _stage_config_from_manifest(stage: str, saved: dict):
    if stage == "initial":
        return initial_mod.InitialConfig(**saved)
    if stage == "refiner":
        saved = dict(saved)
        saved["enc_channels"] = tuple(saved["enc_channels"])
        return refine_mod.RefinerConfig(**saved)
    return kp_mod.KeypointRefinerConfig(**saved)


def load_stage_checkpoint(stage: str, ckpt_root: Path):
    """Rebuild a stage model from ckpt_root/<stage>/; the saved config wins."""
    directory = Path(ckpt_root) / stage
    manifest = directory / "manifest.json"
    if not manifest.is_file():
        raise MissingCheckpointError(f"no {stage} checkpoint at {directory}")
    saved = json.loads(manifest.read_text())["config"]
    model = _build_model(stage, _stage_config_from_manifest(stage, saved))
    pr.load_checkpoint(model, directory, component=stage)
    model.eval()
    return model


def _refuse_clobber(path: Path, force: bool, what: str) -> None:
    path = Path(path)
    if force:
        return
    if path.is_dir() and any(path.iterdir()):
        raise ConfigError(f"{what} {path} is not empty; pass --force to overwrite")
    if path.is_file():
        raise ConfigError(f"{what} {path} exists; pass --force to overwrite")


# --- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    gen = generation_config(cfg)
    out = Path(args.out)
    _refuse_clobber(out, args.force, "output directory")
    samples = [scenes.sample_scene(args.seed + i, gen) for i in range(args.num)]
    gen_dict = asdict(gen)
    gen_dict["center_sigma"] = list(gen_dict["center_sigma"])
    gen_dict["base_seed"] = args.seed
    scenes.save_dataset(samples, out, generation_config=gen_dict)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    seed = cfg["training"]["seed"] if args.seed is None else args.seed
    data = scenes.load_dataset(Path(args.data))
    stage_dir = Path(args.ckpt) / args.stage
    _refuse_clobber(stage_dir, args.force, "checkpoint directory")
    torch.set_num_threads(1)
    opt_cfg = optimizer_config(args.stage, cfg)

    if args.stage == "initial":
        model = initial_mod.build_model(model_config("initial", cfg), seed=seed)
        _, report = train_mod.train_initial(
            data, model, opt_cfg, seed, ckpt_dir=stage_dir
        )
    elif args.stage == "refiner":
        frozen = load_stage_checkpoint("initial", Path(args.ckpt))
        model = refine_mod.build_model(model_config("refiner", cfg), seed=seed)
        _, report = train_mod.train_refiner(
            data,
            frozen,
            model,
            opt_cfg,
            train_mod.LossWeights(),
            seed,
            corrupt_sigma=cfg["training"]["refiner_corrupt_sigma"],
            ckpt_dir=stage_dir,
        )
    else:
        model = kp_mod.build_model(model_config("keypoint", cfg), seed=seed)
        _, report = train_mod.train_keypoint(
            data,
            model,
            opt_cfg,
            seed,
            corrupt_sigma=cfg["training"]["keypoint_corrupt_sigma"],
            ckpt_dir=stage_dir,
        )
    report.save(stage_dir / "train_report.json")
    print(
        f"trained {args.stage}: {report.final_metrics['steps']} steps, "
        f"final loss {report.final_metrics['final_loss']:.6f}"
    )
    return 0


def _oracle_surface_points(sample: scenes.SceneSample, side: str, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return scenes.sample_on_capsules([sample.hand(side)], n, rng)


def _field_metrics(
    field, sample: scenes.SceneSample, mcfg: dict, *, J_used, meshes: dict | None = None
) -> mm.MetricReport:
    """IoU / chamfer / penetration of one field against the scene's oracle."""
    oracle = scenes.oracle_field(sample)
    bbox = scenes.scene_bbox(sample, pad_mm=mcfg["pad_mm"])
    report = mm.MetricReport(
        n_iou_samples=mcfg["iou_samples"],
        n_surface_samples=mcfg["surface_samples"],
        seeds={"iou": mcfg["seed"], "surface": mcfg["seed"] + 1},
    )
    for name, side in (("iou_left", "left"), ("iou_right", "right"), ("iou_combined", "both")):
        setattr(
            report,
            name,
            mm.volumetric_iou(field, oracle, side, bbox, mcfg["iou_samples"], mcfg["seed"]),
        )
    report.penetration_mm3 = mm.penetration_volume(
        field, bbox, mcfg["iou_samples"], mcfg["seed"]
    )
    for side in ("left", "right"):
        gt_pts = _oracle_surface_points(sample, side, mcfg["surface_samples"], mcfg["seed"] + 1)
        mesh = mm.marching_cubes(field, side, bbox, mcfg["resolution"])
        if meshes is not None:
            meshes[side] = mesh
        if mesh.is_empty:
            continue
        pred_pts = mm.sample_mesh_surface(mesh, mcfg["surface_samples"], seed=mcfg["seed"] + 1)
        pred_pts = mm.mid_joint_align(
            pred_pts, getattr(J_used, side), getattr(sample.keypoints, side)
        )
        setattr(report, f"chamfer_{side}_mm", mm.chamfer_distance(pred_pts, gt_pts))
    return report


def cmd_reconstruct(args) -> int:
    cfg = load_run_config(args.config)
    mcfg = dict(cfg["metrics"])
    mcfg["resolution"] = args.resolution
    sample = scenes.load_sample(Path(args.sample))
    out = Path(args.out)
    _refuse_clobber(out, args.force, "output directory")
    torch.set_num_threads(1)
    ckpt_root = Path(args.ckpt)
    init_model = load_stage_checkpoint("initial", ckpt_root)

    J = sample.keypoints
    noise_sigma = args.keypoint_noise
    if noise_sigma > 0:
        J = kp_mod.corrupt_keypoints(J, noise_sigma, args.seed)
    refined_keypoints = False
    if args.refine_keypoints:
        kmodel = load_stage_checkpoint("keypoint", ckpt_root)
        J = kp_mod.refine(kmodel, J, sample.image)
        refined_keypoints = True

    out.mkdir(parents=True, exist_ok=True)
    if refined_keypoints:
        (out / "keypoints_refined.json").write_text(
            json.dumps(
                {"version": 1, "keypoints_mm": J.stacked().tolist()}, sort_keys=True
            )
        )

    if args.no_refine:
        field = initial_mod.initial_field(init_model, sample.image, J)
    else:
        refiner = load_stage_checkpoint("refiner", ckpt_root)
        field, diagnostics = refine_mod.refine_scene(
            init_model, refiner, sample.image, J, sample.camera
        )
        diagnostics.save(out / "diagnostics")

    meshes: dict = {}
    report = _field_metrics(field, sample, mcfg, J_used=J, meshes=meshes)
    report.mpjpe_mm = mm.mpjpe(J, sample.keypoints, alignment=mcfg["mpjpe_alignment"])
    report.seeds["keypoint_noise"] = args.seed
    report.extra = {
        "refined": not args.no_refine,
        "refined_keypoints": refined_keypoints,
        "keypoint_noise_sigma": noise_sigma,
        "resolution": args.resolution,
    }
    for side in ("left", "right"):
        mm.export_obj(meshes[side], out / f"{side}.obj")
    report.save(out / "metrics.json")
    print(f"wrote {out}/left.obj, {out}/right.obj, {out}/metrics.json")
    return 0


def _mean(values: list) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    mcfg = cfg["metrics"]
    data = scenes.load_dataset(Path(args.data))
    out = Path(args.out)
    _refuse_clobber(out, args.force, "output file")
    torch.set_num_threads(1)
    names = json.loads((Path(args.data) / "manifest.json").read_text())["samples"]

    ckpt_root = Path(args.ckpt)
    if args.oracle:
        init_model = refiner = kmodel = None
    else:
        init_model = load_stage_checkpoint("initial", ckpt_root)
        try:
            refiner = load_stage_checkpoint("refiner", ckpt_root)
        except MissingCheckpointError:
            refiner = None
        try:
            kmodel = load_stage_checkpoint("keypoint", ckpt_root)
        except MissingCheckpointError:
            kmodel = None

    sigma = cfg["training"]["keypoint_corrupt_sigma"]
    per_sample: dict = {}
    for name, sample in zip(names, data):
        entry: dict = {}
        if args.oracle:
            oracle = scenes.oracle_field(sample)
            rep = _field_metrics(oracle, sample, mcfg, J_used=sample.keypoints)
            # surface points drawn straight from the capsules so the debug
            # path is exact rather than limited by mesh resolution
            for side in ("left", "right"):
                pts = _oracle_surface_points(
                    sample, side, mcfg["surface_samples"], mcfg["seed"] + 1
                )
                setattr(rep, f"chamfer_{side}_mm", mm.chamfer_distance(pts, pts))
            entry["initial"] = rep.to_dict()
        else:
            rep = _field_metrics(
                initial_mod.initial_field(init_model, sample.image, sample.keypoints),
                sample,
                mcfg,
                J_used=sample.keypoints,
            )
            entry["initial"] = rep.to_dict()
            if refiner is not None:
                field, _ = refine_mod.refine_scene(
                    init_model, refiner, sample.image, sample.keypoints, sample.camera
                )
                entry["refined"] = _field_metrics(
                    field, sample, mcfg, J_used=sample.keypoints
                ).to_dict()
            if kmodel is not None:
                noisy = kp_mod.corrupt_keypoints(
                    sample.keypoints, sigma, mcfg["seed"] + sample.seed
                )
                fixed = kp_mod.refine(kmodel, noisy, sample.image)
                entry["keypoints"] = {
                    "sigma": sigma,
                    "mpjpe_corrupted_mm": mm.mpjpe(
                        noisy, sample.keypoints, alignment=mcfg["mpjpe_alignment"]
                    ),
                    "mpjpe_refined_mm": mm.mpjpe(
                        fixed, sample.keypoints, alignment=mcfg["mpjpe_alignment"]
                    ),
                }
        per_sample[name] = entry

    def field_means(key: str) -> dict | None:
        entries = [e[key] for e in per_sample.values() if key in e]
        if not entries:
            return None
        return {
            "iou_left": _mean([e["iou"]["left"] for e in entries]),
            "iou_right": _mean([e["iou"]["right"] for e in entries]),
            "iou_combined": _mean([e["iou"]["combined"] for e in entries]),
            "chamfer_left_mm": _mean([e["chamfer_mm"]["left"] for e in entries]),
            "chamfer_right_mm": _mean([e["chamfer_mm"]["right"] for e in entries]),
            "penetration_mm3": _mean([e["penetration_mm3"] for e in entries]),
        }

    result = {
        "version": 1,
        "oracle_debug": bool(args.oracle),
        "counts": {
            "samples": len(names),
            "iou_samples": mcfg["iou_samples"],
            "surface_samples": mcfg["surface_samples"],
        },
        "seeds": {"metrics": mcfg["seed"]},
        "samples": per_sample,
        "mean": {
            "initial": field_means("initial"),
            "refined": field_means("refined"),
            "mpjpe_corrupted_mm": _mean(
                [e["keypoints"]["mpjpe_corrupted_mm"] for e in per_sample.values() if "keypoints" in e]
            ),
            "mpjpe_refined_mm": _mean(
                [e["keypoints"]["mpjpe_refined_mm"] for e in per_sample.values() if "keypoints" in e]
            ),
        },
    }
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result, indent=1, sort_keys=True))
    print(f"wrote {out} ({len(names)} samples)")
    return 0


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="handfield", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic capsule-hand dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", default=None)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("--stage", choices=STAGES, required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--ckpt", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="reconstruct meshes for one sample")
    r.add_argument("--sample", required=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--resolution", type=int, default=64)
    r.add_argument("--refine-keypoints", action="store_true")
    r.add_argument("--keypoint-noise", type=float, default=0.0)
    r.add_argument("--no-refine", action="store_true")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--config", default=None)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="evaluate checkpoints against the oracle")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--oracle", action="store_true", help="debug: score the oracle against itself")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, scenes.DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except scenes.SceneGenerationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_GENERATION
    except MissingCheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_CHECKPOINT
    except train_mod.NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NON_FINITE
    except refine_mod.IsoExtractionError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_COLLAPSED_FIELD


if __name__ == "__main__":
    sys.exit(main())
