"""Command-line surface.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 missing artifact.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .errors import ConfigError, DivergenceError, MissingArtifactError
from .imageio import write_ppm
from .pipeline import evaluate_existing, run_experiment, run_stage
from .render import render
from .scene import load_scene, look_at_pose


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for f in fields(ExperimentConfig):
        flag = f.name.replace("_", "-")
        if hasattr(args, f.name) and getattr(args, f.name) is not None:
            setattr(cfg, f.name, getattr(args, f.name))
        del flag
    if getattr(args, "seed_override", None) is not None:
        cfg.seed = args.seed_override
        cfg.train_seed = args.seed_override
    if getattr(args, "output_dir_override", None):
        cfg.output_dir = args.output_dir_override
    cfg.validate()
    return cfg


def _add_common(sub, skip=()):
    sub.add_argument("--config", help="experiment config file")
    sub.add_argument("--seed", dest="seed_override", type=int,
                     help="override all module seeds")
    sub.add_argument("--output-dir", dest="output_dir_override",
                     help="override the experiment output directory")
    for f in fields(ExperimentConfig):
        if f.name in ("seed", "output_dir") or f.name in skip:
            continue
        kind = {"int": int, "float": float, "str": str}.get(f.type)
        if kind is not None:
            sub.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name,
                             type=kind, default=None, help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="texsplat",
        description="Single-image texture transfer onto Gaussian-splat objects")
    subs = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("synth-scene", "synthesize the procedural scene and render its views"),
        ("train-denoiser", "train the latent denoiser on the texture corpus"),
        ("tune-token", "learn the texture-difference token"),
        ("run", "run the full pipeline"),
        ("eval", "recompute the evaluation report of an experiment directory"),
    ]:
        _add_common(subs.add_parser(name, help=help_text))

    acq = subs.add_parser("acquire-ref", help="produce the edited reference view")
    _add_common(acq, skip=("acquire_mode", "candidate_index"))
    acq.add_argument("--mode", choices=("crop-paste", "generative"))
    acq.add_argument("--candidate-index", dest="cli_candidate_index", type=int)

    for name, help_text in [
        ("edit", "run one progressive edit pass"),
        ("finetune", "fine-tune the scene on the edited views"),
    ]:
        sub = subs.add_parser(name, help=help_text)
        _add_common(sub)
        sub.add_argument("--iteration", type=int, default=1)

    rnd = subs.add_parser("render", help="render a stored scene from a ring pose")
    rnd.add_argument("--scene", required=True, help="scene text file")
    rnd.add_argument("--azimuth", type=float, default=0.0)
    rnd.add_argument("--elevation", type=float, default=18.0)
    rnd.add_argument("--radius", type=float, default=3.4)
    rnd.add_argument("--size", type=int, default=64)
    rnd.add_argument("--out", required=True)

    trc = subs.add_parser("trace", help="summarize guidance term traces")
    _add_common(trc)
    trc.add_argument("--iteration", type=int, default=None)
    trc.add_argument("--full", action="store_true", help="print raw trace lines")
    return parser


def _cmd_render(args) -> int:
    scene = load_scene(args.scene)
    centroid = scene.positions.mean(axis=0)
    az = np.deg2rad(args.azimuth)
    el = np.deg2rad(args.elevation)
    eye = centroid + args.radius * np.array([
        np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
    pose = look_at_pose(eye, centroid, args.size, args.size,
                        focal=float(args.size), azimuth=args.azimuth)
    image, _ = render(scene, pose)
    write_ppm(args.out, image)
    print(f"wrote {args.out}")
    return 0


def _cmd_trace(args) -> int:
    cfg = _config_from_args(args)
    root = Path(cfg.output_dir)
    edit_dirs = sorted(root.glob("edits/iter_*"))
    if args.iteration is not None:
        edit_dirs = [d for d in edit_dirs if d.name == f"iter_{args.iteration}"]
    if not edit_dirs:
        raise MissingArtifactError(f"no edit traces under {root}/edits")
    total = 0
    for d in edit_dirs:
        for tf in sorted(d.glob("trace_view_*.txt")):
            lines = [ln for ln in tf.read_text().splitlines() if ln.strip()]
            total += len(lines)
            print(f"{tf.relative_to(root)}: {len(lines)} steps")
            if args.full:
                for ln in lines:
                    print("  " + ln)
    print(f"total denoising steps: {total}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "render":
            return _cmd_render(args)
        if args.command == "trace":
            return _cmd_trace(args)
        cfg = _config_from_args(args)
        if args.command == "run":
            root, report = run_experiment(cfg)
            print(report.to_text())
            print(f"artifacts in {root}")
        elif args.command == "eval":
            report = evaluate_existing(cfg)
            print(report.to_text())
        elif args.command == "synth-scene":
            state = run_stage(cfg, "scene")
            print(f"scene and {cfg.views} views written to {state.root}")
        elif args.command == "train-denoiser":
            state = run_stage(cfg, "denoiser")
            print(f"denoiser weights in {state.root / 'denoiser'}")
        elif args.command == "acquire-ref":
            state = run_stage(cfg, "acquire", mode_override=args.mode,
                              candidate_override=args.cli_candidate_index)
            print(f"reference written to {state.root / 'ref' / 'reference.ppm'}")
        elif args.command == "tune-token":
            state = run_stage(cfg, "token")
            print(f"token written to {state.root / 'token' / 'token.bin'}")
        elif args.command == "edit":
            state = run_stage(cfg, "edit", iteration=args.iteration)
            print(f"edited views in {state.root / 'edits' / f'iter_{args.iteration}'}")
        elif args.command == "finetune":
            state = run_stage(cfg, "finetune", iteration=args.iteration)
            print(f"fine-tuned scene written to {state.root}")
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return 3
    except MissingArtifactError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
