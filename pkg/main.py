#!/usr/bin/env python3
"""
SplatMap
Structure-enhanced Gaussian-splatting mapper for desk-scale CPU experiments

Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error.
Configuration precedence: built-in defaults < --config file < --preset < flags.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from modules.camera import so3_log
from modules.config_manager import ConfigManager
from modules.datakit import (SyntheticScene, generate, load_dataset, load_tum, make_ba_instance,
                             parse_tum_pose, save_anchors_ply, save_png)
from modules.errors import ConfigError, SplatMapError, UsageError
from modules.geometry import ate_rmse, motion_only_ba
from modules.presets import APPEARANCE_SCENE, SMOKE_SCENE, TINY_SCENE, get_ba_preset, recommended_workers
from modules.trainer import evaluate, load_checkpoint, render_view, run, split_train_test

logger = logging.getLogger("splatmap")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

BUILTIN_SCENES = {'smoke': SMOKE_SCENE, 'appearance': APPEARANCE_SCENE, 'tiny': TINY_SCENE}


def setup_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _print_json(data) -> None:
    print(json.dumps(data, indent=2, default=str))


def cmd_synth(args) -> int:
    if args.scene:
        spec = BUILTIN_SCENES[args.scene]
    else:
        path = Path(args.spec)
        if not path.is_file():
            print(f"error: spec not found: {args.spec}", file=sys.stderr)
            return EXIT_USAGE
        try:
            spec = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            print(f"error: {args.spec}:{e.lineno}: {e.msg}", file=sys.stderr)
            return EXIT_USAGE
    scene = SyntheticScene.from_dict(spec, args.seed)
    result = generate(scene, args.seed, args.out, workers=args.workers or 1)
    if result['status'] != 'success':
        for err in result['errors']:
            print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {result['frames']} views, {result['points']} cloud points to {result['path']}")
    return EXIT_OK


def _train_settings(args) -> ConfigManager:
    manager = _settings(args)
    overrides = {'train.seed': args.seed}
    if args.iterations is not None:
        overrides['train.iterations'] = args.iterations
    if args.no_afme:
        overrides['train.appearance_mode'] = 'none'
        overrides['train.n_appearance'] = 0
    if args.no_fpr:
        overrides['train.fpr.active_window'] = [1, 0]
    if args.random_init:
        overrides['train.init_mode'] = 'random'
    if args.incremental:
        overrides['train.incremental'] = True
    if args.workers is not None:
        overrides['raster.workers'] = args.workers
    manager.apply_overrides(overrides)
    return manager


def cmd_train(args) -> int:
    manager = _train_settings(args)
    cfg = manager.get_train_config()
    raster = manager.get_raster_config()
    if args.workers is None and raster.workers == 1 and args.auto_workers:
        raster.workers = recommended_workers()
    advanced = manager.get_advanced_config()
    if args.log_level is None:
        logging.getLogger().setLevel(advanced['log_level'].upper())
    dataset = load_dataset(args.data)
    rule = manager.get_setting('data.keyframe_every')
    result = run(cfg, dataset, args.out, raster, resume=args.resume, keyframe_rule=rule,
                 progress=bool(advanced.get('progress', True)) and sys.stderr.isatty())
    if result['status'] != 'success':
        for err in result['errors']:
            print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    metrics = result['metrics']
    print(f"test PSNR {metrics['test']['psnr']} dB, SSIM {metrics['test']['ssim']}; "
          f"train PSNR {metrics['train']['psnr']} dB; artefacts in {args.out}")
    return EXIT_OK


def cmd_render(args) -> int:
    state = load_checkpoint(args.checkpoint)
    _, pose = parse_tum_pose(args.pose, "--pose")
    image = render_view(state, pose, args.view_index)
    save_png(args.out, image)
    print(f"rendered {state.camera.width}x{state.camera.height} view to {args.out}")
    return EXIT_OK


def cmd_eval_render(args) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    _, test = split_train_test(dataset.frames, args.keyframe_every)
    metrics = evaluate(state, test)
    _print_json({'split': 'test', **metrics})
    return EXIT_OK


def _settings(args) -> ConfigManager:
    manager = ConfigManager(args.config)
    if getattr(args, 'preset', None):
        manager.apply_preset(args.preset)
    return manager


def cmd_eval_traj(args) -> int:
    manager = _settings(args)
    similarity = args.similarity or bool(manager.get_setting('data.similarity_alignment'))
    _, est = load_tum(args.est)
    _, gt = load_tum(args.gt)
    error = ate_rmse(est, gt, similarity=similarity)
    print(f"ATE RMSE: {error:.3f} cm")
    return EXIT_OK


def _perturb(pose, rng, rotation_deg: float, translation: float):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    shift = rng.normal(size=3)
    shift /= np.linalg.norm(shift)
    return pose.compose_left(axis * np.deg2rad(rotation_deg), shift * translation)


def cmd_ba_demo(args) -> int:
    preset = get_ba_preset(args.preset)
    robust = ConfigManager(args.config).get_robust_config()
    problem, truth = make_ba_instance(seed=args.seed, **preset['instance'])
    rng = np.random.default_rng([args.seed, 9])
    plain = replace(robust, huber_delta=None)
    report = {'preset': args.preset, 'seed': args.seed, 'outliers': int(truth.outliers.sum()), 'poses': []}
    for kf in sorted(problem.poses):
        initial = _perturb(truth.poses[kf], rng, **preset['perturb'])
        entry = {'keyframe': kf}
        for label, cfg in (('huber', robust), ('quadratic', plain)):
            result = motion_only_ba(problem, kf, initial, cfg)
            est = result.poses[kf]
            rot_err = float(np.linalg.norm(so3_log(est.R @ truth.poses[kf].R.T)))
            entry[label] = {
                'rotation_error': rot_err,
                'translation_error': float(np.linalg.norm(est.center - truth.poses[kf].center)),
                **result.to_dict(),
            }
        report['poses'].append(entry)
    _print_json(report)
    return EXIT_OK


def cmd_inspect(args) -> int:
    state = load_checkpoint(args.checkpoint)
    save_anchors_ply(args.out, state.anchors)
    _print_json({
        'iteration': state.iteration,
        'anchors': len(state.anchors),
        'k': state.cfg.k,
        'appearance_mode': state.decoder.appearance_mode,
        'ply': args.out,
    })
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatmap", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default from config)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="scene spec JSON file")
    src.add_argument("--scene", choices=sorted(BUILTIN_SCENES), help="built-in scene spec")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None, help="views rendered in parallel")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", default=None, help="JSON configuration file")
    p.add_argument("--preset", default=None, help="named preset (reference, smoke, mono-replica, hf-strong, sfr)")
    p.add_argument("--out", required=True, help="artefact directory")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--no-afme", action="store_true", help="disable the appearance embedding (N_a = 0)")
    p.add_argument("--no-fpr", action="store_true", help="empty the frequency-regularisation window")
    p.add_argument("--random-init", action="store_true", help="uniform-random anchors of equal count")
    p.add_argument("--incremental", action="store_true", help="merge keyframe clouds one per epoch")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--workers", type=int, default=None, help="rasterizer tile workers")
    p.add_argument("--auto-workers", action="store_true", help="pick the worker count from the host")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a view from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pose", required=True, help='"tx ty tz qx qy qz qw" camera-to-world')
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--view-index", type=int, default=None, help="training view for per-image embeddings")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval-render", help="mean PSNR/SSIM over the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--keyframe-every", type=int, default=None, help="override the stored keyframe flags")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_render)

    p = sub.add_parser("eval-traj", help="ATE RMSE between two TUM trajectories")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--config", default=None, help="JSON configuration file (data.similarity_alignment)")
    p.add_argument("--preset", default=None, help="named preset, e.g. mono-replica")
    p.add_argument("--similarity", action="store_true", help="align with scale (monocular)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_traj)

    p = sub.add_parser("ba-demo", help="robust motion-only BA on a generated instance")
    p.add_argument("--preset", default="outliers", help="noiseless, noisy or outliers")
    p.add_argument("--config", default=None, help="JSON configuration file (ba section)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ba_demo)

    p = sub.add_parser("inspect", help="export checkpoint anchors to PLY")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output PLY")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level or "INFO")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SplatMapError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
