"""
Command-line entry points.

    deblur-splat generate SCRIPT OUT
    deblur-splat train CONFIG [--out DIR] [--ablate NAME] [--set KEY=VALUE ...] [--resume CKPT]
    deblur-splat render CKPT OUT [--frames ...] [--time T] [--spiral N]
    deblur-splat eval CKPT [--out REPORT]
    deblur-splat ablate CONFIG OUT [--variants ...]

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import apply_overrides, ablation_overrides, load_config
from .dataset import Dataset
from .errors import ConfigError, DataError, NumericError, StateError
from .experiments import DEFAULT_VARIANTS, ablation_sweep, run_report, train_run
from .io import read_container, read_json, save_image, write_json
from .lie import Pose, so3_exp
from .raster import render
from .synth import SceneScript, generate
from .trainer import Trainer

log = logging.getLogger("deblur_splat")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _set_threads(n):
    if n is None:
        return
    import numba

    with warnings.catch_warnings():
        # numba probes for an old TBB on first use and warns before falling back to OpenMP
        warnings.simplefilter("ignore", numba.NumbaWarning)
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def _load_trainer(ckpt, dataset=None) -> Trainer:
    _, meta = read_container(ckpt)
    if "config" not in meta:
        raise DataError(f"{ckpt}: checkpoint has no config")
    root = dataset or meta["config"]["dataset"]
    return Trainer.from_checkpoint(ckpt, Dataset(root))


def cmd_generate(args) -> int:
    path = Path(args.script)
    try:
        raw = read_json(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read scene script ({exc})") from exc
    script = SceneScript.from_dict(apply_overrides(raw, _parse_set(args.set)))
    manifest = generate(script, args.out)
    print(f"wrote {len(manifest['frames'])} frames to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {}
    if args.ablate:
        overrides.update(ablation_overrides(args.ablate))
    overrides.update(_parse_set(args.set))
    if args.out:
        overrides["out_dir"] = args.out
    cfg = load_config(args.config, overrides)
    if args.out is None and not Path(cfg.out_dir).is_absolute():
        cfg.out_dir = str((Path(args.config).parent / cfg.out_dir).resolve())
    trainer = train_run(cfg, cfg.out_dir, resume=args.resume, until=args.until)
    print(f"trained to iteration {trainer.iteration}; outputs in {cfg.out_dir}")
    return EXIT_OK


def spiral_poses(center: Pose, n: int, radius: float, turns: float = 1.0, look_depth: float = 4.0) -> list[Pose]:
    """Camera positions on a circle around ``center`` in its image plane, each turned to keep looking
    at the point ``look_depth`` ahead of ``center``."""
    poses = []
    for k in range(n):
        a = 2 * np.pi * turns * k / max(n, 1)
        offset = radius * np.array([np.cos(a), np.sin(a), 0.0])
        tilt = np.array([offset[1], -offset[0], 0.0]) / look_depth
        poses.append(center.compose(Pose(so3_exp(tilt), offset)))
    return poses


def cmd_render(args) -> int:
    trainer = _load_trainer(args.checkpoint, args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    F = len(trainer.data)
    written = 0
    if args.spiral:
        mid = F // 2
        center = trainer.eval_pose(mid)
        t = trainer.data[mid].time if args.time is None else args.time
        scene = trainer.scene_at(t)
        for k, pose in enumerate(spiral_poses(center, args.spiral, args.radius)):
            img = render(scene, pose, trainer.cam, trainer.data.background, trainer.cfg.t_min)
            save_image(out / f"spiral_{k:03d}", img)
            written += 1
    else:
        frames = args.frames if args.frames else range(F)
        for i in frames:
            if not 0 <= i < F:
                raise DataError(f"frame {i} out of range [0, {F})")
            if args.time is None:
                img = trainer.render_frame(i)
            else:
                img = render(trainer.scene_at(args.time), trainer.eval_pose(i), trainer.cam,
                             trainer.data.background, trainer.cfg.t_min)
            save_image(out / f"render_{i:03d}", img)
            written += 1
    write_json(out / "config.json", trainer.cfg.to_dict())
    print(f"wrote {written} renders to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    trainer = _load_trainer(args.checkpoint, args.dataset)
    report = run_report(trainer)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval_report.json")
    write_json(out, report)
    agg = report["aggregate"]
    print(" ".join(f"{k}={v:.4f}" for k, v in agg.items()))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, _parse_set(args.set))
    summary = ablation_sweep(cfg.to_dict(), args.out, variants=args.variants or DEFAULT_VARIANTS)
    for name, row in summary["rows"].items():
        print(f"{name:10s} psnr={row['psnr']:.2f} psnr_dynamic={row['psnr_dynamic']:.2f} lv={row['lv']:.5f}")
    for c in summary["checks"]:
        print(f"[{'PASS' if c['passed'] else 'FAIL'}] {c['name']}: {c['detail']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deblur-splat", description="Blur-aware dynamic Gaussian splatting on CPU.")
    p.add_argument("--threads", type=int, default=os.cpu_count(), help="numba thread count (default: logical cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic blurry dataset from a scene script")
    g.add_argument("script")
    g.add_argument("out")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a script key (dotted)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("config")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--ablate", help="named variant: " + ", ".join(DEFAULT_VARIANTS))
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--until", type=int, help="stop at this iteration")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render sharp images from a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("out")
    r.add_argument("--dataset", help="dataset directory (default: the one in the checkpoint config)")
    r.add_argument("--frames", type=int, nargs="*", help="frame indices (default: all)")
    r.add_argument("--time", type=float, help="render the scene at this time instead of each frame's own")
    r.add_argument("--spiral", type=int, default=0, metavar="N", help="render N views on a spiral path")
    r.add_argument("--radius", type=float, default=0.15, help="spiral radius in world units")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="evaluate a checkpoint against the held-out sharp frames")
    e.add_argument("checkpoint")
    e.add_argument("--dataset")
    e.add_argument("--out", help="report path (default: eval_report.json next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train a set of variants and compare them")
    a.add_argument("config")
    a.add_argument("out")
    a.add_argument("--variants", nargs="*", help="variants to run (default: all)")
    a.add_argument("--set", action="append", metavar="KEY=VALUE")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _set_threads(args.threads)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, StateError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
