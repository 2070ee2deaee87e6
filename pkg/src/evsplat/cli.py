"""Command-line pipelines: gen, edi, train, render, eval.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, fileio
from .edi import BlurFrame, edi_latents
from .event_core import Thresholds, read_evt1
from .eval_metrics import evaluate
from .gsplat import load_scene, render
from .synthdata import BLUR_SPEED, OrbitPath, default_camera, generate_dataset, load_dataset
from .trainer import TrainConfig, latest_checkpoint, train
from .trajectory import load_poses


class CliError(Exception):
    """Runtime failure reported with exit code 1."""


def _write_run_config(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "version": __version__, **resolved}
    (out_dir / f"run_config.{command}.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def _read_image(path: str) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".f32":
        return fileio.read_f32(p)
    if p.suffix == ".ppm":
        return fileio.read_ppm(p)
    raise CliError(f"{path}: unsupported image format (use .ppm or .f32)")


def _save_rgb(path: Path, img) -> None:
    arr = img.detach().numpy() if torch.is_tensor(img) else np.asarray(img)
    # same float32 rounding as the dataset writer, so equal renders give equal files
    fileio.write_ppm(path, arr.astype(np.float32).astype(np.float64))


# --- gen ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    out = Path(args.out)
    manifest = generate_dataset(out, seed=args.seed, blur_level=args.blur_level, n_frames=args.frames,
                                width=args.res, height=args.res, n_gaussians=args.gaussians)
    _write_run_config(out, "gen", {"seed": args.seed, "blur_level": args.blur_level, "frames": args.frames,
                                   "res": args.res, "gaussians": args.gaussians})
    print(manifest)
    return 0


# --- edi ---------------------------------------------------------------------------

def cmd_edi(args) -> int:
    blur = _read_image(args.blur)
    th = Thresholds(args.c_pos, args.c_neg)
    events = read_evt1(args.events, th)
    h, w = blur.shape[:2]
    if (events.width, events.height) != (w, h):
        raise CliError(f"event sensor is {events.width}x{events.height} but the image is {w}x{h}")
    t0, t1 = args.exposure
    if not t1 > t0:
        raise CliError(f"exposure end {t1} must exceed start {t0}")
    frame = BlurFrame(blur, (t0 + t1) / 2, t1 - t0, events.slice(t0, np.nextafter(t1, np.inf)))
    latents, times = edi_latents(frame, th, args.n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(latents):
        _save_rgb(out / f"latent_{i:02d}.ppm", img)
    _save_rgb(out / "sharp.ppm", latents[len(latents) // 2])
    (out / "timestamps.json").write_text(json.dumps([float(t) for t in times]))
    _write_run_config(out, "edi", {"blur": args.blur, "events": args.events, "exposure": [t0, t1],
                                   "n": args.n, "c_pos": args.c_pos, "c_neg": args.c_neg})
    print(out / "sharp.ppm")
    return 0


# --- train -------------------------------------------------------------------------

def resolve_train_config(args) -> TrainConfig:
    flat = {}
    if args.config:
        try:
            flat = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(flat, dict):
            raise CliError(f"{args.config}: config must be a JSON object of dotted keys")
    if args.iters is not None:
        flat["total_iters"] = args.iters
        if "warmup_iters" not in flat:
            flat["warmup_iters"] = int(round(0.06 * args.iters))
    if args.seed is not None:
        flat["seed"] = args.seed
    if args.no_event_loss:
        flat["use_event"] = False
    if args.no_int_loss:
        flat["use_int"] = False
    if args.no_depth_loss:
        flat["use_depth"] = False
    try:
        return TrainConfig.from_flat(flat)
    except (KeyError, TypeError, ValueError) as e:
        raise CliError(f"invalid train config: {e}") from e


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    ds = load_dataset(args.data)
    out = Path(args.out)
    resume = None
    if args.resume:
        resume = latest_checkpoint(out) if args.resume == "latest" else Path(args.resume)
        if resume is None:
            raise CliError(f"no checkpoint found under {out / 'checkpoints'}")
    _write_run_config(out, "train", {"data": args.data, "train": cfg.to_dict(),
                                     "resume": None if resume is None else str(resume)})
    train(ds, cfg, out_dir=out, resume=resume)
    print(out / "scene.json")
    return 0


# --- render ------------------------------------------------------------------------

def _orbit_poses(n: int, radius: float, height: float) -> list[np.ndarray]:
    path = OrbitPath(radius, height, 1.0, 0.1, 0.0, np.zeros(1), np.zeros((1, 3)))
    return [path.orbit_pose(2 * np.pi * j / n) for j in range(n)]


def cmd_render(args) -> int:
    if not Path(args.scene).exists():
        raise CliError(f"scene file {args.scene} not found")
    scene = load_scene(args.scene)
    if args.data:
        ds = load_dataset(args.data)
        cam, bg = ds.camera, ds.background
    else:
        cam, bg = default_camera(args.res, args.res), tuple(args.background)
    if args.orbit is not None:
        if args.orbit < 1:
            raise CliError("--orbit needs at least one frame")
        poses = _orbit_poses(args.orbit, args.radius, args.height)
    elif args.test_views:
        if not args.data:
            raise CliError("--test-views needs --data")
        poses = [tv.pose for tv in ds.tests]
    else:
        poses = [p for tr in load_poses(args.poses) for p in tr.effective_poses()]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for j, pose in enumerate(poses):
        with torch.no_grad():
            r = render(scene, cam.with_pose(pose), bg)
        _save_rgb(out / f"frame_{j:03d}.ppm", r.color)
        if args.depth:
            d = r.depth.numpy()
            scale = args.depth_max if args.depth_max > 0 else max(float(d.max()), 1e-12)
            fileio.write_pgm(out / f"depth_{j:03d}.pgm", np.clip(d / scale, 0.0, 1.0))
    _write_run_config(out, "render", {"scene": args.scene, "poses": args.poses, "orbit": args.orbit,
                                      "test_views": args.test_views, "data": args.data, "depth": args.depth,
                                      "camera": cam.intrinsics_dict(), "background": list(bg)})
    print(f"{len(poses)} frames -> {out}")
    return 0


# --- eval --------------------------------------------------------------------------

def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    scene = load_scene(args.scene)
    trajs = load_poses(args.poses)
    if len(trajs) != ds.n_frames:
        raise CliError(f"{args.poses} has {len(trajs)} trajectories, dataset has {ds.n_frames} frames")
    report = evaluate(scene, trajs, ds, initial=ds.init_poses)
    text = report.to_json()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _write_run_config(out.parent, "eval", {"scene": args.scene, "poses": args.poses, "data": args.data,
                                               "report": out.name})
    else:
        print(text)
    return 0


# --- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evsplat", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic blurry-frame + event dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--blur-level", choices=sorted(BLUR_SPEED), default="medium")
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--res", type=int, default=64)
    g.add_argument("--gaussians", type=int, default=200)
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("edi", help="deblur one frame with its events")
    e.add_argument("--blur", required=True)
    e.add_argument("--events", required=True)
    e.add_argument("--exposure", type=float, nargs=2, metavar=("T0", "T1"), required=True)
    e.add_argument("--n", type=int, default=9)
    e.add_argument("--c-pos", type=float, default=0.25)
    e.add_argument("--c-neg", type=float, default=0.25)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_edi)

    t = sub.add_parser("train", help="optimize a scene and trajectories on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-event-loss", action="store_true")
    t.add_argument("--no-depth-loss", action="store_true")
    t.add_argument("--no-int-loss", action="store_true")
    t.add_argument("--resume", nargs="?", const="latest",
                   help="checkpoint directory, or the latest one under --out")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a scene file")
    r.add_argument("--scene", required=True)
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--poses")
    src.add_argument("--orbit", type=int)
    src.add_argument("--test-views", action="store_true")
    r.add_argument("--data", help="dataset whose camera and background to use")
    r.add_argument("--res", type=int, default=64)
    r.add_argument("--background", type=float, nargs=3, default=(0.4, 0.4, 0.4))
    r.add_argument("--radius", type=float, default=4.0)
    r.add_argument("--height", type=float, default=1.2)
    r.add_argument("--depth", action="store_true", help="also write PGM depth maps")
    r.add_argument("--depth-max", type=float, default=0.0, help="depth mapped to white (0: per-frame max)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    v = sub.add_parser("eval", help="score a scene and trajectories against a dataset")
    v.add_argument("--scene", required=True)
    v.add_argument("--poses", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--out")
    v.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    n = int(os.environ.get("EVA_THREADS", "0") or 0)
    if n > 0:
        torch.set_num_threads(n)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, OSError, ValueError, KeyError, FloatingPointError) as e:
        print(f"evsplat {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
