"""Exit criteria for the package, one test per criterion.

Each test appends a ``criterion N: PASS|FAIL ...`` line that is printed in
the terminal summary (and immediately with ``-s``).  The training criteria
are slow: about 8 minutes each for the seed sweep, its determinism re-run
and the blur-level sweep on one core.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from _helpers import central_diff, random_scene, rel_err, small_camera
from evsplat.cli import main
from evsplat.eval_metrics import evaluate
from evsplat.edi import edi_latents, edi_sharp
from evsplat.event_core import Thresholds, integrate_events, rgb_to_gray, soft_event_map, warp_intensity
from evsplat.gsplat import render, render_with_grad
from evsplat.losses import blur_loss, depth_reg_loss, dssim, event_loss, intensity_loss, ssim
from evsplat.synthdata import generate_dataset, load_dataset
from evsplat.trainer import TrainConfig, train
from evsplat.trajectory import synthesize_blur

SEEDS = (0, 1, 2, 3, 4)
ITERS = 2000
ABLATIONS = {
    "blur": ["--no-event-loss", "--no-int-loss", "--no-depth-loss"],
    "blur+event": ["--no-int-loss", "--no-depth-loss"],
}


def psnr(a, b):
    return float(10 * np.log10(1.0 / np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def report(log, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    log.append(line)
    print(line, flush=True)
    assert ok, line


# --- 1. event round trip --------------------------------------------------------------------

def test_criterion_1_event_round_trip(toy, tmp_path, acceptance_log):
    datasets = [toy] + [load_dataset(generate_dataset(tmp_path / f"d{s}", seed=s, blur_level=lvl))
                        for s, lvl in ((21, "mild"), (22, "strong"))]
    start = time.perf_counter()
    worst_log, worst_mean = 0.0, 0.0
    for ds in datasets:
        th = ds.thresholds
        assert (th.c_pos, th.c_neg) == (0.25, 0.25)
        for k in range(ds.n_frames):
            lat = ds.latents(k)
            first, last = rgb_to_gray(lat[0]), rgb_to_gray(lat[-1])
            t0, t1 = ds.intervals[k]
            pred = warp_intensity(first, integrate_events(ds.events, t0, np.nextafter(t1, np.inf)), th)
            worst_log = max(worst_log, float(np.abs(np.log(pred) - np.log(last)).max()))
            worst_mean = max(worst_mean, float(np.abs(pred - last).mean()))
    took = time.perf_counter() - start
    ok = worst_log < 0.25 and worst_mean < 0.13 and took < 5
    report(acceptance_log, 1, ok, f"max log err {worst_log:.4f} < 0.25, worst mean abs err {worst_mean:.4f} < 0.13, "
                                  f"{took:.2f}s < 5s")


# --- 2. EDI recovery ----------------------------------------------------------------------------

def test_criterion_2_edi_recovery(toy, acceptance_log):
    start = time.perf_counter()
    mid, lat_min = [], []
    for k in range(toy.n_frames):
        frame = toy.blur_frame(k)
        gt = toy.latents(k)
        mid.append(psnr(edi_sharp(frame, toy.thresholds, 9), gt[4]))
        lat, _ = edi_latents(frame, toy.thresholds, 9)
        lat_min.append(min(psnr(a, b) for a, b in zip(lat, gt)))
    took = time.perf_counter() - start
    ok = min(mid) > 30 and min(lat_min) > 28 and took < 10
    report(acceptance_log, 2, ok, f"midpoint min {min(mid):.2f} dB > 30, latent min {min(lat_min):.2f} dB > 28, "
                                  f"{took:.2f}s < 10s")


# --- 3. gradient suite -----------------------------------------------------------------------------

def _check(fn, x, h=1e-5):
    xt = torch.tensor(x, requires_grad=True)
    fn(xt).backward()
    fd = central_diff(lambda v: float(fn(torch.tensor(v))), x.copy(), h)
    return rel_err(xt.grad.numpy(), fd)


def test_criterion_3_gradient_suite(acceptance_log):
    start = time.perf_counter()
    worst = {}
    th = Thresholds(0.2, 0.3)
    for seed in (0, 1, 2):
        rng = np.random.default_rng(100 + seed)
        scene = random_scene(rng, 5)
        cam, bg = small_camera(16), (0.3, 0.5, 0.2)
        up = {"color": torch.tensor(rng.normal(size=(16, 16, 3))), "depth": torch.tensor(rng.normal(size=(16, 16))),
              "alpha": torch.tensor(rng.normal(size=(16, 16)))}

        def weighted(s, delta=None):
            out = render(s, cam, bg, None if delta is None else torch.as_tensor(delta))
            return float((out.color * up["color"]).sum() + (out.depth * up["depth"]).sum()
                         + (out.alpha * up["alpha"]).sum())

        grads = render_with_grad(scene, cam, bg, up)
        for name, t in scene.tensors().items():
            def f(x, name=name):
                s = scene.clone()
                getattr(s, name).copy_(torch.from_numpy(x))
                return weighted(s)
            err = rel_err(grads[name].numpy(), central_diff(f, t.numpy().copy()))
            worst[name] = max(worst.get(name, 0.0), err)
        err = rel_err(grads["pose"].numpy(), central_diff(lambda d: weighted(scene, d), np.zeros(6)))
        worst["pose"] = max(worst.get("pose", 0.0), err)

        a = rng.uniform(0.1, 0.9, (16, 16))
        b = rng.uniform(0.1, 0.9, (16, 16))
        w = torch.tensor(rng.normal(size=(16, 16)))
        worst["soft_event_map"] = max(worst.get("soft_event_map", 0.0),
                                      _check(lambda x: (soft_event_map(torch.tensor(a), x, th) * w).sum(), b),
                                      _check(lambda x: (soft_event_map(x, torch.tensor(b), th) * w).sum(), a))
        B, G = rng.uniform(0, 1, (16, 16, 3)), rng.uniform(0, 1, (16, 16))
        gts = [torch.tensor(rng.normal(size=(16, 16))) for _ in range(3)]
        for name, fn, x in (
            ("blur_loss", lambda x: blur_loss(torch.tensor(B), x), rng.uniform(0, 1, (16, 16, 3))),
            ("intensity_loss", lambda x: intensity_loss(torch.tensor(G), x), rng.uniform(0, 1, (16, 16))),
            ("event_loss", lambda x: event_loss(gts, [x[i] for i in range(3)]), rng.normal(size=(3, 16, 16))),
            ("depth_reg_loss", lambda x: depth_reg_loss(x, torch.tensor(G)), rng.uniform(1, 3, (16, 16))),
        ):
            worst[name] = max(worst.get(name, 0.0), _check(fn, x))
    took = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-4 and len(worst) == 11 and took < 60
    report(acceptance_log, 3, ok, f"{len(worst)} gradient groups x 3 instances, worst {name} rel err {err:.2e} "
                                  f"< 1e-4, {took:.1f}s < 60s")


# --- 4. blur synthesis ---------------------------------------------------------------------------------

def test_criterion_4_blur_synthesis(toy, acceptance_log):
    start = time.perf_counter()
    scene = toy.gt_scene()
    vals = []
    with torch.no_grad():
        for k, traj in enumerate(toy.gt_trajectories()):
            vals.append(psnr(synthesize_blur(scene, traj, toy.camera, toy.background).numpy(), toy.blur[k]))
    took = time.perf_counter() - start
    ok = min(vals) > 40 and took < 5
    report(acceptance_log, 4, ok, f"min PSNR {min(vals):.1f} dB > 40 over {len(vals)} frames, {took:.2f}s < 5s")


# --- 5, 6, 8, 9: the seed sweep ------------------------------------------------------------------------

def run_pipeline(root: Path, seed: int) -> dict:
    """gen, train both ablations and eval through the command line; returns the reports."""
    data = root / f"data_{seed}"
    assert main(["gen", "--seed", str(seed), "--out", str(data), "--blur-level", "medium"]) == 0
    out = {}
    for name, flags in ABLATIONS.items():
        run = root / f"{name}_{seed}"
        assert main(["train", "--data", str(data), "--out", str(run), "--iters", str(ITERS),
                     "--seed", str(seed), *flags]) == 0
        assert main(["eval", "--scene", str(run / "scene.json"), "--poses", str(run / "poses.json"),
                     "--data", str(data), "--out", str(run / "report.json")]) == 0
        out[name] = json.loads((run / "report.json").read_text())
    return out


def sweep(root: Path):
    start = time.perf_counter()
    reports = {s: run_pipeline(root, s) for s in SEEDS}
    return reports, time.perf_counter() - start


@pytest.fixture(scope="module")
def seed_sweep(tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep")
    reports, took = sweep(root)
    return root, reports, took


def test_criterion_5_event_loss_improves_psnr(seed_sweep, acceptance_log):
    _, reports, took = seed_sweep
    wins = [reports[s]["blur+event"]["mean_psnr"] > reports[s]["blur"]["mean_psnr"] for s in SEEDS]
    detail = ", ".join(f"s{s} {reports[s]['blur']['mean_psnr']:.3f}/{reports[s]['blur+event']['mean_psnr']:.3f}"
                       for s in SEEDS)
    ok = sum(wins) >= 4 and took < 15 * 60
    report(acceptance_log, 5, ok, f"blur-only < blur+event on {sum(wins)}/5 seeds (need 4) [{detail}], "
                                  f"{took / 60:.1f} min < 15")


def test_criterion_6_pose_optimisation_lowers_ate(seed_sweep, acceptance_log):
    _, reports, _ = seed_sweep
    r = [reports[s]["blur+event"] for s in SEEDS]
    better = [x["ate_final"] < x["ate_initial"] for x in r]
    detail = ", ".join(f"{x['ate_initial']:.4f}->{x['ate_final']:.4f}" for x in r)
    report(acceptance_log, 6, sum(better) >= 4, f"final ATE < initial on {sum(better)}/5 seeds (need 4) [{detail}]")


def test_criterion_8_identities_and_schedule(seed_sweep, acceptance_log):
    root, _, _ = seed_sweep
    start = time.perf_counter()
    rng = np.random.default_rng(8)
    gap = 0.0
    for _ in range(20):
        x, y = rng.uniform(0, 1, (2, 24, 24, 3))
        gap = max(gap, abs(float(dssim(x, y)) - (1 - float(ssim(x, y))) / 2))
    flat = float(depth_reg_loss(np.full((32, 32), 2.5), rng.uniform(0, 1, (32, 32))))
    warmup, coarse = int(round(0.06 * ITERS)), int(round(0.3 * ITERS))
    schedule_ok = True
    for s in SEEDS:
        log = [json.loads(x) for x in (root / f"blur+event_{s}" / "metrics.jsonl").read_text().splitlines()]
        full = log[-1]["resolution"]
        schedule_ok &= [r["iter"] for r in log] == list(range(ITERS))
        schedule_ok &= all((r["event_weighted"] == 0.0) == (r["iter"] < warmup) for r in log)
        schedule_ok &= all((r["resolution"] != full) == (r["iter"] < coarse) for r in log)
        schedule_ok &= all(r["resolution"][0] < full[0] for r in log[:coarse])
    took = time.perf_counter() - start
    ok = gap < 1e-12 and flat == 0.0 and schedule_ok and took < 10
    report(acceptance_log, 8, ok, f"|dssim-(1-ssim)/2| max {gap:.1e}, flat-depth loss {flat}, schedule invariants "
                                  f"{'hold' if schedule_ok else 'broken'} on 5 logs, {took:.2f}s < 10s")


def test_criterion_9_determinism(seed_sweep, tmp_path, acceptance_log):
    root, _, _ = seed_sweep
    sweep(tmp_path)
    diffs, n = [], 0
    for p in sorted(root.rglob("*")):
        if not p.is_file() or p.name.startswith("run_config"):
            continue
        n += 1
        q = tmp_path / p.relative_to(root)
        if not q.exists() or q.read_bytes() != p.read_bytes():
            diffs.append(str(p.relative_to(root)))
    report(acceptance_log, 9, not diffs and n > 0,
           f"{n} output files from gen/train/eval compared, {len(diffs)} differ {diffs[:3]}")


# --- 7. blur-level robustness --------------------------------------------------------------------------------

def test_criterion_7_blur_level_robustness(tmp_path, acceptance_log):
    start = time.perf_counter()
    levels = ("mild", "medium", "strong")
    seeds = (0, 1, 2)
    table, per_seed = {}, {}
    for lvl in levels:
        vals = []
        for s in seeds:
            ds = load_dataset(generate_dataset(tmp_path / f"{lvl}_{s}", seed=s, blur_level=lvl))
            scene, trajs, _ = train(ds, TrainConfig(total_iters=ITERS, warmup_iters=int(round(0.06 * ITERS)), seed=s))
            vals.append(evaluate(scene, trajs, ds).mean_psnr)
        table[lvl] = float(np.mean(vals))
        per_seed[lvl] = "/".join(f"{v:.2f}" for v in vals)
    took = time.perf_counter() - start
    mono = table["mild"] >= table["medium"] >= table["strong"]
    gap = table["mild"] - table["strong"]
    ok = mono and gap < 4 and took < 45 * 60
    detail = ", ".join(f"{k} {v:.2f} ({per_seed[k]})" for k, v in table.items())
    report(acceptance_log, 7, ok, f"mean test PSNR over seeds {seeds}: {detail}; monotone={mono}, "
                                  f"mild-strong gap {gap:.2f} dB < 4, {took / 60:.1f} min < 45")
