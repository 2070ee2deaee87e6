"""Joint optimization of a Gaussian scene and per-frame exposure trajectories."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree

from . import losses
from .edi import edi_latents
from .event_core import EPS, integrate_events, rgb_to_gray, soft_event_map, warp_intensity
from .gsplat import GaussianScene, load_scene, render, render_views, save_scene
from .trajectory import CameraTrajectory, interpolate_pose, load_poses, save_poses, trajectories_ate

PARAM_KEYS = ("means", "log_scales", "quats", "opacity_logits", "colors")


@dataclass
class LearningRates:
    means: float = 1.6e-4  # multiplied by the scene extent
    means_final: float = 1.6e-6
    scales: float = 5e-3
    rotations: float = 1e-3
    opacities: float = 0.05
    colors: float = 2.5e-3
    poses: float = 1e-3
    poses_final: float = 1e-4


@dataclass
class TrainConfig:
    total_iters: int = 5000
    warmup_iters: int = 300
    coarse_fraction: float = 0.3
    coarse_scale: float = 0.3
    lr: LearningRates = field(default_factory=LearningRates)
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    n_poses: int = 9
    seed: int = 0
    use_event: bool = True
    use_int: bool = True
    use_depth: bool = True
    aux_every: int = 5  # iterations between inter-frame L_int / L_depth samples
    log_every: int = 1
    eval_every: int = 0  # 0 disables in-loop ATE/PSNR
    checkpoint_every: int = 0
    backend: str = "numba"

    def __post_init__(self):
        if isinstance(self.lr, dict):
            self.lr = LearningRates(**self.lr)
        if isinstance(self.weights, dict):
            self.weights = losses.LossWeights(**self.weights)
        if self.total_iters < 0:
            raise ValueError("total_iters must be non-negative")
        if self.total_iters > 0 and not self.warmup_iters < self.total_iters:
            raise ValueError("warmup_iters must be smaller than total_iters")
        if not 0 < self.coarse_scale <= 1:
            raise ValueError("coarse_scale must lie in (0, 1]")
        if not 0 <= self.coarse_fraction < 1:
            raise ValueError("coarse_fraction must lie in [0, 1)")
        if self.n_poses < 2:
            raise ValueError("need at least two poses per exposure")
        if self.aux_every < 1 or self.log_every < 1:
            raise ValueError("aux_every and log_every must be positive")

    @property
    def coarse_iters(self) -> int:
        return int(round(self.coarse_fraction * self.total_iters))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        """Build from flat dotted keys such as ``{"lr.poses": 1e-3, "weights.w_event": 0}``."""
        nested: dict = {}
        for key, value in flat.items():
            head, _, rest = key.partition(".")
            if rest:
                nested.setdefault(head, {})[rest] = value
            else:
                nested[key] = value
        known = {f.name for f in fields(cls)}
        unknown = set(nested) - known
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**nested)


class TrainingAborted(FloatingPointError):
    pass


# --- optimizer -------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return max(self.steps.values(), default=0)

    def to_npz(self, path, params: dict) -> None:
        blob = {}
        for k, t in params.items():
            blob[f"param/{k}"] = t.detach().numpy()
        for k in self.m:
            blob[f"m/{k}"] = self.m[k].numpy()
            blob[f"v/{k}"] = self.v[k].numpy()
            blob[f"step/{k}"] = np.array(self.steps[k])
        np.savez(path, **blob)

    @staticmethod
    def from_npz(path) -> tuple[dict, "OptimizerState"]:
        data = np.load(path)
        params, st = {}, OptimizerState()
        for name in data.files:
            kind, key = name.split("/", 1)
            arr = data[name]
            if kind == "param":
                params[key] = torch.from_numpy(arr.copy())
            elif kind == "m":
                st.m[key] = torch.from_numpy(arr.copy())
            elif kind == "v":
                st.v[key] = torch.from_numpy(arr.copy())
            else:
                st.steps[key] = int(arr)
        return params, st


def adam_step(params: dict, grads: dict, state: OptimizerState, lr, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-15, quat_keys=("quats",)):
    """Bias-corrected Adam on the entries of ``grads``; updates ``params`` in place.

    ``lr`` is a float or a dict keyed like ``grads``.  Quaternion entries are
    renormalized after the update.
    """
    for key, g in grads.items():
        p = params[key]
        if tuple(g.shape) != tuple(p.shape):
            raise ValueError(f"gradient for {key} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        g = g.detach().to(p.dtype)
        if key not in state.m:
            state.m[key] = torch.zeros_like(p, memory_format=torch.contiguous_format).detach()
            state.v[key] = torch.zeros_like(p, memory_format=torch.contiguous_format).detach()
            state.steps[key] = 0
        state.steps[key] += 1
        t = state.steps[key]
        m = state.m[key].mul_(beta1).add_(g, alpha=1 - beta1)
        v = state.v[key].mul_(beta2).addcmul_(g, g, value=1 - beta2)
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        step_lr = lr[key] if isinstance(lr, dict) else lr
        with torch.no_grad():
            p.sub_(step_lr * m_hat / (v_hat.sqrt() + eps))
            if key in quat_keys:
                p.div_(p.norm(dim=-1, keepdim=True).clamp_min(1e-12))
    return params, state


# --- initialization ----------------------------------------------------------------

def init_scene(points, colors=None, extent: float = 2.0, init_opacity: float = 0.1,
               dtype=torch.float64) -> GaussianScene:
    """One isotropic Gaussian per point, scale = mean distance to its 3 nearest neighbours."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot initialise a scene from an empty point cloud")
    n = len(pts)
    if n == 1:
        scale = np.full(1, extent / 100)
    else:
        k = min(3, n - 1)
        d, _ = cKDTree(pts).query(pts, k=k + 1)
        scale = d[:, 1:].reshape(n, k).mean(1)
        scale = np.where(scale > 0, scale, extent / 100)
    cols = np.full((n, 3), 0.5) if colors is None else np.asarray(colors, dtype=np.float64).reshape(n, 3)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    logit = math.log(init_opacity / (1 - init_opacity))
    return GaussianScene.from_numpy(
        dtype, means=pts, log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1), quats=quats,
        opacity_logits=np.full(n, logit), colors=np.clip(cols, 0.0, 1.0))


# --- training ---------------------------------------------------------------------

def _resize(img: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    """Area-average an (H, W) or (H, W, C) image to ``hw``."""
    if tuple(img.shape[:2]) == tuple(hw):
        return img
    x = img[None, None] if img.dim() == 2 else img.permute(2, 0, 1)[None]
    y = F.adaptive_avg_pool2d(x, hw)[0]
    return y[0] if img.dim() == 2 else y.permute(1, 2, 0)


def _exp_decay(lr0: float, lr1: float, it: int, total: int) -> float:
    if total <= 1:
        return lr0
    u = min(max(it / (total - 1), 0.0), 1.0)
    return float(math.exp((1 - u) * math.log(lr0) + u * math.log(lr1)))


class _Targets:
    """Per-frame supervision precomputed from the dataset."""

    def __init__(self, dataset, n_poses: int, dtype):
        th = dataset.thresholds
        self.blur, self.event_maps, self.edi_first, self.edi_last = [], [], [], []
        for k in range(dataset.n_frames):
            ts = dataset.timestamps[k]
            if len(ts) != n_poses:
                raise ValueError(f"frame {k} has {len(ts)} exposure poses, config expects {n_poses}")
            self.blur.append(torch.as_tensor(dataset.blur[k], dtype=dtype))
            frame = dataset.blur_frame(k)
            maps = []
            for i in range(n_poses - 1):
                t1 = ts[i + 1] if i < n_poses - 2 else np.nextafter(ts[-1], np.inf)
                maps.append(torch.as_tensor(integrate_events(frame.event_slice, ts[i], t1).counts, dtype=dtype))
            self.event_maps.append(maps)
            lat, _ = edi_latents(frame, th, n_poses)
            self.edi_first.append(rgb_to_gray(lat[0]))
            self.edi_last.append(rgb_to_gray(lat[-1]))

    def intensity_at(self, dataset, gap: int, t: float) -> np.ndarray:
        """G(t) between frames ``gap`` and ``gap + 1`` from the nearer EDI end frame."""
        t_a = float(dataset.intervals[gap][1])
        t_b = float(dataset.intervals[gap + 1][0])
        th = dataset.thresholds
        if t - t_a <= t_b - t:
            return warp_intensity(self.edi_last[gap], integrate_events(dataset.events, t_a, t), th)
        return warp_intensity(self.edi_first[gap + 1], -integrate_events(dataset.events, t, t_b).counts, th)


def _leaves(scene: GaussianScene) -> dict:
    return {k: t.detach().clone().requires_grad_(True) for k, t in scene.tensors().items()}


def _lrs(cfg: TrainConfig, it: int, extent: float) -> dict:
    lr = cfg.lr
    return {
        "means": _exp_decay(lr.means * extent, lr.means_final * extent, it, cfg.total_iters),
        "log_scales": lr.scales,
        "quats": lr.rotations,
        "opacity_logits": lr.opacities,
        "colors": lr.colors,
        "poses": _exp_decay(lr.poses, lr.poses_final, it, cfg.total_iters),
    }


def _apply_threads() -> None:
    n = int(os.environ.get("EVA_THREADS", "0") or 0)
    if n > 0:
        torch.set_num_threads(n)


def _scene_psnr(scene: GaussianScene, dataset, backend: str) -> float:
    from .eval_metrics import psnr
    vals = []
    with torch.no_grad():
        for tv in dataset.tests:
            img = render(scene, dataset.camera.with_pose(tv.pose), dataset.background, backend=backend).color
            vals.append(psnr(img.numpy(), tv.image))
    return float(np.mean(vals)) if vals else float("nan")


def train(dataset, config: TrainConfig | None = None, out_dir=None, resume=None,
          scene: GaussianScene | None = None, trajectories=None,
          callback: Callable[[dict], None] | None = None):
    """Optimize scene and trajectory offsets against the blurry frames and events.

    Returns (scene, trajectories, log).  ``out_dir`` receives ``metrics.jsonl``
    and periodic checkpoints; ``resume`` names a checkpoint directory.
    """
    cfg = config or TrainConfig()
    _apply_threads()
    dtype = torch.float64
    F_n = dataset.n_frames
    if F_n < 2:
        raise ValueError("training needs at least two blurry frames")
    extent = dataset.extent
    w = cfg.weights
    th = dataset.thresholds

    if scene is None:
        scene = init_scene(dataset.points, dataset.point_colors, extent, dtype=dtype)
    if trajectories is None:
        trajectories = [tr.copy() for tr in dataset.init_poses]
    trajs = [tr.copy() for tr in trajectories]
    params = _leaves(scene)
    for k, tr in enumerate(trajs):
        params[f"pose_{k}"] = tr.offsets.detach().clone().to(dtype).requires_grad_(True)
    state = OptimizerState()
    rng = np.random.default_rng(cfg.seed)
    start = 0
    log: list[dict] = []

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        start, rng, log = _load_checkpoint(Path(resume), params, state)
    if out is not None:
        # rewrite the log so it continues exactly at the checkpoint iteration
        (out / "metrics.jsonl").write_text("".join(json.dumps(r) + "\n" for r in log))

    targets = _Targets(dataset, cfg.n_poses, dtype) if cfg.total_iters > start else None
    cam_full = dataset.camera
    cam_coarse = cam_full.scaled(cfg.coarse_scale)

    def current_scene() -> GaussianScene:
        return GaussianScene(**{k: params[k] for k in PARAM_KEYS})

    def sync_trajs():
        for k, tr in enumerate(trajs):
            tr.offsets = params[f"pose_{k}"].detach().clone()

    for it in range(start, cfg.total_iters):
        k = it % F_n
        cam = cam_coarse if it < cfg.coarse_iters else cam_full
        hw = (cam.height, cam.width)
        tr = trajs[k]
        offs = params[f"pose_{k}"]
        viewmats = CameraTrajectory(tr.base_poses, offs, tr.timestamps).viewmats(dtype)
        sc = current_scene()
        try:
            views = render_views(sc, [cam.with_pose(p) for p in tr.base_poses], dataset.background,
                                 viewmats=viewmats, backend=cfg.backend)
        except FloatingPointError as e:
            raise TrainingAborted(f"iteration {it}: {e}") from e
        b_sim = views.color.mean(0)
        comps = {"blur": losses.blur_loss(_resize(targets.blur[k], hw), b_sim, w.lambda1)}

        event_on = cfg.use_event and it >= cfg.warmup_iters and w.w_event > 0
        if event_on:
            gray = rgb_to_gray(views.color)
            sim = [soft_event_map(gray[i], gray[i + 1], th) for i in range(cfg.n_poses - 1)]
            gt = [_resize(m, hw) for m in targets.event_maps[k]]
            comps["event"] = losses.event_loss(gt, sim)

        aux = (cfg.use_int or cfg.use_depth) and it % cfg.aux_every == 0
        if aux:
            gap = int(rng.integers(F_n - 1))
            t_a = float(dataset.intervals[gap][1])
            t_b = float(dataset.intervals[gap + 1][0])
            t = float(t_a + rng.random() * (t_b - t_a))
            G = torch.as_tensor(targets.intensity_at(dataset, gap, t), dtype=dtype)
            G = _resize(G, hw)
            sync_trajs()
            pose = interpolate_pose(trajs[gap], trajs[gap + 1], t)
            r = render(sc, cam.with_pose(pose), dataset.background, backend=cfg.backend)
            if cfg.use_int:
                comps["int"] = losses.intensity_loss(G, rgb_to_gray(r.color), w.lambda2)
            if cfg.use_depth:
                comps["depth"] = losses.depth_reg_loss(r.depth, G, w.beta)

        try:
            total = losses.total_loss(comps, w)
        except FloatingPointError as e:
            raise TrainingAborted(f"iteration {it}: {e}") from e
        grad_keys = list(PARAM_KEYS) + [f"pose_{k}"]
        grads = torch.autograd.grad(total, [params[g] for g in grad_keys], allow_unused=True)
        lrs = _lrs(cfg, it, extent)
        step_grads = {g: (torch.zeros_like(params[g]) if d is None else d) for g, d in zip(grad_keys, grads)}
        step_lrs = {g: lrs["poses"] if g.startswith("pose_") else lrs[g] for g in grad_keys}
        adam_step(params, step_grads, state, step_lrs)
        with torch.no_grad():
            params["colors"].clamp_(0.0, 1.0)

        if it % cfg.log_every == 0 or it == cfg.total_iters - 1:
            rec = {"iter": it, "frame": k, "resolution": list(hw)}
            for name, val in comps.items():
                rec[name] = float(val.detach())
            rec["event_weighted"] = w.w_event * rec.get("event", 0.0)
            rec["total"] = float(total.detach())
            rec["lr"] = lrs
            if cfg.eval_every and (it % cfg.eval_every == 0 or it == cfg.total_iters - 1):
                sync_trajs()
                rec["ate"] = trajectories_ate(trajs, dataset.gt_poses)
                rec["psnr"] = _scene_psnr(current_scene().to(dtype), dataset, cfg.backend)
            log.append(rec)
            if out is not None:
                with open(out / "metrics.jsonl", "a") as fh:
                    fh.write(json.dumps(rec) + "\n")
            if callback is not None:
                callback(rec)

        if out is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            sync_trajs()
            _save_checkpoint(out / "checkpoints" / f"iter_{it + 1:06d}", it + 1, params, state, rng,
                             trajs, current_scene(), log)

    sync_trajs()
    final = GaussianScene(**{k: params[k].detach().clone() for k in PARAM_KEYS})
    if out is not None:
        save_scene(final, out / "scene.json")
        save_poses(trajs, out / "poses.json", include_offsets=True)
    return final, trajs, log


def _save_checkpoint(path: Path, next_iter: int, params, state, rng, trajs, scene, log) -> None:
    path.mkdir(parents=True, exist_ok=True)
    save_scene(scene.map(lambda t: t.detach()), path / "scene.json")
    save_poses(trajs, path / "poses.json", include_offsets=True)
    state.to_npz(path / "optimizer.npz", params)
    (path / "state.json").write_text(json.dumps({"next_iter": next_iter, "rng": rng.bit_generator.state}))
    (path / "metrics.jsonl").write_text("".join(json.dumps(r) + "\n" for r in log))


def _load_checkpoint(path: Path, params: dict, state: OptimizerState):
    if not (path / "state.json").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    meta = json.loads((path / "state.json").read_text())
    saved, st = OptimizerState.from_npz(path / "optimizer.npz")
    for key, val in saved.items():
        if key not in params or tuple(params[key].shape) != tuple(val.shape):
            raise ValueError(f"checkpoint parameter {key} does not match the current run")
        params[key] = val.to(params[key].dtype).requires_grad_(True)
    state.m, state.v, state.steps = st.m, st.v, st.steps
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    log = [json.loads(line) for line in (path / "metrics.jsonl").read_text().splitlines() if line]
    return int(meta["next_iter"]), rng, log


def latest_checkpoint(out_dir) -> Path | None:
    ck = sorted((Path(out_dir) / "checkpoints").glob("iter_*"))
    return ck[-1] if ck else None


def load_result(out_dir):
    """Scene and trajectories written by a finished ``train`` run."""
    out = Path(out_dir)
    return load_scene(out / "scene.json"), load_poses(out / "poses.json")
