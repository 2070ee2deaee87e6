"""Procedural blurry-frame + event datasets.

Ground truth is itself a Gaussian scene rendered by the same rasterizer.
A camera orbits the scene; each blurry frame averages the sharp renders at
its exposure poses, and events come from a dense render sequence over the
whole timeline.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import fileio
from .edi import BlurFrame
from .event_core import EventStream, Thresholds, read_evt1, rgb_to_gray, simulate_events, write_evt1
from .gsplat import Camera, GaussianScene, load_scene, render_views, save_scene
from .lie import look_at
from .trajectory import CameraTrajectory, init_trajectories, load_poses, save_poses

SCHEMA = "evads/1"
BLUR_SPEED = {"mild": 0.5, "medium": 1.0, "strong": 2.0}


def make_scene(seed: int, n_gaussians: int, extent: float = 2.0) -> GaussianScene:
    """Seeded scene of colored Gaussian clusters inside a cube of side ``extent``."""
    if n_gaussians < 1:
        raise ValueError("need at least one Gaussian")
    rng = np.random.default_rng(seed)
    half = extent / 2
    n_clusters = max(1, n_gaussians // 25)
    centers = rng.uniform(-0.55 * half, 0.55 * half, size=(n_clusters, 3))
    palette = rng.uniform(0.15, 0.95, size=(n_clusters, 3))
    label = np.arange(n_gaussians) % n_clusters
    means = centers[label] + rng.normal(scale=0.22 * half, size=(n_gaussians, 3))
    log_scales = np.log(rng.uniform(0.07, 0.16, size=(n_gaussians, 3)) * half)
    quats = rng.normal(size=(n_gaussians, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    quats *= np.sign(quats[:, :1] + 1e-12)
    opacity_logits = rng.uniform(1.0, 4.0, size=n_gaussians)
    colors = np.clip(palette[label] + rng.normal(scale=0.05, size=(n_gaussians, 3)), 0.1, 0.95)
    return GaussianScene.from_numpy(torch.float64, means=means, log_scales=log_scales, quats=quats,
                                    opacity_logits=opacity_logits, colors=colors)


@dataclass
class OrbitPath:
    """Camera path around the origin.

    Frame k is exposed over [k * period - tau / 2, k * period + tau / 2].
    During an exposure the camera center slides ``span`` radians along the
    orbit while the viewing direction stays aimed from the exposure-center
    angle, so the whole image translates (shake-like blur).  Between
    exposures both the position angle and the aim angle move linearly to
    the next exposure start.  ``jitter[k]`` shifts the camera center for
    frame k and is blended linearly across gaps.
    """

    radius: float
    height: float
    period: float
    tau: float
    span: float
    centers: np.ndarray  # (F,) orbit angles at exposure midpoints
    jitter: np.ndarray  # (F, 3)

    @property
    def n_frames(self) -> int:
        return len(self.centers)

    def exposure(self, k: int) -> tuple[float, float]:
        mid = k * self.period
        return mid - self.tau / 2, mid + self.tau / 2

    def _state(self, t: float):
        """(position angle, aim angle, center offset) at time t."""
        t = float(t)
        k = int(np.clip(np.floor((t + self.tau / 2) / self.period), 0, self.n_frames - 1))
        t0, t1 = self.exposure(k)
        if t <= t1 or k == self.n_frames - 1:
            u = (t - k * self.period) / self.tau
            return self.centers[k] + u * self.span, self.centers[k], self.jitter[k]
        n0, _ = self.exposure(k + 1)
        u = (t - t1) / (n0 - t1)
        a0 = self.centers[k] + self.span / 2
        a1 = self.centers[k + 1] - self.span / 2
        aim = self.centers[k] + u * (self.centers[k + 1] - self.centers[k])
        return a0 + u * (a1 - a0), aim, (1 - u) * self.jitter[k] + u * self.jitter[k + 1]

    def orbit_point(self, angle: float) -> np.ndarray:
        return np.array([self.radius * np.cos(angle), self.radius * np.sin(angle), self.height])

    def orbit_pose(self, angle: float, aim: float | None = None, offset=(0.0, 0.0, 0.0)) -> np.ndarray:
        """Camera on the orbit at ``angle``, oriented as if looking at the origin from ``aim``."""
        R = look_at(self.orbit_point(angle if aim is None else aim), np.zeros(3))[:3, :3]
        c = self.orbit_point(angle) + np.asarray(offset, dtype=np.float64)
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = -R @ c
        return T

    def pose(self, t: float) -> np.ndarray:
        angle, aim, off = self._state(t)
        return self.orbit_pose(angle, aim, off)


def make_trajectory(seed: int, n_frames: int, n_poses: int = 9, jitter: float = 0.02,
                    speed: float = 1.0, base_span: float = 0.035, radius: float = 4.0,
                    height: float = 1.2, period: float = 1.0, tau: float = 0.25,
                    spacing: float = 2 * np.pi / 12):
    """Orbit path plus per-frame exposure poses and timestamps.

    Returns (path, poses (F, n, 4, 4), timestamps (F, n), intervals (F, 2)).
    ``speed`` scales the angle swept during each exposure.
    """
    if n_frames < 2:
        raise ValueError("need at least two frames")
    if n_poses % 2 == 0:
        raise ValueError("pose count per exposure must be odd")
    span = base_span * speed
    if span >= spacing:
        raise ValueError("exposures would overlap; lower the speed")
    rng = np.random.default_rng(seed)
    start = rng.uniform(0, 2 * np.pi)
    centers = start + spacing * np.arange(n_frames)
    jit = rng.normal(scale=jitter, size=(n_frames, 3)) if jitter > 0 else np.zeros((n_frames, 3))
    path = OrbitPath(radius, height, period, tau, span, centers, jit)
    times = np.stack([np.linspace(*path.exposure(k), n_poses) for k in range(n_frames)])
    poses = np.stack([[path.pose(t) for t in row] for row in times])
    intervals = np.array([path.exposure(k) for k in range(n_frames)])
    return path, poses, times, intervals


def canonical_pose(radius: float = 4.0, height: float = 1.2) -> np.ndarray:
    """Orbit angle zero, looking at the origin."""
    return look_at(np.array([radius, 0.0, height]), np.zeros(3))


def default_camera(width: int, height: int) -> Camera:
    f = 1.4 * width
    return Camera(f, f, width / 2, height / 2, width, height)


@dataclass
class GenConfig:
    seed: int = 0
    width: int = 64
    height: int = 64
    n_frames: int = 8
    n_gaussians: int = 200
    n_poses: int = 9
    blur_level: str = "medium"
    speed: float | None = None  # overrides blur_level when set
    jitter: float = 0.02
    extent: float = 2.0
    oversample: int = 4
    c_pos: float = 0.25
    c_neg: float = 0.25
    background: tuple = (0.4, 0.4, 0.4)
    sigma_rot: float = 0.005
    sigma_trans: float = 0.05
    point_fraction: float = 0.5
    point_noise: float = 0.02  # fraction of extent
    tests_per_frame: int = 2

    def resolved_speed(self) -> float:
        if self.speed is not None:
            return float(self.speed)
        if self.blur_level not in BLUR_SPEED:
            raise ValueError(f"unknown blur level {self.blur_level!r}; choose from {sorted(BLUR_SPEED)}")
        return BLUR_SPEED[self.blur_level]


def _render_rgb(scene, cam, poses, background, chunk: int = 16) -> np.ndarray:
    out = []
    for i in range(0, len(poses), chunk):
        cams = [cam.with_pose(p) for p in poses[i:i + chunk]]
        with torch.no_grad():
            out.append(render_views(scene, cams, background).color.numpy())
    return np.concatenate(out)


def simulate_timeline(scene, cam, path: OrbitPath, n_poses: int, oversample: int, th: Thresholds,
                      background) -> EventStream:
    """Events over every exposure and every gap.

    Each segment is simulated from its own first sample, so the log-intensity
    reference is re-synchronised at segment boundaries.
    """
    dt = path.tau / ((n_poses - 1) * oversample)
    bounds = []
    for k in range(path.n_frames):
        bounds.append(path.exposure(k))
        if k + 1 < path.n_frames:
            bounds.append((path.exposure(k)[1], path.exposure(k + 1)[0]))
    chunks = []
    for t0, t1 in bounds:
        steps = max(1, int(round((t1 - t0) / dt)))
        times = np.linspace(t0, t1, steps + 1)
        gray = rgb_to_gray(_render_rgb(scene, cam, [path.pose(t) for t in times], background))
        chunks.append(simulate_events(list(gray), times, th))
    return EventStream(np.concatenate([c.t for c in chunks]), np.concatenate([c.x for c in chunks]),
                       np.concatenate([c.y for c in chunks]), np.concatenate([c.p for c in chunks]),
                       cam.width, cam.height, th)


def _test_angles(path: OrbitPath, n: int) -> np.ndarray:
    a0, a1 = path.centers[0], path.centers[-1]
    return a0 + (np.arange(n) + 0.5) * (a1 - a0) / n


def generate_dataset(out_dir, config: GenConfig | None = None, **overrides) -> Path:
    """Write a full dataset to ``out_dir`` and return the manifest path."""
    cfg = config or GenConfig()
    if overrides:
        cfg = GenConfig(**{**asdict(cfg), **overrides})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sub in ("blur", "latents", "test"):
        (out / sub).mkdir(exist_ok=True)
    th = Thresholds(cfg.c_pos, cfg.c_neg)
    bg = tuple(float(b) for b in cfg.background)
    cam = default_camera(cfg.width, cfg.height)
    ss = np.random.SeedSequence(cfg.seed).spawn(4)
    seeds = [int(s.generate_state(1)[0]) for s in ss]

    # round through float32 so renders of the saved scene file reproduce the dataset exactly
    scene = make_scene(seeds[0], cfg.n_gaussians, cfg.extent).map(lambda t: t.float().double())
    path, gt_poses, times, intervals = make_trajectory(
        seeds[1], cfg.n_frames, cfg.n_poses, cfg.jitter, cfg.resolved_speed())
    save_scene(scene, out / "scene_gt.json")

    frames = []
    for k in range(cfg.n_frames):
        lat = _render_rgb(scene, cam, gt_poses[k], bg).astype(np.float32).astype(np.float64)
        blur = lat.mean(0)
        refs = []
        for i, img in enumerate(lat):
            stem = f"latents/frame_{k:03d}_{i:02d}"
            fileio.write_f32(out / f"{stem}.f32", img)
            fileio.write_ppm(out / f"{stem}.ppm", img)
            refs.append(f"{stem}.f32")
        fileio.write_f32(out / f"blur/frame_{k:03d}.f32", blur)
        fileio.write_ppm(out / f"blur/frame_{k:03d}.ppm", blur)
        t0, t1 = intervals[k]
        frames.append({"id": k, "blur": f"blur/frame_{k:03d}.ppm", "blur_exact": f"blur/frame_{k:03d}.f32",
                       "t_start": float(t0), "t_end": float(t1), "t_mid": float((t0 + t1) / 2),
                       "tau": float(t1 - t0), "latents": refs, "latent_timestamps": times[k].tolist()})

    stream = simulate_timeline(scene, cam, path, cfg.n_poses, cfg.oversample, th, bg)
    write_evt1(stream, out / "events.evt1")

    gt_trajs = [CameraTrajectory.from_poses(p, t) for p, t in zip(gt_poses, times)]
    save_poses(gt_trajs, out / "gt_poses.json")
    init = init_trajectories(gt_poses, times, cfg.sigma_rot, cfg.sigma_trans, seeds[2])
    save_poses(init, out / "init_poses.json")

    n_test = cfg.tests_per_frame * cfg.n_frames
    test_poses = [path.orbit_pose(a) for a in _test_angles(path, n_test)]
    test_imgs = _render_rgb(scene, cam, test_poses, bg).astype(np.float32).astype(np.float64)
    tests = []
    for j, (pose, img) in enumerate(zip(test_poses, test_imgs)):
        fileio.write_f32(out / f"test/view_{j:02d}.f32", img)
        fileio.write_ppm(out / f"test/view_{j:02d}.ppm", img)
        tests.append({"id": j, "image": f"test/view_{j:02d}.ppm", "image_exact": f"test/view_{j:02d}.f32",
                      "pose": pose.reshape(-1).tolist()})

    rng = np.random.default_rng(seeds[3])
    means = scene.means.numpy()
    keep = np.sort(rng.choice(len(means), size=max(1, int(round(cfg.point_fraction * len(means)))),
                              replace=False))
    pts = means[keep] + rng.normal(scale=cfg.point_noise * cfg.extent, size=(len(keep), 3))
    cols = scene.colors.numpy()[keep]
    (out / "init_points.json").write_text(json.dumps(
        {"points": pts.tolist(), "colors": cols.tolist()}, indent=1))

    manifest = {
        "schema": SCHEMA,
        "seed": cfg.seed,
        "generator": asdict(cfg),
        "intrinsics": cam.intrinsics_dict(),
        "background": list(bg),
        "thresholds": {"c_pos": th.c_pos, "c_neg": th.c_neg},
        "scene_extent": cfg.extent,
        "scene": "scene_gt.json",
        "events": "events.evt1",
        "frames": frames,
        "gt_poses": "gt_poses.json",
        "init_poses": "init_poses.json",
        "init_points": "init_points.json",
        "test_views": tests,
        "orbit": {"radius": path.radius, "height": path.height, "period": path.period, "tau": path.tau,
                  "span": path.span, "centers": path.centers.tolist(), "jitter": path.jitter.tolist()},
    }
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=1))
    return mpath


@dataclass
class TestView:
    image: np.ndarray
    pose: np.ndarray


@dataclass
class Dataset:
    """In-memory view of a generated dataset."""

    root: Path
    manifest: dict
    camera: Camera
    thresholds: Thresholds
    background: tuple
    events: EventStream
    blur: list = field(default_factory=list)  # (H, W, 3) per frame
    intervals: np.ndarray = None
    gt_poses: np.ndarray = None  # (F, n, 4, 4)
    timestamps: np.ndarray = None  # (F, n)
    init_poses: list = None  # CameraTrajectory per frame
    points: np.ndarray = None
    point_colors: np.ndarray = None
    tests: list = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.blur)

    @property
    def extent(self) -> float:
        return float(self.manifest.get("scene_extent", 2.0))

    def blur_frame(self, k: int) -> BlurFrame:
        t0, t1 = self.intervals[k]
        return BlurFrame(self.blur[k], (t0 + t1) / 2, t1 - t0,
                         self.events.slice(t0, np.nextafter(t1, np.inf)))

    def latents(self, k: int) -> list[np.ndarray]:
        return [fileio.read_f32(self.root / r) for r in self.manifest["frames"][k]["latents"]]

    def gt_scene(self) -> GaussianScene:
        return load_scene(self.root / self.manifest["scene"])

    def gt_trajectories(self) -> list[CameraTrajectory]:
        return [CameraTrajectory.from_poses(p, t) for p, t in zip(self.gt_poses, self.timestamps)]


def load_dataset(manifest_path) -> Dataset:
    mpath = Path(manifest_path)
    if mpath.is_dir():
        mpath = mpath / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no dataset manifest at {mpath}")
    m = json.loads(mpath.read_text())
    if m.get("schema") != SCHEMA:
        raise ValueError(f"{mpath}: unsupported schema {m.get('schema')!r}")
    root = mpath.parent
    intr = m["intrinsics"]
    cam = Camera(intr["fx"], intr["fy"], intr["cx"], intr["cy"], intr["width"], intr["height"],
                 near=intr.get("near", 0.01))
    th = Thresholds(**m["thresholds"])
    gt = load_poses(root / m["gt_poses"])
    pts = json.loads((root / m["init_points"]).read_text())
    return Dataset(
        root=root, manifest=m, camera=cam, thresholds=th, background=tuple(m["background"]),
        events=read_evt1(root / m["events"], th),
        blur=[fileio.read_f32(root / f["blur_exact"]) for f in m["frames"]],
        intervals=np.array([[f["t_start"], f["t_end"]] for f in m["frames"]]),
        gt_poses=np.stack([tr.base_poses for tr in gt]),
        timestamps=np.stack([tr.timestamps for tr in gt]),
        init_poses=load_poses(root / m["init_poses"]),
        points=np.asarray(pts["points"], dtype=np.float64).reshape(-1, 3),
        point_colors=np.asarray(pts["colors"], dtype=np.float64).reshape(-1, 3),
        tests=[TestView(fileio.read_f32(root / t["image_exact"]), np.asarray(t["pose"]).reshape(4, 4))
               for t in m["test_views"]],
    )
