"""Exposure-time camera trajectories with learnable se(3) offsets."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .gsplat import Camera, GaussianScene, render_views
from .lie import camera_center, quat_to_rotmat_np, rotmat_to_quat_np, se3_exp, se3_exp_np, slerp_np


@dataclass
class CameraTrajectory:
    base_poses: np.ndarray  # (n, 4, 4) world-to-camera
    offsets: torch.Tensor  # (n, 6) rotation then translation
    timestamps: np.ndarray  # (n,)

    def __post_init__(self):
        self.base_poses = np.asarray(self.base_poses, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.offsets is None:
            self.offsets = torch.zeros(len(self.base_poses), 6, dtype=torch.float64)
        if len(self.timestamps) != len(self.base_poses) or self.offsets.shape != (len(self.base_poses), 6):
            raise ValueError("trajectory fields disagree in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("trajectory timestamps must increase strictly")

    def __len__(self) -> int:
        return len(self.base_poses)

    @classmethod
    def from_poses(cls, poses, timestamps, dtype=torch.float64) -> "CameraTrajectory":
        poses = np.asarray(poses, dtype=np.float64)
        return cls(poses, torch.zeros(len(poses), 6, dtype=dtype), timestamps)

    @property
    def t_start(self) -> float:
        return float(self.timestamps[0])

    @property
    def t_end(self) -> float:
        return float(self.timestamps[-1])

    def effective_poses(self) -> np.ndarray:
        return np.stack([effective_pose(self, i) for i in range(len(self))])

    def viewmats(self, dtype=torch.float64) -> torch.Tensor:
        """Differentiable (n, 4, 4) effective poses."""
        return se3_exp(self.offsets.to(dtype)) @ torch.as_tensor(self.base_poses, dtype=dtype)

    def copy(self) -> "CameraTrajectory":
        return CameraTrajectory(self.base_poses.copy(), self.offsets.detach().clone(), self.timestamps.copy())


def effective_pose(traj: CameraTrajectory, i: int) -> np.ndarray:
    """exp(offset_i) composed on the left of base pose i."""
    if not 0 <= i < len(traj):
        raise IndexError(f"pose index {i} out of range for {len(traj)} poses")
    d = traj.offsets[i].detach().cpu().numpy().astype(np.float64)
    if not np.any(d):
        return traj.base_poses[i].copy()
    return se3_exp_np(d) @ traj.base_poses[i]


def synthesize_blur(scene: GaussianScene, traj: CameraTrajectory, cam: Camera, background,
                    return_views: bool = False):
    """Mean of the renders along the trajectory; differentiable in scene and offsets."""
    cams = [cam.with_pose(p) for p in traj.base_poses]
    out = render_views(scene, cams, background, viewmats=traj.viewmats(scene.dtype))
    blur = out.color.mean(0)
    return (blur, out) if return_views else blur


def interpolate_pose(traj_a: CameraTrajectory, traj_b: CameraTrajectory, t: float) -> np.ndarray:
    """Pose between two exposures: rotation slerp, camera center linear in time."""
    ta, tb = traj_a.t_end, traj_b.t_start
    if not ta <= t <= tb:
        raise ValueError(f"t={t} outside the inter-frame gap [{ta}, {tb}]")
    pa, pb = effective_pose(traj_a, len(traj_a) - 1), effective_pose(traj_b, 0)
    u = (t - ta) / (tb - ta) if tb > ta else 0.0
    if u == 0.0:
        return pa
    if u == 1.0:
        return pb
    if np.array_equal(pa, pb):
        return pa.copy()
    R = quat_to_rotmat_np(slerp_np(rotmat_to_quat_np(pa[:3, :3]), rotmat_to_quat_np(pb[:3, :3]), u))
    c = (1 - u) * camera_center(pa) + u * camera_center(pb)
    out = np.eye(4)
    out[:3, :3] = R
    out[:3, 3] = -R @ c
    return out


def perturb_pose(pose: np.ndarray, rot_noise: np.ndarray, center_noise: np.ndarray) -> np.ndarray:
    """Rotate the camera by exp(rot_noise) and shift its center by center_noise."""
    R = se3_exp_np(np.concatenate([rot_noise, np.zeros(3)]))[:3, :3] @ pose[:3, :3]
    c = camera_center(pose) + center_noise
    out = np.eye(4)
    out[:3, :3] = R
    out[:3, 3] = -R @ c
    return out


def init_trajectories(gt_poses, timestamps, sigma_rot: float = 0.0, sigma_trans: float = 0.0,
                      seed: int = 0, dtype=torch.float64) -> list[CameraTrajectory]:
    """Initial trajectories: ground-truth exposure poses plus seeded noise.

    ``sigma_rot`` (radians) and ``sigma_trans`` (scene units) are RMS norms of
    the per-pose rotation and camera-center perturbations.
    """
    rng = np.random.default_rng(seed)
    trajs = []
    for poses, ts in zip(gt_poses, timestamps):
        poses = np.asarray(poses, dtype=np.float64)
        if sigma_rot == 0 and sigma_trans == 0:
            noisy = poses.copy()
        else:
            rn = rng.normal(scale=sigma_rot / np.sqrt(3), size=(len(poses), 3))
            tn = rng.normal(scale=sigma_trans / np.sqrt(3), size=(len(poses), 3))
            noisy = np.stack([perturb_pose(p, r, c) for p, r, c in zip(poses, rn, tn)])
        trajs.append(CameraTrajectory.from_poses(noisy, ts, dtype))
    return trajs


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Similarity (s, R, t) minimizing ||dst - (s R src + t)||^2 over point sets (N, 3)."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    var_s = (xs**2).sum() / len(src)
    s = float(np.trace(np.diag(D) @ S) / var_s) if with_scale and var_s > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def ate(estimated: Sequence[np.ndarray], reference: Sequence[np.ndarray]) -> float:
    """RMS camera-center error after similarity alignment of estimated onto reference."""
    if len(estimated) != len(reference):
        raise ValueError(f"trajectory lengths differ: {len(estimated)} vs {len(reference)}")
    if len(estimated) < 3:
        raise ValueError("ATE needs at least three poses")
    est = np.stack([camera_center(p) for p in estimated])
    ref = np.stack([camera_center(p) for p in reference])
    s, R, t = umeyama(est, ref)
    resid = ref - (s * est @ R.T + t)
    return float(np.sqrt((resid**2).sum(1).mean()))


def trajectories_ate(trajs: Sequence[CameraTrajectory], gt_poses) -> float:
    est = [p for tr in trajs for p in tr.effective_poses()]
    ref = [p for poses in gt_poses for p in poses]
    return ate(est, ref)


# --- pose files ---------------------------------------------------------------

def save_poses(trajs: Sequence[CameraTrajectory], path, include_offsets: bool = False) -> None:
    """JSON array of {frame_id, timestamps, poses}; each pose 16 floats, row-major."""
    out = []
    for k, tr in enumerate(trajs):
        entry = {"frame_id": k, "timestamps": tr.timestamps.tolist(),
                 "poses": [p.reshape(-1).tolist() for p in
                           (tr.base_poses if include_offsets else tr.effective_poses())]}
        if include_offsets:
            entry["offsets"] = tr.offsets.detach().double().numpy().tolist()
        out.append(entry)
    Path(path).write_text(json.dumps(out, indent=1))


def load_poses(path, dtype=torch.float64) -> list[CameraTrajectory]:
    entries = json.loads(Path(path).read_text())
    trajs = []
    for e in sorted(entries, key=lambda e: e["frame_id"]):
        poses = np.asarray(e["poses"], dtype=np.float64).reshape(-1, 4, 4)
        tr = CameraTrajectory.from_poses(poses, e["timestamps"], dtype)
        if "offsets" in e:
            tr.offsets = torch.as_tensor(np.asarray(e["offsets"]), dtype=dtype)
        trajs.append(tr)
    return trajs
