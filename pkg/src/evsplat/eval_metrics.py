"""Full-reference image metrics and the evaluation report."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses
from .gsplat import GaussianScene, render
from .trajectory import CameraTrajectory, trajectories_ate

PSNR_CAP = 99.0
REPORT_SCHEMA = "evarep/1"


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1], capped at 99 dB."""
    a = np.asarray(a.detach() if torch.is_tensor(a) else a, dtype=np.float64)
    b = np.asarray(b.detach() if torch.is_tensor(b) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(1.0 / mse)))


def ssim(a, b) -> float:
    return float(losses.ssim(a, b))


@dataclass
class EvalReport:
    views: list  # [{"id", "psnr", "ssim"}]
    mean_psnr: float
    mean_ssim: float
    ate_initial: float | None = None
    ate_final: float | None = None
    loss_summary: dict | None = None
    # reserved for learned / no-reference metrics, never filled here
    lpips: float | None = None
    nr_iqa: dict | None = None
    schema: str = REPORT_SCHEMA
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        validate_report(d)
        return cls(**d)


def validate_report(d: dict) -> None:
    """Raise ValueError if a decoded report does not follow the evarep/1 layout."""
    if d.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"unexpected report schema {d.get('schema')!r}")
    for key in ("views", "mean_psnr", "mean_ssim"):
        if key not in d:
            raise ValueError(f"report is missing {key!r}")
    for v in d["views"]:
        if not {"id", "psnr", "ssim"} <= set(v):
            raise ValueError(f"malformed view entry {v}")
    if d["views"]:
        if d["mean_psnr"] != float(np.mean([v["psnr"] for v in d["views"]])):
            raise ValueError("mean_psnr does not match the per-view entries")
        if d["mean_ssim"] != float(np.mean([v["ssim"] for v in d["views"]])):
            raise ValueError("mean_ssim does not match the per-view entries")


def _summarize(log: Sequence[dict] | None) -> dict | None:
    if not log:
        return None
    keys = [k for k in ("blur", "event", "int", "depth", "total") if any(k in r for r in log)]
    out = {"iterations": int(log[-1]["iter"]) + 1}
    for k in keys:
        vals = [r[k] for r in log if k in r]
        out[k] = {"first": vals[0], "last": vals[-1], "min": min(vals)}
    return out


def evaluate(scene: GaussianScene, trajectories: Sequence[CameraTrajectory] | None, dataset,
             initial: Sequence[CameraTrajectory] | None = None, log: Sequence[dict] | None = None,
             backend: str = "numba") -> EvalReport:
    """Render every test view of ``dataset`` and score it; ATE against the GT exposure poses."""
    cam = dataset.camera
    views = []
    for j, tv in enumerate(dataset.tests):
        if tv.image.shape != (cam.height, cam.width, 3):
            raise ValueError(f"test view {j} is {tv.image.shape[1]}x{tv.image.shape[0]}, "
                             f"camera is {cam.width}x{cam.height}")
        with torch.no_grad():
            img = render(scene, cam.with_pose(tv.pose), dataset.background, backend=backend).color.numpy()
        views.append({"id": j, "psnr": psnr(img, tv.image), "ssim": ssim(img, tv.image)})
    ate_final = ate_init = None
    if trajectories is not None:
        ate_final = trajectories_ate(trajectories, dataset.gt_poses)
    if initial is not None:
        ate_init = trajectories_ate(initial, dataset.gt_poses)
    return EvalReport(
        views=views,
        mean_psnr=float(np.mean([v["psnr"] for v in views])) if views else float("nan"),
        mean_ssim=float(np.mean([v["ssim"] for v in views])) if views else float("nan"),
        ate_initial=ate_init, ate_final=ate_final, loss_summary=_summarize(log),
    )
