"""Differentiable CPU rasterizer for 3D Gaussian splats.

Projection follows the usual EWA linearization; compositing is front to
back over a global per-view depth order.  Projection is plain torch, so
autograd reaches the scene parameters and the camera pose tangent; the
per-pixel compositing runs in numba kernels with a matching hand-written
backward, and a pure-torch compositor is kept as a reference.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import _raster_kernels as _kernels
from .lie import quat_to_rotmat, se3_exp

COV2D_DILATION = 0.3
ALPHA_CLIP = 0.99
BOX_SIGMAS = 3.0


@dataclass
class GaussianScene:
    """Set of 3D Gaussians.  All fields share dtype and leading size N."""

    means: torch.Tensor  # (N, 3)
    log_scales: torch.Tensor  # (N, 3)
    quats: torch.Tensor  # (N, 4) w, x, y, z
    opacity_logits: torch.Tensor  # (N,)
    colors: torch.Tensor  # (N, 3)

    def __len__(self) -> int:
        return int(self.means.shape[0])

    @property
    def dtype(self) -> torch.dtype:
        return self.means.dtype

    def tensors(self) -> dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def map(self, fn) -> "GaussianScene":
        return GaussianScene(**{k: fn(v) for k, v in self.tensors().items()})

    def clone(self) -> "GaussianScene":
        return self.map(lambda t: t.detach().clone())

    def to(self, dtype: torch.dtype) -> "GaussianScene":
        return self.map(lambda t: t.detach().to(dtype))

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    @classmethod
    def empty(cls, dtype=torch.float64) -> "GaussianScene":
        z = lambda *s: torch.zeros(*s, dtype=dtype)
        return cls(z(0, 3), z(0, 3), z(0, 4), z(0), z(0, 3))

    @classmethod
    def from_numpy(cls, dtype=torch.float64, **arrays) -> "GaussianScene":
        return cls(**{k: torch.as_tensor(np.asarray(v), dtype=dtype) for k, v in arrays.items()})

    def equals(self, other: "GaussianScene") -> bool:
        return len(self) == len(other) and all(
            torch.equal(a, b) for a, b in zip(self.tensors().values(), other.tensors().values())
        )


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))  # world-to-camera
    near: float = 0.01

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.near <= 0:
            raise ValueError("near plane must be positive")
        self.pose = np.asarray(self.pose, dtype=np.float64)

    def with_pose(self, pose) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose, self.near)

    def scaled(self, s: float) -> "Camera":
        """Intrinsics for rendering at round(s * size); pixel centers sit on integers."""
        w, h = max(1, round(s * self.width)), max(1, round(s * self.height))
        sx, sy = w / self.width, h / self.height
        return Camera(
            self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5,
            w, h, self.pose, self.near,
        )

    def intrinsics_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "near": self.near}


@dataclass
class RenderOutput:
    color: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W)
    alpha: torch.Tensor  # (H, W)


def _check_finite(scene: GaussianScene) -> None:
    if len(scene) == 0:
        return
    for name, t in scene.tensors().items():
        bad = ~torch.isfinite(t.reshape(len(scene), -1)).all(dim=1)
        if bool(bad.any()):
            idx = int(torch.nonzero(bad)[0])
            raise FloatingPointError(f"non-finite {name} for Gaussian {idx}")


def covariance3d(scene: GaussianScene) -> torch.Tensor:
    R = quat_to_rotmat(scene.quats)
    M = R * torch.exp(scene.log_scales)[:, None, :]
    return M @ M.transpose(-1, -2)


def _projection(scene: GaussianScene, viewmats: torch.Tensor, cams: Sequence[Camera]):
    """Per-view camera-space means, 2D means and 2D covariances: (V, N, ...)."""
    dtype = scene.dtype
    fx = torch.tensor([c.fx for c in cams], dtype=dtype)[:, None]
    fy = torch.tensor([c.fy for c in cams], dtype=dtype)[:, None]
    cx = torch.tensor([c.cx for c in cams], dtype=dtype)[:, None]
    cy = torch.tensor([c.cy for c in cams], dtype=dtype)[:, None]
    near = torch.tensor([c.near for c in cams], dtype=dtype)[:, None]
    Rw = viewmats[:, :3, :3]
    p = torch.einsum("vij,nj->vni", Rw, scene.means) + viewmats[:, None, :3, 3]
    x, y, z = p.unbind(-1)
    visible = z >= near
    zs = torch.where(visible, z, torch.ones_like(z))
    u = fx * x / zs + cx
    v = fy * y / zs + cy
    zero = torch.zeros_like(zs)
    J = torch.stack(
        [
            torch.stack([fx / zs, zero, -fx * x / zs**2], -1),
            torch.stack([zero, fy / zs, -fy * y / zs**2], -1),
        ],
        -2,
    )  # (V, N, 2, 3)
    T = J @ Rw[:, None]
    cov = T @ covariance3d(scene)[None] @ T.transpose(-1, -2)
    cov = cov + COV2D_DILATION * torch.eye(2, dtype=dtype)
    return z, u, v, cov, visible


def project(scene: GaussianScene, cam: Camera, index: int = 0):
    """Project Gaussian ``index``.  Returns (mean2d, cov2d, depth) or None when culled."""
    viewmat = torch.as_tensor(cam.pose, dtype=scene.dtype)[None]
    z, u, v, cov, visible = _projection(scene, viewmat, [cam])
    if not bool(visible[0, index]):
        return None
    mean2d = torch.stack([u[0, index], v[0, index]])
    return mean2d, cov[0, index], z[0, index]


def _viewmats(cams: Sequence[Camera], dtype, pose_deltas: torch.Tensor | None) -> torch.Tensor:
    base = torch.as_tensor(np.stack([c.pose for c in cams]), dtype=dtype)
    if pose_deltas is None:
        return base
    return se3_exp(pose_deltas.to(dtype)) @ base


class _Composite(torch.autograd.Function):
    """Autograd wrapper around the numba compositing kernels."""

    @staticmethod
    def forward(ctx, u, v, ca, cb, cc, z, op, col, boxes, order, nvis, H, W):
        np_in = [t.detach().numpy() for t in (u, v, ca, cb, cc, z, op, col)]
        cn, dn, tf, tstore = _kernels.composite_forward(*np_in, *boxes, order, nvis, H, W)
        ctx.saved = (np_in, boxes, order, nvis, H, W, tf, tstore)
        return torch.from_numpy(cn), torch.from_numpy(dn), torch.from_numpy(tf)

    @staticmethod
    def backward(ctx, g_cn, g_dn, g_tf):
        np_in, boxes, order, nvis, H, W, tf, tstore = ctx.saved
        dtype = np_in[0].dtype
        grads = _kernels.composite_backward(
            *np_in, *boxes, order, nvis, H, W, tf, tstore,
            np.ascontiguousarray(g_cn.numpy(), dtype=dtype),
            np.ascontiguousarray(g_dn.numpy(), dtype=dtype),
            np.ascontiguousarray(g_tf.numpy(), dtype=dtype),
        )
        return tuple(torch.from_numpy(g) for g in grads) + (None,) * 5


def _composite_torch(u, v, ca, cb, cc, z, op, col, boxes, order, nvis, H, W):
    """Reference compositing over a flat (pixel, depth slot) layout in plain torch."""
    dtype = u.dtype
    V, N = u.shape
    P = V * H * W
    x0, x1, y0, y1 = (torch.from_numpy(b) for b in boxes)
    with torch.no_grad():
        rank = torch.full((V, N), -1, dtype=torch.long)
        for vi in range(V):
            rank[vi, torch.from_numpy(order[vi, : nvis[vi]])] = torch.arange(int(nvis[vi]))
        vi_, gi = torch.nonzero(rank >= 0, as_tuple=True)
        bw = x1[vi_, gi] - x0[vi_, gi] + 1
        counts = bw * (y1[vi_, gi] - y0[vi_, gi] + 1)
        rep = torch.repeat_interleave(torch.arange(len(vi_)), counts)
        local = torch.arange(int(counts.sum())) - (torch.cumsum(counts, 0) - counts)[rep]
        px = x0[vi_, gi][rep] + local % bw[rep]
        py = y0[vi_, gi][rep] + local // bw[rep]
        pv, pg = vi_[rep], gi[rep]
        pix = pv * (H * W) + py * W + px
        srt = torch.argsort(pix * N + rank[pv, pg])
        pix, pv, pg, px, py = pix[srt], pv[srt], pg[srt], px[srt], py[srt]
        per_pix = torch.bincount(pix, minlength=P)
        pos = torch.arange(len(pix)) - (torch.cumsum(per_pix, 0) - per_pix)[pix]
        K = max(int(per_pix.max()), 1) if len(pix) else 1
    flat = pv * N + pg
    take = lambda t: t.reshape(-1).index_select(0, flat)
    dx = px.to(dtype) - take(u)
    dy = py.to(dtype) - take(v)
    power = -0.5 * (take(ca) * dx * dx + 2 * take(cb) * dx * dy + take(cc) * dy * dy)
    alpha = torch.clamp(op.index_select(0, pg) * torch.exp(power), max=ALPHA_CLIP)
    slot = pix * K + pos
    dense = torch.zeros(P * K, dtype=dtype).index_put((slot,), alpha).reshape(P, K)
    trans = torch.cumprod(1 - dense, dim=1)
    t_excl = torch.cat([torch.ones(P, 1, dtype=dtype), trans[:, :-1]], dim=1)
    w = alpha * t_excl.reshape(-1).index_select(0, slot)
    cn = torch.zeros(P, 3, dtype=dtype).index_add(0, pix, w[:, None] * col.index_select(0, pg))
    dn = torch.zeros(P, dtype=dtype).index_add(0, pix, w * take(z))
    return cn.reshape(V, H, W, 3), dn.reshape(V, H, W), trans[:, -1].reshape(V, H, W)


def render_views(
    scene: GaussianScene,
    cams: Sequence[Camera],
    background,
    pose_deltas: torch.Tensor | None = None,
    viewmats: torch.Tensor | None = None,
    backend: str = "numba",
) -> RenderOutput:
    """Render V views of equal size in one pass.

    Outputs are stacked: color (V, H, W, 3), depth and alpha (V, H, W).
    ``pose_deltas`` (V, 6) left-multiplies each camera pose through the
    exponential map; ``viewmats`` (V, 4, 4) overrides the camera poses.
    ``backend`` selects the compositing path: "numba" (fast, hand-written
    backward) or "torch" (reference, autograd backward).
    """
    _check_finite(scene)
    V = len(cams)
    H, W = cams[0].height, cams[0].width
    if any(c.height != H or c.width != W for c in cams):
        raise ValueError("all views in a batch must share an image size")
    dtype = scene.dtype
    bg = torch.as_tensor(np.asarray(background, dtype=np.float64), dtype=dtype).reshape(3)
    if viewmats is None:
        viewmats = _viewmats(cams, dtype, pose_deltas)

    N = len(scene)
    if N == 0:
        color = bg.expand(V, H, W, 3).clone()
        zeros = torch.zeros(V, H, W, dtype=dtype)
        return RenderOutput(color, zeros, zeros.clone())

    z, u, v, cov, visible = _projection(scene, viewmats, cams)
    a, b, c = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
    det = a * c - b * b
    conic_a, conic_b, conic_c = c / det, -b / det, a / det

    with torch.no_grad():
        rx = BOX_SIGMAS * torch.sqrt(a)
        ry = BOX_SIGMAS * torch.sqrt(c)
        x0 = torch.ceil(u - rx).clamp(min=0)
        x1 = torch.floor(u + rx).clamp(max=W - 1)
        y0 = torch.ceil(v - ry).clamp(min=0)
        y1 = torch.floor(v + ry).clamp(max=H - 1)
        ok = visible & (x1 >= x0) & (y1 >= y0) & (det > 0)
        # depth order per view; stable sort gives index tie-break
        key = torch.where(ok, z, torch.full_like(z, float("inf")))
        order = torch.argsort(key, dim=1, stable=True).numpy().astype(np.int64)
        nvis = ok.sum(1).numpy().astype(np.int64)
        boxes = tuple(np.where(ok, t, 0).astype(np.int64) for t in (x0.numpy(), x1.numpy(), y0.numpy(), y1.numpy()))

    args = (u, v, conic_a, conic_b, conic_c, z, scene.opacities, scene.colors, boxes, order, nvis, H, W)
    if backend == "numba":
        cn, dn, tf = _Composite.apply(*args)
    elif backend == "torch":
        cn, dn, tf = _composite_torch(*args)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    color = cn + tf[..., None] * bg
    acc = 1 - tf
    depth = dn / torch.clamp(acc, min=1e-6)
    return RenderOutput(color, depth, acc)


def render(scene: GaussianScene, cam: Camera, background=(0.0, 0.0, 0.0),
           pose_delta: torch.Tensor | None = None, backend: str = "numba") -> RenderOutput:
    """Render one view; see ``render_views``."""
    out = render_views(scene, [cam], background, None if pose_delta is None else pose_delta[None],
                       backend=backend)
    return RenderOutput(out.color[0], out.depth[0], out.alpha[0])


def render_with_grad(scene: GaussianScene, cam: Camera, background, upstream: dict,
                     backend: str = "numba") -> dict:
    """Gradients of <upstream, render outputs> w.r.t. every scene field and the pose tangent.

    ``upstream`` maps any of "color", "depth", "alpha" to a tensor shaped like
    that output.  The returned dict holds one gradient per scene field plus
    "pose" (6-vector at the identity offset).
    """
    leaves = {k: t.detach().clone().requires_grad_(True) for k, t in scene.tensors().items()}
    delta = torch.zeros(6, dtype=scene.dtype, requires_grad=True)
    out = render(GaussianScene(**leaves), cam, background, delta, backend=backend)
    total = sum((out_t * torch.as_tensor(upstream[k], dtype=scene.dtype)).sum()
                for k, out_t in (("color", out.color), ("depth", out.depth), ("alpha", out.alpha))
                if k in upstream)
    inputs = list(leaves.values()) + [delta]
    if not torch.is_tensor(total) or not total.requires_grad:
        return {k: torch.zeros_like(t) for k, t in zip(list(leaves) + ["pose"], inputs)}
    grads = torch.autograd.grad(total, inputs, allow_unused=True)
    return {k: (torch.zeros_like(t) if g is None else g)
            for k, t, g in zip(list(leaves) + ["pose"], inputs, grads)}


# --- GSC1 scene files -------------------------------------------------------

_RECORD = struct.Struct("<3f3f4ff3f")


def save_scene(scene: GaussianScene, path) -> Path:
    """Write a GSC1 scene: ``path`` JSON manifest plus a sibling ``.bin`` blob."""
    path = Path(path)
    arr = np.concatenate(
        [t.detach().cpu().numpy().reshape(len(scene), -1) for t in scene.tensors().values()], axis=1
    ).astype("<f4")
    blob = path.with_suffix(".bin")
    blob.write_bytes(arr.tobytes())
    means = arr[:, :3]
    bounds = [means.min(0).tolist(), means.max(0).tolist()] if len(arr) else [[0, 0, 0], [0, 0, 0]]
    manifest = {"format": "GSC1", "count": len(scene), "bounds": bounds,
                "record": "mean3 log_scale3 quat4 opacity_logit color3 (f32 LE)", "blob": blob.name}
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_scene(path, dtype=torch.float64) -> GaussianScene:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "GSC1":
        raise ValueError(f"{path}: not a GSC1 scene manifest")
    raw = (path.parent / manifest["blob"]).read_bytes()
    n = manifest["count"]
    if len(raw) != n * _RECORD.size:
        raise ValueError(f"{path}: blob holds {len(raw)} bytes, expected {n * _RECORD.size}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(n, 14).astype(np.float64)
    return GaussianScene.from_numpy(
        dtype, means=arr[:, 0:3], log_scales=arr[:, 3:6], quats=arr[:, 6:10],
        opacity_logits=arr[:, 10], colors=arr[:, 11:14],
    )
