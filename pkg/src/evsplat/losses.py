"""Training losses over rendered images, event maps and depth."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    lambda1: float = 0.2  # D-SSIM share of the blur loss
    lambda2: float = 0.2  # D-SSIM share of the intensity loss
    w_blur: float = 1.0
    w_event: float = 5e-3
    w_int: float = 1e-3
    w_depth: float = 1e-2
    beta: float = 2.0

    def __post_init__(self):
        if not (0 <= self.lambda1 <= 1 and 0 <= self.lambda2 <= 1):
            raise ValueError("D-SSIM mixing weights must lie in [0, 1]")
        if min(self.w_blur, self.w_event, self.w_int, self.w_depth) < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.beta > 0:
            raise ValueError("beta must be positive")


def _as_tensor(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def _nchw(img: torch.Tensor) -> torch.Tensor:
    if img.dim() == 2:
        return img[None, None]
    if img.dim() == 3:
        return img.permute(2, 0, 1)[None]
    raise ValueError(f"expected (H, W) or (H, W, C) image, got shape {tuple(img.shape)}")


def _check_same(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _gaussian_1d(size: int, sigma: float, dtype) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(t: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Separable Gaussian filter of every channel with zero padding."""
    C, r = t.shape[1], len(g) // 2
    t = F.conv2d(t, g.view(1, 1, 1, -1).expand(C, 1, 1, len(g)), padding=(0, r), groups=C)
    return F.conv2d(t, g.view(1, 1, -1, 1).expand(C, 1, len(g), 1), padding=(r, 0), groups=C)


def ssim_map(a, b, window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Per-pixel, per-channel SSIM with a Gaussian window and zero padding."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b)
    x, y = _nchw(a), _nchw(b)
    C = x.shape[1]
    g = _gaussian_1d(window, sigma, x.dtype)
    stats = _blur(torch.cat([x, y, x * x, y * y, x * y], dim=1), g)
    mu_x, mu_y, exx, eyy, exy = stats.split(C, dim=1)
    sxx = exx - mu_x * mu_x
    syy = eyy - mu_y * mu_y
    sxy = exy - mu_x * mu_y
    c1, c2 = 0.01**2, 0.03**2
    return ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2))


def ssim(a, b) -> torch.Tensor:
    return ssim_map(a, b).mean()


def dssim(a, b) -> torch.Tensor:
    return (1 - ssim(a, b)) / 2


def l1(a, b) -> torch.Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b)
    return (a - b).abs().mean()


def blur_loss(B, B_sim, lambda1: float = 0.2) -> torch.Tensor:
    return (1 - lambda1) * l1(B, B_sim) + lambda1 * dssim(B, B_sim)


def intensity_loss(G, G_sim, lambda2: float = 0.2) -> torch.Tensor:
    G, G_sim = _as_tensor(G), _as_tensor(G_sim)
    if G.dim() != 2:
        raise ValueError("intensity loss expects single-channel (H, W) images")
    return (1 - lambda2) * l1(G, G_sim) + lambda2 * dssim(G, G_sim)


def event_loss(gt_maps: Sequence, sim_maps: Sequence) -> torch.Tensor:
    """Mean over maps of the per-pixel mean absolute difference.

    Both lists hold maps in event-count units: signed counts on the measured
    side, log change over the threshold on the simulated side.
    """
    if len(gt_maps) != len(sim_maps) or len(gt_maps) == 0:
        raise ValueError(f"event map lists must be non-empty and equal length "
                         f"({len(gt_maps)} vs {len(sim_maps)})")
    return sum(l1(g, s) for g, s in zip(gt_maps, sim_maps)) / len(gt_maps)


_SMOOTH = (1.0, 4.0, 6.0, 4.0, 1.0)
_DERIV = (-1.0, -2.0, 0.0, 2.0, 1.0)
SOBEL_NORM = 128.0  # unit ramp -> unit response


def sobel_kernels(dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """5x5 horizontal and vertical derivative kernels (cross-correlation form)."""
    s = torch.tensor(_SMOOTH, dtype=dtype)
    d = torch.tensor(_DERIV, dtype=dtype)
    kx = torch.outer(s, d) / SOBEL_NORM
    return kx, kx.T.contiguous()


def image_gradients(img) -> tuple[torch.Tensor, torch.Tensor]:
    """Horizontal and vertical 5x5 Sobel responses with replicate padding."""
    img = _as_tensor(img)
    x = F.pad(img[None, None], (2, 2, 2, 2), mode="replicate")
    kx, ky = sobel_kernels(img.dtype)
    gx = F.conv2d(x, kx[None, None])[0, 0]
    gy = F.conv2d(x, ky[None, None])[0, 0]
    return gx, gy


def depth_reg_loss(depth, G, beta: float = 2.0) -> torch.Tensor:
    """Depth gradients down-weighted where the intensity image has edges."""
    depth, G = _as_tensor(depth), _as_tensor(G).detach()
    _check_same(depth, G)
    dx, dy = image_gradients(depth)
    with torch.no_grad():
        gx, gy = image_gradients(G.to(depth.dtype))
    return (dx.abs() * torch.exp(-beta * gx.abs()) + dy.abs() * torch.exp(-beta * gy.abs())).mean()


def total_loss(components: dict, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the "blur", "event", "int" and "depth" components present."""
    w = {"blur": weights.w_blur, "event": weights.w_event, "int": weights.w_int, "depth": weights.w_depth}
    total = 0.0
    for name, value in components.items():
        if name not in w:
            raise KeyError(f"unknown loss component {name!r}")
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite {name} loss ({v})")
        total = total + w[name] * value
    return total if torch.is_tensor(total) else torch.tensor(float(total), dtype=torch.float64)
