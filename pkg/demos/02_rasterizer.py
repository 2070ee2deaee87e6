# Rasterizer basics: a render, its depth, and a finite-difference check on one gradient.
import numpy as np
import torch

from evsplat.gsplat import render, render_with_grad
from evsplat.synthdata import canonical_pose, default_camera, make_scene

scene = make_scene(0, 200)
cam = default_camera(64, 64).with_pose(canonical_pose())
out = render(scene, cam, (0.4, 0.4, 0.4))
print(out.color.shape, out.depth.shape)
print("coverage (alpha > 0.5):", float((out.alpha > 0.5).double().mean()))
print("depth range over covered pixels:", float(out.depth[out.alpha > 0.5].min()), float(out.depth.max()))

# numba and torch backends should agree to float64 roundoff
ref = render(scene, cam, (0.4, 0.4, 0.4), backend="torch")
print("backend max diff:", float((ref.color - out.color).abs().max()))

up = {"color": torch.ones(64, 64, 3, dtype=torch.float64)}
g = render_with_grad(scene, cam, (0.4, 0.4, 0.4), up)
print({k: tuple(v.shape) for k, v in g.items()})

# central difference on one opacity logit
i, h = 17, 1e-5
s1, s2 = scene.clone(), scene.clone()
s1.opacity_logits[i] += h
s2.opacity_logits[i] -= h
fd = float(render(s1, cam, (0.4, 0.4, 0.4)).color.sum() - render(s2, cam, (0.4, 0.4, 0.4)).color.sum()) / (2 * h)
print("opacity grad analytic %.6f  fd %.6f" % (float(g["opacity_logits"][i]), fd))
