"""Numba kernels for front-to-back compositing of projected 2D Gaussians.

Inputs are per (view, Gaussian) arrays; each view walks its Gaussians in
depth order and splats every pixel of the 3-sigma box.  The kernel returns
the color numerator sum(c * w), depth numerator sum(z * w) and the final
transmittance; the caller adds background and normalizes depth.
"""
from __future__ import annotations

import numpy as np
from numba import njit

ALPHA_CLIP = 0.99


@njit(cache=True)
def _pair_offsets(order, nvis, x0, x1, y0, y1):
    V, N = order.shape
    offs = np.zeros((V, N + 1), dtype=np.int64)
    total = 0
    for v in range(V):
        for r in range(nvis[v]):
            g = order[v, r]
            offs[v, r] = total
            total += (x1[v, g] - x0[v, g] + 1) * (y1[v, g] - y0[v, g] + 1)
        offs[v, nvis[v]] = total
    return offs, total


@njit(cache=True)
def composite_forward(u, v, ca, cb, cc, z, op, col, x0, x1, y0, y1, order, nvis, H, W):
    V, N = u.shape
    offs, total = _pair_offsets(order, nvis, x0, x1, y0, y1)
    cn = np.zeros((V, H, W, 3), dtype=u.dtype)
    dn = np.zeros((V, H, W), dtype=u.dtype)
    tf = np.ones((V, H, W), dtype=u.dtype)
    tstore = np.empty(total, dtype=u.dtype)
    for vi in range(V):
        for r in range(nvis[vi]):
            g = order[vi, r]
            k = offs[vi, r]
            gu, gv = u[vi, g], v[vi, g]
            a, b, c = ca[vi, g], cb[vi, g], cc[vi, g]
            o = op[g]
            zz = z[vi, g]
            c0, c1, c2 = col[g, 0], col[g, 1], col[g, 2]
            for py in range(y0[vi, g], y1[vi, g] + 1):
                dy = py - gv
                for px in range(x0[vi, g], x1[vi, g] + 1):
                    dx = px - gu
                    power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                    alpha = o * np.exp(power)
                    if alpha > ALPHA_CLIP:
                        alpha = ALPHA_CLIP
                    t = tf[vi, py, px]
                    tstore[k] = t
                    k += 1
                    w = alpha * t
                    cn[vi, py, px, 0] += w * c0
                    cn[vi, py, px, 1] += w * c1
                    cn[vi, py, px, 2] += w * c2
                    dn[vi, py, px] += w * zz
                    tf[vi, py, px] = t * (1.0 - alpha)
    return cn, dn, tf, tstore


@njit(cache=True)
def composite_backward(u, v, ca, cb, cc, z, op, col, x0, x1, y0, y1, order, nvis, H, W,
                       tf, tstore, g_cn, g_dn, g_tf):
    V, N = u.shape
    offs, total = _pair_offsets(order, nvis, x0, x1, y0, y1)
    gu_out = np.zeros((V, N), dtype=u.dtype)
    gv_out = np.zeros((V, N), dtype=u.dtype)
    ga_out = np.zeros((V, N), dtype=u.dtype)
    gb_out = np.zeros((V, N), dtype=u.dtype)
    gc_out = np.zeros((V, N), dtype=u.dtype)
    gz_out = np.zeros((V, N), dtype=u.dtype)
    go_out = np.zeros(N, dtype=u.dtype)
    gcol_out = np.zeros((N, 3), dtype=u.dtype)
    # contributions of Gaussians behind the current one, per pixel
    sc = np.zeros((H, W, 3), dtype=u.dtype)
    sd = np.zeros((H, W), dtype=u.dtype)
    for vi in range(V):
        sc[:] = 0.0
        sd[:] = 0.0
        for r in range(nvis[vi] - 1, -1, -1):
            g = order[vi, r]
            gu, gv = u[vi, g], v[vi, g]
            a, b, c = ca[vi, g], cb[vi, g], cc[vi, g]
            o = op[g]
            zz = z[vi, g]
            c0, c1, c2 = col[g, 0], col[g, 1], col[g, 2]
            acc_u = acc_v = acc_a = acc_b = acc_c = acc_z = acc_o = 0.0
            acc_c0 = acc_c1 = acc_c2 = 0.0
            k0 = offs[vi, r]
            bw = x1[vi, g] - x0[vi, g] + 1
            for py in range(y0[vi, g], y1[vi, g] + 1):
                dy = py - gv
                for px in range(x0[vi, g], x1[vi, g] + 1):
                    k = k0 + (py - y0[vi, g]) * bw + (px - x0[vi, g])
                    dx = px - gu
                    power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                    gauss = np.exp(power)
                    raw = o * gauss
                    clipped = raw > ALPHA_CLIP
                    alpha = ALPHA_CLIP if clipped else raw
                    t = tstore[k]
                    w = alpha * t
                    inv = 1.0 / (1.0 - alpha)
                    gc0 = g_cn[vi, py, px, 0]
                    gc1 = g_cn[vi, py, px, 1]
                    gc2 = g_cn[vi, py, px, 2]
                    gd = g_dn[vi, py, px]
                    d_alpha = (
                        gc0 * (c0 * t - sc[py, px, 0] * inv)
                        + gc1 * (c1 * t - sc[py, px, 1] * inv)
                        + gc2 * (c2 * t - sc[py, px, 2] * inv)
                        + gd * (zz * t - sd[py, px] * inv)
                        - g_tf[vi, py, px] * tf[vi, py, px] * inv
                    )
                    sc[py, px, 0] += c0 * w
                    sc[py, px, 1] += c1 * w
                    sc[py, px, 2] += c2 * w
                    sd[py, px] += zz * w
                    acc_c0 += gc0 * w
                    acc_c1 += gc1 * w
                    acc_c2 += gc2 * w
                    acc_z += gd * w
                    if not clipped:
                        acc_o += d_alpha * gauss
                        d_pow = d_alpha * alpha
                        acc_u += d_pow * (a * dx + b * dy)
                        acc_v += d_pow * (b * dx + c * dy)
                        acc_a += d_pow * (-0.5 * dx * dx)
                        acc_b += d_pow * (-dx * dy)
                        acc_c += d_pow * (-0.5 * dy * dy)
            gu_out[vi, g] += acc_u
            gv_out[vi, g] += acc_v
            ga_out[vi, g] += acc_a
            gb_out[vi, g] += acc_b
            gc_out[vi, g] += acc_c
            gz_out[vi, g] += acc_z
            go_out[g] += acc_o
            gcol_out[g, 0] += acc_c0
            gcol_out[g, 1] += acc_c1
            gcol_out[g, 2] += acc_c2
    return gu_out, gv_out, ga_out, gb_out, gc_out, gz_out, go_out, gcol_out
