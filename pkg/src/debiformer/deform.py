"""Deformable sampling machinery.

Coordinates are normalized to [-1, 1] per axis and stored as (y, x) pairs.
A normalized coordinate u on an axis of length L maps to the continuous
pixel position (u + 1)/2 * L - 0.5, so pixel centers sit at integers and
the map edges fall half a pixel outside the first/last center.  Sampling
uses the hat kernel g(a, b) = max(0, 1 - |a - b|) per axis with zero
padding outside the map; it is differentiable in both the sampled map and
the sampling points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def reference_grid(H: int, W: int) -> np.ndarray:
    """Normalized (y, x) centers of an H x W cell grid, shape [H, W, 2]."""
    ys = (np.arange(H, dtype=np.float64) + 0.5) / H * 2.0 - 1.0
    xs = (np.arange(W, dtype=np.float64) + 0.5) / W * 2.0 - 1.0
    grid = np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1)
    return grid


def bilinear_sample_pixel(z: Tensor, pts: Tensor) -> Tensor:
    """Sample `z` [H, W, C] at continuous pixel coordinates `pts` [N, 2].

    Returns [N, C].  Each output is the hat-kernel weighted sum of the four
    integer neighbors; neighbors outside the map contribute zero.
    """
    if z.ndim != 3 or pts.ndim != 2 or pts.shape[-1] != 2:
        raise T.ShapeError(f"expected z [H, W, C] and pts [N, 2], got {z.shape}, {pts.shape}")
    H, W, C = z.shape
    py = pts.data[:, 0]
    px = pts.data[:, 1]
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    wy1 = py - y0
    wx1 = px - x0
    corners = []
    out = np.zeros((pts.shape[0], C), dtype=z.data.dtype)
    for dy, wy in ((0, 1.0 - wy1), (1, wy1)):
        for dx, wx in ((0, 1.0 - wx1), (1, wx1)):
            yi = y0 + dy
            xi = x0 + dx
            inside = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
            yc = np.clip(yi, 0, H - 1)
            xc = np.clip(xi, 0, W - 1)
            val = np.where(inside[:, None], z.data[yc, xc, :], 0.0)
            w = wy * wx
            out += w[:, None] * val
            corners.append((yc, xc, inside, val, dy, dx, w))

    def backward(g: np.ndarray):
        dz = np.zeros_like(z.data)
        dpy = np.zeros_like(py)
        dpx = np.zeros_like(px)
        for yc, xc, inside, val, dy, dx, w in corners:
            gw = g * inside[:, None].astype(g.dtype)
            np.add.at(dz, (yc, xc), w[:, None] * gw)
            gv = (g * val).sum(axis=1)
            sy = 1.0 if dy == 1 else -1.0
            sx = 1.0 if dx == 1 else -1.0
            wy = wy1 if dy == 1 else 1.0 - wy1
            wx = wx1 if dx == 1 else 1.0 - wx1
            dpy += sy * wx * gv
            dpx += sx * wy * gv
        return dz, np.stack([dpy, dpx], axis=1)

    return T.custom_op("bilinear_sample", (z, pts), out, backward)


def bilinear_sample(z: Tensor, pts: Tensor) -> Tensor:
    """Sample `z` [H, W, C] at normalized (y, x) coordinates `pts` [N, 2]."""
    H, W, _ = z.shape
    half = T.Tensor(np.array([H / 2.0, W / 2.0], dtype=z.data.dtype))
    shift = T.Tensor(np.array([0.5, 0.5], dtype=z.data.dtype))
    pix = T.sub(T.mul(T.add(pts, T.Tensor(np.ones(2, dtype=z.data.dtype))), half), shift)
    return bilinear_sample_pixel(z, pix)


@dataclass
class OffsetNetParams:
    """Offset head shared by all channel groups: depthwise conv, layer
    norm, pointwise projection to 2 offset channels."""

    dw: Tensor        # [K, K, Cg]
    dw_b: Tensor      # [Cg]
    ln_gamma: Tensor  # [Cg]
    ln_beta: Tensor   # [Cg]
    pw: Tensor        # [Cg, 2]
    pw_b: Tensor      # [2]

    def named(self, prefix: str):
        yield f"{prefix}.dw", self.dw
        yield f"{prefix}.dwb", self.dw_b
        yield f"{prefix}.ln.gamma", self.ln_gamma
        yield f"{prefix}.ln.beta", self.ln_beta
        yield f"{prefix}.pw", self.pw
        yield f"{prefix}.pwb", self.pw_b


def offset_net_param_shapes(C_g: int, K: int) -> list[tuple[str, tuple[int, ...], str]]:
    """(relative name, shape, init kind) for the offset head."""
    return [
        ("dw", (K, K, C_g), "trunc_normal"),
        ("dwb", (C_g,), "zeros"),
        ("ln.gamma", (C_g,), "ones"),
        ("ln.beta", (C_g,), "zeros"),
        ("pw", (C_g, 2), "zeros"),
        ("pwb", (2,), "zeros"),
    ]


def offset_net(q_grid: Tensor, p: OffsetNetParams, range_cells: float) -> Tensor:
    """Predict bounded normalized offsets [H_G, W_G, 2] from grid features.

    tanh bounds the raw prediction to (-1, 1); the scale (2*range_cells/H,
    2*range_cells/W) expresses the bound as `range_cells` grid cells per
    axis in normalized units.
    """
    H_G, W_G, C_g = q_grid.shape
    K = p.dw.shape[0]
    with T.mac_scope("offset.dw"):
        h = T.conv2d(q_grid, p.dw, p.dw_b, stride=1, pad=K // 2, depthwise=True)
    h = T.layer_norm(h, p.ln_gamma, p.ln_beta)
    h = T.gelu(h)
    with T.mac_scope("offset.pw"):
        h = T.matmul(T.reshape(h, (H_G * W_G, C_g)), p.pw)
    h = T.add(h, p.pw_b)
    h = T.tanh(h)
    scale = T.Tensor(
        np.array([2.0 * range_cells / H_G, 2.0 * range_cells / W_G], dtype=q_grid.data.dtype)
    )
    return T.reshape(T.mul(h, scale), (H_G, W_G, 2))


def deformable_rpb(
    table: Tensor, query_pts: np.ndarray, key_pts: Tensor, H: int, W: int
) -> Tensor:
    """Continuous relative-position bias.

    `table` is [m, 2H-1, 2W-1] (one slice per head), `query_pts` are fixed
    normalized query locations [Nq, 2], `key_pts` are normalized key
    locations [Nk, 2] (typically deformed, hence a Tensor).  The normalized
    displacement query - key is converted to pixels (dy * H/2) and looks up
    the table at displacement + (H-1), bilinearly interpolated with zero
    outside.  Returns [m, Nq, Nk].
    """
    m = table.shape[0]
    Nq = query_pts.shape[0]
    Nk = key_pts.shape[0]
    dtype = table.data.dtype
    q = T.Tensor(np.ascontiguousarray(query_pts[:, None, :]).astype(dtype))
    disp = T.sub(q, T.reshape(key_pts, (1, Nk, 2)))          # [Nq, Nk, 2]
    to_pix = T.Tensor(np.array([H / 2.0, W / 2.0], dtype=dtype))
    center = T.Tensor(np.array([H - 1.0, W - 1.0], dtype=dtype))
    idx = T.add(T.mul(disp, to_pix), center)
    flat = T.reshape(idx, (Nq * Nk, 2))
    table_hw_m = T.permute(table, (1, 2, 0))                  # [2H-1, 2W-1, m]
    sampled = bilinear_sample_pixel(table_hw_m, flat)         # [Nq*Nk, m]
    return T.permute(T.reshape(sampled, (Nq, Nk, m)), (2, 0, 1))
