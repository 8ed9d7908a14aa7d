"""Differentiable warping kernel: affine grids, bilinear sampling, flow fields.

Conventions (load-bearing, the oracle tests depend on them):
  - Normalized coordinates: the pixel-center lattice spans [-1, 1] inclusive,
    i.e. x = -1 is the center of column 0 and x = +1 the center of column W-1.
    One pixel therefore equals 2/(W-1) normalized units along x.
  - Grids store (x, y) pairs in the last dimension; x indexes width.
  - Sample coordinates outside the lattice blend toward a constant padding
    value, so translated content vacates its origin cleanly.

Everything here is pure torch and differentiable with respect to both the
source image and the grid (except on the measure-zero set of exactly
integral pixel coordinates, where bilinear interpolation has a kink).
"""

from __future__ import annotations

import torch
from torch import Tensor

IDENTITY_AFFINE = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0))


def identity_theta(dtype=torch.float32, device=None) -> Tensor:
    return torch.tensor(IDENTITY_AFFINE, dtype=dtype, device=device)


def normalized_lattice(h: int, w: int, dtype=torch.float32, device=None) -> Tensor:
    """Identity sample grid of shape (h, w, 2), last dim (x, y)."""
    if h < 2 or w < 2:
        raise ValueError(f"lattice needs h, w >= 2, got {h}x{w}")
    xs = torch.linspace(-1.0, 1.0, w, dtype=dtype, device=device)
    ys = torch.linspace(-1.0, 1.0, h, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack((gx, gy), dim=-1)


def affine_grid(theta: Tensor, out_h: int, out_w: int) -> Tensor:
    """Sample grid sending output pixel centers through a 2x3 affine map.

    theta rows map homogeneous output coords (x, y, 1) to source (x, y).
    Accepts theta of shape (2, 3) or (B, 2, 3); returns (out_h, out_w, 2)
    or (B, out_h, out_w, 2) accordingly.
    """
    theta = torch.as_tensor(theta)
    if theta.shape[-2:] != (2, 3):
        raise ValueError(f"theta must be (..., 2, 3), got {tuple(theta.shape)}")
    lattice = normalized_lattice(out_h, out_w, dtype=theta.dtype, device=theta.device)
    ones = torch.ones(out_h, out_w, 1, dtype=theta.dtype, device=theta.device)
    homog = torch.cat((lattice, ones), dim=-1)  # (h, w, 3)
    if theta.dim() == 2:
        return torch.einsum("hwk,jk->hwj", homog, theta)
    return torch.einsum("hwk,bjk->bhwj", homog, theta)


def _gather_padded(src: Tensor, ix: Tensor, iy: Tensor, padding_value: float) -> Tensor:
    """Fetch src[:, :, iy, ix] with constant padding outside the raster."""
    b, c, h, w = src.shape
    inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    flat_idx = (iy.clamp(0, h - 1) * w + ix.clamp(0, w - 1)).reshape(b, 1, -1)
    vals = src.reshape(b, c, h * w).gather(2, flat_idx.expand(-1, c, -1))
    vals = vals.reshape(b, c, *ix.shape[1:])
    pad = torch.full((), padding_value, dtype=src.dtype, device=src.device)
    return torch.where(inside.unsqueeze(1), vals, pad)


def bilinear_sample(src: Tensor, grid: Tensor, padding_value: float = -1.0) -> Tensor:
    """Bilinearly sample src at normalized grid coordinates.

    src: (C, H, W) or (B, C, H, W); grid: (h, w, 2) or (B, h, w, 2).
    Output resolution is the grid resolution. Uses the lerp form
    a + (b - a) * t, which is exact on constant images.
    """
    squeeze_src = src.dim() == 3
    if squeeze_src:
        src = src.unsqueeze(0)
    if src.dim() != 4:
        raise ValueError(f"src must be (C, H, W) or (B, C, H, W), got {tuple(src.shape)}")
    if grid.dim() == 3:
        grid = grid.unsqueeze(0)
    if grid.dim() != 4 or grid.shape[-1] != 2:
        raise ValueError(f"grid must be (..., h, w, 2), got {tuple(grid.shape)}")
    if torch.isnan(grid).any():
        raise ValueError("grid contains NaN coordinates")
    if grid.shape[0] == 1 and src.shape[0] > 1:
        grid = grid.expand(src.shape[0], -1, -1, -1)
    elif src.shape[0] == 1 and grid.shape[0] > 1:
        src = src.expand(grid.shape[0], -1, -1, -1)
    if src.shape[0] != grid.shape[0]:
        raise ValueError(f"batch mismatch: src {src.shape[0]} vs grid {grid.shape[0]}")

    _, _, h, w = src.shape
    px = (grid[..., 0] + 1.0) * 0.5 * (w - 1)
    py = (grid[..., 1] + 1.0) * 0.5 * (h - 1)
    # float32 lattices carry ~W * 2^-24 px of quantization; snap coords that
    # close to an integer so integer-intended grids sample exactly. The
    # correction is detached, so gradients are those of the unsnapped coords.
    px = px - ((px - px.round()) * ((px - px.round()).abs() < 1e-5)).detach()
    py = py - ((py - py.round()) * ((py - py.round()).abs() < 1e-5)).detach()
    x0 = px.floor()
    y0 = py.floor()
    fx = (px - x0).unsqueeze(1)
    fy = (py - y0).unsqueeze(1)
    ix0 = x0.long()
    iy0 = y0.long()

    v00 = _gather_padded(src, ix0, iy0, padding_value)
    v01 = _gather_padded(src, ix0 + 1, iy0, padding_value)
    v10 = _gather_padded(src, ix0, iy0 + 1, padding_value)
    v11 = _gather_padded(src, ix0 + 1, iy0 + 1, padding_value)

    top = v00 + (v01 - v00) * fx
    bot = v10 + (v11 - v10) * fx
    out = top + (bot - top) * fy
    return out.squeeze(0) if squeeze_src else out


def flow_to_grid(flow: Tensor) -> Tensor:
    """Interpret a flow field as absolute normalized source coordinates.

    flow: (2, h, w) or (B, 2, h, w), channel 0 = x, channel 1 = y, values in
    [-1, 1] (Tanh-bounded by the predicting decoder). Returns a sample grid
    shaped (h, w, 2) or (B, h, w, 2).
    """
    if flow.dim() == 3:
        if flow.shape[0] != 2:
            raise ValueError(f"flow must have 2 channels, got {flow.shape[0]}")
        return flow.permute(1, 2, 0)
    if flow.dim() == 4:
        if flow.shape[1] != 2:
            raise ValueError(f"flow must have 2 channels, got {flow.shape[1]}")
        return flow.permute(0, 2, 3, 1)
    raise ValueError(f"flow must be (2, h, w) or (B, 2, h, w), got {tuple(flow.shape)}")


def compose_affine(theta_first: Tensor, theta_second: Tensor) -> Tensor:
    """Affine equivalent of two chained sampling passes.

    Sampling src with theta_first and then sampling the result with
    theta_second sends an output coordinate u to theta_first(theta_second(u));
    this returns that combined 2x3 map.
    """
    a1 = torch.as_tensor(theta_first, dtype=torch.float64)
    a2 = torch.as_tensor(theta_second, dtype=torch.float64)
    lin = a1[:, :2] @ a2[:, :2]
    off = a1[:, :2] @ a2[:, 2] + a1[:, 2]
    out = torch.cat((lin, off.unsqueeze(1)), dim=1)
    return out.to(torch.as_tensor(theta_first).dtype)
