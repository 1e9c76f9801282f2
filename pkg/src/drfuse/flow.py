"""Backward bilinear warping, block-matching flow, occlusion masks and the
occlusion-aware warping loss.

Flow fields are ``[2, H, W]`` tensors holding ``(dx, dy)``.  ``flow(p)`` points
from the source location in the previous frame to ``p``, so warping samples
the previous frame at ``p - flow(p)``.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def _check_flow(z: torch.Tensor, flow: torch.Tensor):
    if flow.dim() != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must be [2, H, W], got {tuple(flow.shape)}")
    if z.dim() < 2 or tuple(z.shape[-2:]) != tuple(flow.shape[-2:]):
        raise ValueError(
            f"flow spatial dims {tuple(flow.shape[-2:])} do not match tensor dims {tuple(z.shape[-2:])}"
        )


def warp_bilinear(z: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Sample ``z`` at ``p - flow(p)`` with bilinear weights and border clamping.

    ``z`` is ``[..., H, W]``; gradients flow to both ``z`` and ``flow``.
    """
    _check_flow(z, flow)
    h, w = z.shape[-2:]
    ys = torch.arange(h, dtype=z.dtype).view(h, 1)
    xs = torch.arange(w, dtype=z.dtype).view(1, w)
    x = (xs - flow[0].to(z.dtype)).clamp(0, w - 1)
    y = (ys - flow[1].to(z.dtype)).clamp(0, h - 1)
    x0 = torch.floor(x).clamp(max=max(w - 2, 0)).long()
    y0 = torch.floor(y).clamp(max=max(h - 2, 0)).long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    wx = x - x0.to(z.dtype)
    wy = y - y0.to(z.dtype)

    flat = z.reshape(*z.shape[:-2], h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(-1)
        return flat.index_select(-1, idx).reshape(*z.shape[:-2], h, w)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def estimate_flow(prev, curr, block: int = 4, radius: int = 3) -> torch.Tensor:
    """Integer block matching by sum of absolute differences.

    For each block of ``curr`` the displacement ``d`` minimizing
    ``sum |curr(p) - prev(p - d)|`` (edge-padded ``prev``) wins; ties go to the
    smallest ``|d|``, then lexicographic ``(dy, dx)``.  The block's
    displacement is broadcast to its pixels.
    """
    prev = torch.as_tensor(prev).detach().double().numpy()
    curr = torch.as_tensor(curr).detach().double().numpy()
    if prev.shape != curr.shape:
        raise ValueError("frames must have equal dims")
    if prev.ndim == 2:
        prev, curr = prev[None], curr[None]
    if block < 4 or radius < 1:
        raise ValueError("block must be >= 4 and radius >= 1")
    _, h, w = curr.shape
    if block > h or block > w:
        raise ValueError(f"block {block} larger than frame {h}x{w}")

    cands = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    cands.sort(key=lambda d: (d[0] ** 2 + d[1] ** 2, d[1], d[0]))
    padded = np.pad(prev, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    nby, nbx = -(-h // block), -(-w // block)
    best = np.full((nby, nbx), np.inf)
    flow = np.zeros((2, nby, nbx))
    for dx, dy in cands:
        shifted = padded[:, radius - dy : radius - dy + h, radius - dx : radius - dx + w]
        ad = np.abs(curr - shifted).sum(axis=0)
        sad = np.add.reduceat(np.add.reduceat(ad, np.arange(0, h, block), axis=0), np.arange(0, w, block), axis=1)
        better = sad < best
        best[better] = sad[better]
        flow[0][better] = dx
        flow[1][better] = dy
    full = np.repeat(np.repeat(flow, block, axis=1), block, axis=2)[:, :h, :w]
    return torch.from_numpy(np.ascontiguousarray(full))


def occlusion_mask(flow_fwd: torch.Tensor, flow_bwd: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Forward-backward consistency mask.

    ``flow_fwd`` lives on the current frame's grid, ``flow_bwd`` on the previous
    frame's grid.  A cell is occluded (0) when
    ``|flow_fwd(p) + flow_bwd(p - flow_fwd(p))| > tau`` or its source falls
    outside the frame.
    """
    if flow_fwd.shape != flow_bwd.shape:
        raise ValueError("forward and backward flows must have matching dims")
    _check_flow(flow_fwd[0], flow_fwd)
    h, w = flow_fwd.shape[-2:]
    back = warp_bilinear(flow_bwd, flow_fwd)
    err = torch.sqrt(((flow_fwd + back) ** 2).sum(0))
    xs = torch.arange(w, dtype=flow_fwd.dtype).view(1, w) - flow_fwd[0]
    ys = torch.arange(h, dtype=flow_fwd.dtype).view(h, 1) - flow_fwd[1]
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    return ((err <= tau) & inside).to(flow_fwd.dtype)


def temporal_loss(z_prev, z_curr, flow, mask, eps: float = 1e-6) -> torch.Tensor:
    """Occlusion-aware warping error for one frame pair.

    ``||M * (W(z_prev, flow) - z_curr)||^2 / (||M||_1 + eps)``; the mask is
    spatial and broadcast over channels, so the result is a per-cell sum of
    squared channel residuals averaged over valid cells.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if z_prev.shape != z_curr.shape:
        raise ValueError("latent shapes differ")
    if tuple(mask.shape) != tuple(z_curr.shape[-2:]):
        raise ValueError("mask dims do not match latent dims")
    resid = mask * (warp_bilinear(z_prev, flow) - z_curr)
    return (resid**2).sum() / (mask.abs().sum() + eps)


def temporal_loss_sequence(latents, flows, masks, eps: float = 1e-6) -> torch.Tensor:
    """Sum of :func:`temporal_loss` over consecutive pairs of ``latents`` ``[T, ...]``."""
    if len(flows) != latents.shape[0] - 1 or len(masks) != len(flows):
        raise ValueError("need T-1 flows and masks for T latents")
    total = latents.new_zeros(())
    for t in range(1, latents.shape[0]):
        total = total + temporal_loss(latents[t - 1], latents[t], flows[t - 1], masks[t - 1], eps)
    return total


def downsample_flow(flow: torch.Tensor, factor: int) -> torch.Tensor:
    """Average-pool displacements over ``factor x factor`` cells, rescaled to latent units."""
    if factor == 1:
        return flow
    return F.avg_pool2d(flow.unsqueeze(0), factor).squeeze(0) / factor


def downsample_mask(mask: torch.Tensor, factor: int) -> torch.Tensor:
    """A latent cell is valid only if every pixel it covers is valid."""
    if factor == 1:
        return mask
    return -F.max_pool2d(-mask.unsqueeze(0).unsqueeze(0), factor).squeeze(0).squeeze(0)
