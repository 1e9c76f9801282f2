"""Fusion-quality metrics (CC, EN, SSIM) and temporal-stability proxies.

``frame_diff_energy`` and ``warped_residual`` are stand-ins for published
video-stability scores; they are not numerically comparable to them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .flow import temporal_loss

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def _t(x) -> torch.Tensor:
    x = torch.as_tensor(x)
    return x if x.is_floating_point() else x.double()


def cc(a, b) -> float:
    """Pearson correlation of flattened pixels; 0 when either input is constant."""
    a, b = _t(a).double(), _t(b).double()
    if a.shape != b.shape:
        raise ValueError("cc needs equal shapes")
    if a.max() == a.min() or b.max() == b.min():  # mean rounding would leave spurious residuals
        return 0.0
    da = a.reshape(-1) - a.mean()
    db = b.reshape(-1) - b.mean()
    denom = torch.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0:
        return 0.0
    return float(((da * db).sum() / denom).clamp(-1.0, 1.0))


def en(a) -> float:
    """Shannon entropy (bits) of the 256-level histogram of ``a`` in [0, 1]."""
    a = _t(a).double()
    if a.numel() == 0:
        raise ValueError("entropy of an empty image")
    levels = torch.round(a.clamp(0, 1) * 255).long().reshape(-1)
    p = torch.bincount(levels, minlength=256).double() / levels.numel()
    p = p[p > 0]
    return float(-(p * torch.log2(p)).sum()) + 0.0


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    g = torch.exp(-((torch.arange(size, dtype=dtype) - (size - 1) / 2) ** 2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Local SSIM over valid 11x11 Gaussian windows; inputs ``[..., H, W]``, differentiable."""
    if a.shape != b.shape:
        raise ValueError("ssim needs equal shapes")
    h, w = a.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    lead = a.shape[:-2]
    x = torch.stack([a.reshape(-1, h, w), b.reshape(-1, h, w)], 1)  # [N, 2, H, W]
    n = x.shape[0]
    win = gaussian_window(dtype=a.dtype).view(1, 1, SSIM_WINDOW, SSIM_WINDOW)
    stacked = torch.cat([x, x * x, (x[:, :1] * x[:, 1:])], 1).reshape(-1, 1, h, w)
    filt = F.conv2d(stacked, win).reshape(n, 5, h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1)
    mu_a, mu_b, e_aa, e_bb, e_ab = filt.unbind(1)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return (num / den).reshape(*lead, *num.shape[-2:])


def ssim_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ssim_map(a, b).mean()


def ssim(a, b) -> float:
    return float(ssim_torch(_t(a).double(), _t(b).double()))


def frame_diff_energy(seq, region=None) -> np.ndarray:
    """Mean squared difference of each adjacent pair, optionally over a boolean ``region``."""
    seq = _t(seq).double()
    if seq.shape[0] < 2:
        raise ValueError("frame_diff_energy needs at least two frames")
    d2 = (seq[1:] - seq[:-1]) ** 2
    if region is None:
        return d2.reshape(d2.shape[0], -1).mean(1).numpy()
    region = torch.as_tensor(region, dtype=torch.bool)
    if region.dim() == seq.dim():
        region = region[1:] & region[:-1]
    else:
        region = region.expand_as(d2)
    return np.array([float(d2[i][region[i]].mean()) if region[i].any() else 0.0 for i in range(d2.shape[0])])


def warped_residual(seq, flows, masks, eps: float = 1e-6) -> np.ndarray:
    """Occlusion-masked warping error of each frame against its flow-warped predecessor."""
    seq = _t(seq).double()
    flows, masks = _t(flows).double(), _t(masks).double()
    if flows.shape[0] != seq.shape[0] - 1 or masks.shape[0] != flows.shape[0]:
        raise ValueError("need T-1 flows and masks aligned with the sequence")
    return np.array([float(temporal_loss(seq[t - 1], seq[t], flows[t - 1], masks[t - 1], eps)) for t in range(1, seq.shape[0])])


def diff_map_render(seq, scale: float | None = None) -> np.ndarray:
    """Signed frame differences on a red-white-blue map (``[T-1, H, W, 3]`` in [0, 1]).

    Positive changes go red, negative blue, zero is pure white.  One scale
    (``max |diff|`` unless given) is shared by the whole sequence.
    """
    seq = _t(seq).double().numpy()
    if seq.shape[0] < 2:
        raise ValueError("diff_map_render needs at least two frames")
    d = seq[1:] - seq[:-1]
    if scale is None:
        scale = float(np.abs(d).max())
    u = np.clip(np.abs(d) / scale, 0.0, 1.0) if scale > 0 else np.zeros_like(d)
    out = np.ones(d.shape + (3,))
    pos, neg = d > 0, d < 0
    out[..., 1] -= u
    out[..., 2] -= np.where(pos, u, 0.0)
    out[..., 0] -= np.where(neg, u, 0.0)
    return out


@dataclass
class MetricsRow:
    frame: int
    cc_ir: float
    cc_vi: float
    cc: float
    en: float
    ssim_ir: float
    ssim_vi: float
    ssim: float
    diff_energy: float
    warped_residual: float


def metrics_row(frame: int, fused, ir, vi, prev=None, flow=None, mask=None) -> MetricsRow:
    fused, ir, vi = _t(fused).double(), _t(ir).double(), _t(vi).double()
    c_ir, c_vi = cc(fused, ir), cc(fused, vi)
    s_ir, s_vi = ssim(fused, ir), ssim(fused, vi)
    if prev is None:
        de = wr = math.nan
    else:
        prev = _t(prev).double()
        de = float(((fused - prev) ** 2).mean())
        wr = float(temporal_loss(prev, fused, flow, mask)) if flow is not None else math.nan
    return MetricsRow(frame, c_ir, c_vi, (c_ir + c_vi) / 2, en(fused), s_ir, s_vi, (s_ir + s_vi) / 2, de, wr)


REPORT_COLUMNS = ["frame", "cc", "en", "ssim", "diff_energy", "warped_residual"]


def write_report_csv(path, rows: list[MetricsRow], columns=None) -> None:
    columns = columns or [f.name for f in fields(MetricsRow)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for r in rows:
            d = asdict(r)
            writer.writerow([d[c] if c == "frame" else f"{d[c]:.10g}" for c in columns])


def read_report_csv(path) -> list[dict[str, float]]:
    with open(Path(path), newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
