"""Temporally constrained VQ autoencoder.

A small strided-conv encoder maps a frame ``[1, H, W]`` to a latent
``[C, H/f, W/f]``; a nearest-neighbour codebook quantizes it with a
straight-through estimator; a mirrored decoder reconstructs the frame.
Training minimizes reconstruction + VQ + focal-frequency + occlusion-aware
temporal warping losses (no adversarial term).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .flow import temporal_loss


class StopGrad:
    """Records every stop-gradient value so a loss can be re-evaluated with them frozen.

    During training this is just ``detach``.  For gradient checking, call the
    loss once to record, set ``frozen = True`` and the same loss becomes the
    smooth surrogate whose exact gradient the straight-through tape computes.
    """

    def __init__(self):
        self.values: dict[str, torch.Tensor] = {}
        self.frozen = False

    def __call__(self, key: str, x: torch.Tensor) -> torch.Tensor:
        if self.frozen:
            return self.values[key]
        d = x.detach()
        self.values[key] = d
        return d


def _sg(sg: StopGrad | None, key: str, x: torch.Tensor) -> torch.Tensor:
    return x.detach() if sg is None else sg(key, x)


@dataclass
class Stage1LossWeights:
    vq: float = 1.0
    freq: float = 0.1
    temp: float = 1.0
    beta: float = 0.25
    adv: float = 0.0  # adversarial term is not implemented; must stay 0

    def __post_init__(self):
        if min(self.vq, self.freq, self.temp, self.beta) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.adv != 0.0:
            raise ValueError("the adversarial term is not supported (adv must be 0)")


class VQCodec(nn.Module):
    def __init__(self, in_channels: int = 1, latent_channels: int = 8, factor: int = 4, codebook_size: int = 64, hidden: int = 32, zero_init_encoder_out: bool = False):
        super().__init__()
        n_down = int(round(math.log2(factor)))
        if 2**n_down != factor or n_down < 1:
            raise ValueError("downsampling factor must be a power of two >= 2")
        if codebook_size < 2:
            raise ValueError("codebook needs at least two entries")
        self.in_channels = in_channels
        self.latent_channels = latent_channels
        self.factor = factor
        enc = [nn.Conv2d(in_channels, hidden, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            enc += [nn.Conv2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU()]
        enc.append(nn.Conv2d(hidden, latent_channels, 1))
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(latent_channels, hidden, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            dec += [nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU()]
        dec.append(nn.Conv2d(hidden, in_channels, 3, padding=1))
        self.decoder = nn.Sequential(*dec)
        self.codebook = nn.Parameter(torch.randn(codebook_size, latent_channels) * 0.5)
        if zero_init_encoder_out:
            nn.init.zeros_(self.encoder[-1].weight)
            nn.init.zeros_(self.encoder[-1].bias)

    def _check(self, x: torch.Tensor):
        if x.shape[-1] % self.factor or x.shape[-2] % self.factor:
            raise ValueError(f"frame dims {tuple(x.shape[-2:])} not divisible by {self.factor}")
        if x.shape[-3] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channel(s)")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """``[..., 1, H, W] -> [..., C, H/f, W/f]`` (pre-quantization latent)."""
        self._check(x)
        lead = x.shape[:-3]
        z = self.encoder(x.reshape(-1, *x.shape[-3:]))
        return z.reshape(*lead, *z.shape[1:])

    def decode(self, z: torch.Tensor, quantize: bool = False) -> torch.Tensor:
        if quantize:
            z = self.quantize(z)[0]
        lead = z.shape[:-3]
        x = self.decoder(z.reshape(-1, *z.shape[-3:]))
        return x.reshape(*lead, *x.shape[1:])

    def quantize(self, z: torch.Tensor, beta: float = 0.25, sg: StopGrad | None = None):
        return quantize(z, self.codebook, beta=beta, sg=sg)


def quantize(z: torch.Tensor, codebook: torch.Tensor, beta: float = 0.25, sg: StopGrad | None = None):
    """Nearest-codebook quantization over the channel axis (``z``: ``[..., C, h, w]``).

    Returns ``(z_q, vq_loss, indices)``.  ``z_q`` carries straight-through
    gradients; ``vq_loss = mse(sg(z), z_q) + beta * mse(z, sg(z_q))``.  Ties go
    to the lowest index.
    """
    if codebook.dim() != 2 or codebook.shape[1] != z.shape[-3]:
        raise ValueError(f"codebook dim {tuple(codebook.shape)} does not match latent channels {z.shape[-3]}")
    vecs = z.movedim(-3, -1)  # [..., h, w, C]
    flat = vecs.reshape(-1, vecs.shape[-1])
    if sg is not None and sg.frozen:
        idx = sg.values["vq_idx"]
    else:
        d = ((flat.detach()[:, None, :] - codebook.detach()[None]) ** 2).sum(-1)
        idx = torch.argmin(d, dim=1)
        if sg is not None:
            sg.values["vq_idx"] = idx
    zq = codebook[idx].reshape(vecs.shape).movedim(-1, -3)
    loss = ((_sg(sg, "vq_z", z) - zq) ** 2).mean() + beta * ((z - _sg(sg, "vq_zq", zq)) ** 2).mean()
    zq_st = z + _sg(sg, "vq_offset", zq - z)
    return zq_st, loss, idx.reshape(vecs.shape[:-1])


def focal_frequency_map(x: torch.Tensor, y: torch.Tensor, alpha: float = 1.0, sg: StopGrad | None = None) -> torch.Tensor:
    """Per-bin ``w * |X - Y|^2`` with orthonormal 2-D DFTs and ``w = (|X-Y| / max|X-Y|)^alpha`` (no gradient)."""
    if x.shape != y.shape:
        raise ValueError("focal frequency loss needs equal shapes")
    diff = torch.fft.fft2(x, norm="ortho") - torch.fft.fft2(y, norm="ortho")
    dist = diff.real**2 + diff.imag**2
    mag = torch.sqrt(dist.detach())
    peak = mag.flatten(-2).max(-1).values[..., None, None]
    w = torch.where(peak > 0, (mag / torch.where(peak > 0, peak, torch.ones_like(peak))) ** alpha, torch.zeros_like(mag))
    return _sg(sg, "ffl_w", w) * dist


def focal_frequency_loss(x: torch.Tensor, y: torch.Tensor, alpha: float = 1.0, sg: StopGrad | None = None) -> torch.Tensor:
    return focal_frequency_map(x, y, alpha, sg).mean()


def stage1_losses(codec: VQCodec, clips: torch.Tensor, flows=None, masks=None, weights: Stage1LossWeights | None = None, sg: StopGrad | None = None) -> dict[str, torch.Tensor]:
    """Loss components on ``clips`` ``[B, T, 1, H, W]`` with latent-resolution ``flows`` ``[B, T-1, 2, h, w]`` and ``masks`` ``[B, T-1, h, w]``."""
    weights = weights or Stage1LossWeights()
    b, t = clips.shape[:2]
    if weights.temp > 0 and t < 2:
        raise ValueError("temporal loss needs clips of at least two frames")
    z = codec.encode(clips)
    zq, vq, _ = quantize(z, codec.codebook, beta=weights.beta, sg=sg)
    rec = codec.decode(zq)
    l_rec = ((rec - clips) ** 2).mean()
    l_freq = focal_frequency_loss(rec, clips, sg=sg)
    l_temp = z.new_zeros(())
    if weights.temp > 0:
        if flows is None or masks is None:
            raise ValueError("temporal loss needs flows and masks")
        for i in range(b):
            for k in range(1, t):
                l_temp = l_temp + temporal_loss(z[i, k - 1], z[i, k], flows[i, k - 1], masks[i, k - 1])
        l_temp = l_temp / b
    total = l_rec + weights.vq * vq + weights.freq * l_freq + weights.temp * l_temp
    return {"total": total, "rec": l_rec, "vq": vq, "freq": l_freq, "temp": l_temp}


def make_adamw(params, lr: float = 1e-4, weight_decay: float = 0.01) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def stage1_train_step(codec: VQCodec, optimizer, clips, flows=None, masks=None, weights: Stage1LossWeights | None = None) -> dict[str, float]:
    """One AdamW step on the compound loss; returns the (pre-step) loss breakdown."""
    codec.train()
    optimizer.zero_grad(set_to_none=True)
    losses = stage1_losses(codec, clips, flows, masks, weights)
    losses["total"].backward()
    optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}


def psnr(x: torch.Tensor, y: torch.Tensor) -> float:
    mse = float(((x - y) ** 2).mean())
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)
