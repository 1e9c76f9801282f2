"""Small history-conditioned transformer denoiser and its infrared condition adapter.

Every frame in the attention window (history slots, then the current noisy
frame) is patchified into tokens, embedded, tagged with a learned
frame-position embedding and an embedding of the frame's noise level.  The
adapter's structural tokens are added to the current frame's tokens only.
Current-frame queries attend over the whole window; history queries attend
over history only, so history features never depend on the current frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .metrics import ssim_torch
from .numerics import softmax_lastdim


def anchored_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, d_head: int, mask: torch.Tensor | None = None, return_weights: bool = False, bias: torch.Tensor | None = None):
    """``softmax(q k^T / sqrt(d_head) + bias) v`` over the last two axes.

    ``mask`` (broadcastable to ``[..., Nq, Nk]``) marks allowed keys; every
    query row must allow at least one key.  ``bias`` is an optional additive
    score offset of the same broadcast shape.
    """
    if d_head <= 0:
        raise ValueError("d_head must be positive")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"inconsistent attention dims q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    scores = q @ k.transpose(-1, -2) / math.sqrt(d_head)
    if bias is not None:
        scores = scores + bias
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = softmax_lastdim(scores)
    out = weights @ v
    return (out, weights) if return_weights else out


def level_features(level: torch.Tensor, dim: int = 64) -> torch.Tensor:
    """Sinusoidal features of a noise level in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=level.dtype) / half)
    arg = level[..., None] * 1000.0 * freqs
    return torch.cat([torch.cos(arg), torch.sin(arg)], -1)


def _sincos(pos: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(100.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    arg = pos.double()[:, None] * freqs
    return torch.cat([torch.sin(arg), torch.cos(arg)], -1)


def window_position_table(frames: int, grid: int, width: int) -> torch.Tensor:
    """Initial ``[frames, grid*grid, width]`` table: a 2-D spatial code shared by every
    frame plus a smaller per-frame code, so equal patch positions align across time."""
    if width % 4:
        raise ValueError("width must be divisible by 4")
    ys, xs = torch.meshgrid(torch.arange(grid), torch.arange(grid), indexing="ij")
    spatial = torch.cat([_sincos(ys.reshape(-1), width // 2), _sincos(xs.reshape(-1), width // 2)], -1)
    temporal = _sincos(torch.arange(frames), width)
    return (spatial[None] + 0.5 * temporal[:, None]).float()


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int = 4, anchor_init: float = 4.0):
        super().__init__()
        if width % heads:
            raise ValueError("head count must divide the model width")
        self.heads = heads
        self.d_head = width // heads
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, mlp_ratio * width), nn.GELU(), nn.Linear(mlp_ratio * width, width))
        # per-head score offset for keys at the query's own patch position, in any frame
        self.anchor = nn.Parameter(torch.full((heads,), anchor_init))

    def forward(self, x, mask, attn_store: list | None = None, aligned: torch.Tensor | None = None):
        b, n, w = x.shape
        qkv = self.qkv(self.norm1(x)).reshape(b, n, 3, self.heads, self.d_head).permute(2, 0, 3, 1, 4)
        bias = None if aligned is None else self.anchor[:, None, None] * aligned.to(x.dtype)
        out, weights = anchored_attention(qkv[0], qkv[1], qkv[2], self.d_head, mask[:, None], return_weights=True, bias=bias)
        if attn_store is not None:
            attn_store.append(weights.detach())
        x = x + self.proj(out.transpose(1, 2).reshape(b, n, w))
        return x + self.mlp(self.norm2(x))


@dataclass
class DenoiserConfig:
    latent_channels: int = 8
    latent_size: int = 8
    patch: int = 2
    width: int = 64
    heads: int = 4
    blocks: int = 4
    history: int = 8

    @property
    def grid(self) -> int:
        return self.latent_size // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid**2


class TemporalDenoiser(nn.Module):
    """Predicts the velocity of the current frame's latent given a history window."""

    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = c = config or DenoiserConfig()
        if c.latent_size % c.patch:
            raise ValueError("patch size must divide the latent size")
        pdim = c.latent_channels * c.patch**2
        self.patch_embed = nn.Linear(pdim, c.width)
        self.pos_embed = nn.Parameter(window_position_table(c.history + 1, c.grid, c.width))
        self.level_embed = nn.Sequential(nn.Linear(64, c.width), nn.SiLU(), nn.Linear(c.width, c.width))
        self.blocks = nn.ModuleList(Block(c.width, c.heads) for _ in range(c.blocks))
        self.norm_out = nn.LayerNorm(c.width)
        self.out = nn.Linear(c.width, pdim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def patchify(self, z: torch.Tensor) -> torch.Tensor:
        c, p, g = self.config.latent_channels, self.config.patch, self.config.grid
        lead = z.shape[:-3]
        z = z.reshape(-1, c, g, p, g, p).permute(0, 2, 4, 1, 3, 5).reshape(-1, g * g, c * p * p)
        return z.reshape(*lead, g * g, c * p * p)

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        c, p, g = self.config.latent_channels, self.config.patch, self.config.grid
        b = tokens.shape[0]
        return tokens.reshape(b, g, g, c, p, p).permute(0, 3, 1, 4, 2, 5).reshape(b, c, g * p, g * p)

    def _level(self, level: torch.Tensor) -> torch.Tensor:
        return self.level_embed(level_features(level))

    def forward(self, cur, cur_level, hist=None, hist_levels=None, hist_valid=None, c_struct=None, attn_store: list | None = None):
        """``cur``: ``[B, C, h, w]``; ``hist``: ``[B, T, C, h, w]`` with per-slot levels and validity."""
        cfg = self.config
        b = cur.shape[0]
        if tuple(cur.shape[1:]) != (cfg.latent_channels, cfg.latent_size, cfg.latent_size):
            raise ValueError(f"current latent has shape {tuple(cur.shape[1:])}")
        t = cfg.history
        if hist is None:
            hist = cur.new_zeros(b, t, *cur.shape[1:])
            hist_levels = cur.new_zeros(b, t)
            hist_valid = torch.zeros(b, t, dtype=torch.bool)
        if hist.shape[1] != t or hist_valid.shape != (b, t):
            raise ValueError(f"history window must have exactly {t} slots")
        p = cfg.n_patches
        cur_tok = self.patch_embed(self.patchify(cur)) + self.pos_embed[t] + self._level(cur_level)[:, None]
        if c_struct is not None:
            cur_tok = cur_tok + c_struct
        hist_tok = self.patch_embed(self.patchify(hist)) + self.pos_embed[:t] + self._level(hist_levels)[:, :, None]
        x = torch.cat([hist_tok.reshape(b, t * p, -1), cur_tok], 1)

        key_ok = torch.cat([hist_valid.repeat_interleave(p, 1), torch.ones(b, p, dtype=torch.bool)], 1)
        n = (t + 1) * p
        mask = key_ok[:, None, :].expand(b, n, n).clone()
        mask[:, :t * p, t * p:] = False  # history queries never see the current frame
        mask |= torch.eye(n, dtype=torch.bool)[None]
        pos = torch.arange(n) % p
        aligned = pos[:, None] == pos[None, :]
        for blk in self.blocks:
            x = blk(x, mask, attn_store, aligned)
        out = self.out(self.norm_out(x[:, t * p:]))
        return self.unpatchify(out)


class ConditionAdapter(nn.Module):
    """Strided conv encoder from an IR frame to the denoiser's token grid; zero-initialized output."""

    def __init__(self, width: int = 64, hidden: int = 32, stride_total: int = 8):
        super().__init__()
        n_down = int(round(math.log2(stride_total)))
        layers = [nn.Conv2d(1, hidden, 3, padding=1), nn.SiLU()]
        ch = hidden
        for i in range(n_down):
            nxt = hidden * 2 if i == n_down - 1 else hidden
            layers += [nn.Conv2d(ch, nxt, 4, stride=2, padding=1), nn.SiLU()]
            ch = nxt
        self.features = nn.Sequential(*layers)
        self.zero_proj = nn.Conv2d(ch, width, 1)
        nn.init.zeros_(self.zero_proj.weight)
        nn.init.zeros_(self.zero_proj.bias)
        self.stride_total = stride_total

    @staticmethod
    def receptive_field(stride_total: int = 8) -> tuple[int, int, float]:
        """(size, jump, start offset) of one output cell's input footprint, from the layer list."""
        layers = [(3, 1, 1)] + [(4, 2, 1)] * int(round(math.log2(stride_total))) + [(1, 1, 0)]
        size, jump, start = 1, 1, 0.5
        for k, s, pad in layers:
            size += (k - 1) * jump
            start += ((k - 1) / 2 - pad) * jump
            jump *= s
        return size, jump, start

    def forward(self, ir: torch.Tensor) -> torch.Tensor:
        """``[B, 1, H, W] -> [B, (H/s)(W/s), width]``."""
        if ir.shape[-1] % self.stride_total or ir.shape[-2] % self.stride_total:
            raise ValueError(f"IR frame dims {tuple(ir.shape[-2:])} not divisible by {self.stride_total}")
        y = self.zero_proj(self.features(ir))
        return y.flatten(2).transpose(1, 2)


def adapt_condition(ir_frame: torch.Tensor, adapter: ConditionAdapter, grid: int | None = None) -> torch.Tensor:
    """Structural tokens for one IR frame ``[H, W]`` (or a batch ``[B, 1, H, W]``)."""
    x = ir_frame.reshape(1, 1, *ir_frame.shape) if ir_frame.dim() == 2 else ir_frame
    tokens = adapter(x.to(next(adapter.parameters()).dtype))
    if grid is not None and tokens.shape[1] != grid * grid:
        raise ValueError(f"adapter yields {tokens.shape[1]} tokens, denoiser expects {grid * grid}")
    return tokens


# -- Stage II objective --------------------------------------------------------

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0


def gradient_magnitude(x: torch.Tensor, delta: float = 1e-6) -> torch.Tensor:
    """Smoothed Sobel gradient magnitude ``sqrt(gx^2 + gy^2 + delta)`` of ``[..., H, W]``."""
    h, w = x.shape[-2:]
    flat = F.pad(x.reshape(-1, 1, h, w), (1, 1, 1, 1), mode="replicate")
    k = torch.stack([_SOBEL_X, _SOBEL_X.T])[:, None].to(x.dtype)
    g = F.conv2d(flat, k)
    return torch.sqrt((g**2).sum(1) + delta).reshape(x.shape)


def structure_terms(pred: torch.Tensor, ir: torch.Tensor, vi: torch.Tensor, reduction: str = "mean"):
    """Gradient-alignment and max-intensity residuals of ``pred`` against two sources."""
    g = gradient_magnitude(pred) - torch.maximum(gradient_magnitude(ir), gradient_magnitude(vi))
    i = pred - torch.maximum(ir, vi)
    if reduction == "sum":
        return (g**2).sum(), (i**2).sum()
    return (g**2).mean(), (i**2).mean()


@dataclass
class Stage2LossWeights:
    perc: float = 0.1
    ssim: float = 1.0
    grad: float = 1.0
    int: float = 1.0


def stage2_objective(pred, target, ir_ref, vi_ref, weights: Stage2LossWeights, feature_fn=None) -> dict[str, torch.Tensor]:
    """Structural objective on decoded frames ``[B, 1, H, W]``.

    ``feature_fn`` (the frozen codec encoder) supplies the feature-space term.
    """
    zero = pred.new_zeros(())
    l_grad, l_int = structure_terms(pred, ir_ref, vi_ref)
    l_ssim = 1.0 - ssim_torch(pred[:, 0], target[:, 0]) if weights.ssim else zero
    l_perc = ((feature_fn(pred) - feature_fn(target)) ** 2).mean() if (weights.perc and feature_fn is not None) else zero
    total = weights.perc * l_perc + weights.ssim * l_ssim + weights.grad * l_grad + weights.int * l_int
    return {"total": total, "perc": l_perc, "ssim": l_ssim, "grad": l_grad, "int": l_int}
