"""Deterministic v-parameterized DDIM sampling with history guidance, latent
refinement and the autoregressive fusion rollout."""

from __future__ import annotations

import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .denoiser import ConditionAdapter, TemporalDenoiser, gradient_magnitude
from .flow import estimate_flow, occlusion_mask
from .guidance import GuidanceSettings, HistoryConfig, HistoryVariant, compose_guidance, make_history_config
from .metrics import MetricsRow, frame_diff_energy, metrics_row
from .numerics import Rng, seeded_gaussian

COSINE_OFFSET = 0.008


def cosine_alpha(t):
    """Signal coefficient of the cosine variance-preserving schedule at ``t`` in [0, 1]."""
    s = COSINE_OFFSET
    t = torch.as_tensor(t, dtype=torch.float64)
    return torch.cos((t + s) / (1 + s) * math.pi / 2) / math.cos(s / (1 + s) * math.pi / 2)


@dataclass
class NoiseSchedule:
    alphas: torch.Tensor  # [K+1], alphas[0] == 1, alphas[K] ~ 0
    sigmas: torch.Tensor

    @property
    def steps(self) -> int:
        return self.alphas.shape[0] - 1


def build_schedule(steps: int, t_max: float = 1.0) -> NoiseSchedule:
    """Cosine schedule with ``steps`` intervals on ``[0, t_max]``; ``t_max < 1`` starts from a partially noised latent."""
    if steps < 1:
        raise ValueError("need at least one sampling step")
    if not 0.0 < t_max <= 1.0:
        raise ValueError("t_max must lie in (0, 1]")
    alphas = cosine_alpha(t_max * torch.arange(steps + 1, dtype=torch.float64) / steps).clamp(0.0, 1.0)
    sigmas = torch.sqrt(1.0 - alphas**2)
    return NoiseSchedule(alphas, sigmas)


def ddim_step(z_k: torch.Tensor, v: torch.Tensor, k: int, sched: NoiseSchedule, refine: Callable | None = None):
    """One deterministic step from schedule point ``k`` to ``k - 1``.

    Returns ``(z_prev, z0_hat)``.  ``refine`` may replace ``z0_hat`` before the
    move; the noise direction is always taken from the unrefined prediction.
    """
    if not 0 <= k <= sched.steps:
        raise IndexError(f"step {k} outside [0, {sched.steps}]")
    a, s = float(sched.alphas[k]), float(sched.sigmas[k])
    z0 = a * z_k - s * v
    if refine is not None:
        z0 = refine(z0)
    if k == 0:
        return z0, z0
    eps = s * z_k + a * v
    a_prev, s_prev = float(sched.alphas[k - 1]), float(sched.sigmas[k - 1])
    return a_prev * z0 + s_prev * eps, z0


def oracle_velocity(z_k: torch.Tensor, target: torch.Tensor, k: int, sched: NoiseSchedule) -> torch.Tensor:
    """Exact velocity that denoises ``z_k`` to ``target``."""
    a, s = float(sched.alphas[k]), float(sched.sigmas[k])
    if s == 0:
        return torch.zeros_like(z_k)
    eps = (z_k - a * target) / s
    return a * eps - s * target


# -- latent refinement -----------------------------------------------------------


@dataclass
class RefinementSettings:
    gamma: float = 0.3
    reg: float = 1.0
    steps: int = 10
    step_size: float = 0.1
    every: int = 5
    max_halvings: int = 30
    w_grad: float = 1.0
    w_int: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.reg < 0 or self.steps < 0 or self.step_size <= 0 or self.every < 1:
            raise ValueError("invalid refinement settings")


def fusion_energy(ir: torch.Tensor, vi: torch.Tensor, w_grad: float = 1.0, w_int: float = 1.0) -> Callable[[torch.Tensor], torch.Tensor]:
    """Alignment energy of a decoded frame with both sources (squared L2 norms)."""
    g_ref = torch.maximum(gradient_magnitude(ir), gradient_magnitude(vi))
    i_ref = torch.maximum(ir, vi)

    def energy(x: torch.Tensor) -> torch.Tensor:
        return w_grad * ((gradient_magnitude(x) - g_ref) ** 2).sum() + w_int * ((x - i_ref) ** 2).sum()

    return energy


@dataclass
class RefinementTrace:
    objective: list[float] = field(default_factory=list)
    aborted: bool = False


def refine_latent(z0_hat: torch.Tensor, decode: Callable, energy: Callable, settings: RefinementSettings, trace: RefinementTrace | None = None) -> torch.Tensor:
    """Gradient descent on ``energy(decode(z)) + reg * ||z - z0_hat||^2`` from ``z0_hat``,
    then blend ``(1 - gamma) * z0_hat + gamma * z*``.

    Each iteration starts at ``step_size`` and halves until the objective does
    not increase; a non-finite objective stops the descent at the last finite iterate.
    """
    if settings.gamma == 0.0:
        return z0_hat
    anchor = z0_hat.detach()

    def objective(z):
        return energy(decode(z)) + settings.reg * ((z - anchor) ** 2).sum()

    z = anchor.clone()
    with torch.enable_grad():
        zg = z.clone().requires_grad_(True)
        val = objective(zg)
        if not torch.isfinite(val):
            if trace is not None:
                trace.aborted = True
            return z0_hat
        if trace is not None:
            trace.objective.append(float(val.detach()))
        for _ in range(settings.steps):
            (grad,) = torch.autograd.grad(val, zg)
            eta = settings.step_size
            accepted = False
            for _ in range(settings.max_halvings):
                cand = (zg.detach() - eta * grad).requires_grad_(True)
                cval = objective(cand)
                if not torch.isfinite(cval):
                    if trace is not None:
                        trace.aborted = True
                    break
                if cval <= val:
                    zg, val, accepted = cand, cval, True
                    break
                eta *= 0.5
            if not accepted:
                break
            if trace is not None:
                trace.objective.append(float(val.detach()))
    z_star = zg.detach()
    return (1.0 - settings.gamma) * anchor + settings.gamma * z_star


# -- models and per-frame fusion -------------------------------------------------


@dataclass
class FusionModels:
    codec: torch.nn.Module
    denoiser: TemporalDenoiser
    adapter: ConditionAdapter | None
    latent_scale: float = 1.0

    @property
    def dtype(self):
        return next(self.denoiser.parameters()).dtype

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Scaled latent ``[C, h, w]`` -> frame ``[H, W]``."""
        return self.codec.decode((z / self.latent_scale)[None])[0, 0]

    def encode(self, frame: torch.Tensor) -> torch.Tensor:
        return self.codec.encode(frame.reshape(1, 1, *frame.shape[-2:]).to(self.dtype))[0] * self.latent_scale


@dataclass
class SamplerSettings:
    steps: int = 50
    history: int = 8
    guidance: GuidanceSettings = field(default_factory=GuidanceSettings)
    refinement: RefinementSettings = field(default_factory=RefinementSettings)
    use_guidance: bool = True  # False: baseline branch only ("w/o HG")
    use_suppression: bool = True  # False: baseline branch replaces the suppressed one ("w/o H2")
    use_adapter: bool = True
    use_refinement: bool = True
    threads: int = 1
    strength: float = 1.0  # noise level the visible latent is diffused to before the reverse loop

    def __post_init__(self):
        if not 0.0 < self.strength <= 1.0:
            raise ValueError("strength must lie in (0, 1]")

    @property
    def effective_scale(self) -> float:
        return self.guidance.scale if self.use_guidance else 0.0


@dataclass
class RolloutState:
    capacity: int = 8
    history: deque = field(default_factory=deque)
    frame: int = 0

    def push(self, z: torch.Tensor) -> None:
        self.history.append(z.detach())
        while len(self.history) > self.capacity:
            self.history.popleft()

    def stacked(self) -> torch.Tensor | None:
        return torch.stack(list(self.history)) if self.history else None


def window_tensors(config: HistoryConfig | None, capacity: int, latent_shape, dtype):
    """Pad a history view to ``capacity`` slots, aligned so the newest slot is last."""
    hist = torch.zeros(1, capacity, *latent_shape, dtype=dtype)
    levels = torch.zeros(1, capacity, dtype=dtype)
    valid = torch.zeros(1, capacity, dtype=torch.bool)
    if config is not None and len(config):
        n = len(config)
        hist[0, capacity - n :] = config.slots.to(dtype)
        levels[0, capacity - n :] = config.levels.to(dtype)
        valid[0, capacity - n :] = config.valid
    return hist, levels, valid


def evaluate_branch(denoiser: TemporalDenoiser, z: torch.Tensor, level: float, c_struct, config: HistoryConfig | None) -> torch.Tensor:
    cap = denoiser.config.history
    hist, levels, valid = window_tensors(config, cap, z.shape, z.dtype)
    lvl = torch.full((1,), level, dtype=z.dtype)
    return denoiser(z[None], lvl, hist, levels, valid, c_struct)[0]


def _map(fn, items, threads: int):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def guided_velocity(models: FusionModels, z, level: float, c_struct, history, settings: SamplerSettings, rng: Rng) -> torch.Tensor:
    """Compose the baseline, stabilized and context-suppressed branch velocities."""
    if history is None:
        return evaluate_branch(models.denoiser, z, level, c_struct, None)
    scale = settings.effective_scale
    configs = [make_history_config(history, HistoryVariant.BASELINE, settings.guidance, rng.child(0), settings.history)]
    if scale != 0.0:
        configs.append(make_history_config(history, HistoryVariant.STABILIZED, settings.guidance, rng.child(1), settings.history))
        if settings.use_suppression:
            configs.append(make_history_config(history, HistoryVariant.CONTEXT_SUPPRESSED, settings.guidance, rng.child(2), settings.history))
    vs = _map(lambda cfg: evaluate_branch(models.denoiser, z, level, c_struct, cfg), configs, settings.threads)
    if scale == 0.0:
        return vs[0]
    v2 = vs[2] if settings.use_suppression else vs[0]
    return compose_guidance(vs[0], vs[1], v2, scale)


def fuse_frame(ir_t: torch.Tensor, vi_t: torch.Tensor, state: RolloutState, models: FusionModels, settings: SamplerSettings, seed: int = 0):
    """Generate the fused frame for one time step and push its latent into the history.

    Returns ``(frame [H, W], latent)``.
    """
    if models.denoiser is None or models.codec is None:
        raise ValueError("fuse_frame needs a codec and a denoiser")
    dtype = models.dtype
    cfg = models.denoiser.config
    h, w = ir_t.shape[-2:]
    if h % (models.codec.factor * cfg.patch) or h // models.codec.factor != cfg.latent_size:
        raise ValueError(f"frame size {h}x{w} does not match the codec/denoiser latent grid")
    sched = build_schedule(settings.steps, settings.strength)
    rng = Rng(seed, (state.frame,))
    ir_t, vi_t = ir_t.to(dtype), vi_t.to(dtype)
    latent_shape = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)

    with torch.no_grad():
        c_struct = None
        if settings.use_adapter and models.adapter is not None:
            c_struct = models.adapter(ir_t.reshape(1, 1, h, w))
        history = state.stacked()
        energy = fusion_energy(ir_t, vi_t, settings.refinement.w_grad, settings.refinement.w_int)
        # the noisy stream starts from the visible latent; at strength 1 its weight is ~1e-16
        k0 = sched.steps
        z = sched.alphas[k0].to(dtype) * models.encode(vi_t) + sched.sigmas[k0].to(dtype) * seeded_gaussian(latent_shape, rng.child(0), dtype=dtype)
        for i, k in enumerate(range(sched.steps, 0, -1)):
            v = guided_velocity(models, z, float(sched.sigmas[k]), c_struct, history, settings, rng.child(1, i))
            refine = None
            if settings.use_refinement and i % settings.refinement.every == 0:
                refine = lambda z0: refine_latent(z0, models.decode, energy, settings.refinement)  # noqa: E731
            z, _ = ddim_step(z, v, k, sched, refine)
        frame = models.decode(z)
    state.push(z)
    state.frame += 1
    return frame, z


# -- rollout ---------------------------------------------------------------------


@dataclass
class FusionRunReport:
    rows: list[MetricsRow]
    diff_energy: np.ndarray  # per adjacent pair
    diff_slope: float  # least-squares slope of diff_energy over time
    deviation: np.ndarray  # mean |F_t - reference_t| per frame
    deviation_slope: float

    def means(self) -> dict[str, float]:
        out = {}
        for key in ("cc", "en", "ssim", "diff_energy", "warped_residual"):
            vals = np.array([getattr(r, key) for r in self.rows], dtype=float)
            vals = vals[np.isfinite(vals)]
            out[key] = float(vals.mean()) if vals.size else math.nan
        return out


def _slope(y: np.ndarray) -> float:
    if len(y) < 2:
        return 0.0
    x = np.arange(len(y), dtype=float)
    return float(np.polyfit(x, y, 1)[0])


def rollout(ir_seq, vi_seq, models: FusionModels, settings: SamplerSettings, seed: int = 0, flows=None, masks=None, reference=None, progress: Callable | None = None):
    """Fuse a whole sequence frame by frame; returns ``(fused [T, H, W], FusionRunReport)``.

    ``flows``/``masks`` (``[T-1, ...]``) give ground truth for the warped
    residual; without them block-matching flow and forward-backward masks
    are estimated from the visible stream.  ``reference`` (e.g. a target
    composite) anchors the cumulative deviation statistic.
    """
    ir_seq, vi_seq = torch.as_tensor(ir_seq), torch.as_tensor(vi_seq)
    if ir_seq.shape != vi_seq.shape:
        raise ValueError("IR and VI sequences must be aligned and of equal length")
    n = ir_seq.shape[0]
    state = RolloutState(capacity=settings.history)
    fused = []
    for t in range(n):
        frame, _ = fuse_frame(ir_seq[t], vi_seq[t], state, models, settings, seed)
        fused.append(frame.detach().double().clamp(0.0, 1.0))
        if progress is not None:
            progress(t)
    fused = torch.stack(fused)

    if flows is None and n > 1:
        fw = [estimate_flow(vi_seq[t - 1], vi_seq[t]) for t in range(1, n)]
        bw = [estimate_flow(vi_seq[t], vi_seq[t - 1]) for t in range(1, n)]
        flows = torch.stack(fw)
        masks = torch.stack([occlusion_mask(f, b) for f, b in zip(fw, bw)])

    rows = []
    for t in range(n):
        if t == 0:
            rows.append(metrics_row(0, fused[0], ir_seq[0], vi_seq[0]))
        else:
            rows.append(metrics_row(t, fused[t], ir_seq[t], vi_seq[t], fused[t - 1], torch.as_tensor(flows[t - 1]).double(), torch.as_tensor(masks[t - 1]).double()))
    de = frame_diff_energy(fused) if n > 1 else np.zeros(0)
    ref = torch.as_tensor(reference).double() if reference is not None else fused[:1].expand_as(fused)
    dev = (fused - ref).abs().reshape(n, -1).mean(1).numpy()
    report = FusionRunReport(rows, de, _slope(de), dev, _slope(dev))
    return fused, report
