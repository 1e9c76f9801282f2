"""Training loops: the codec, the unconditional history prior and the IR adapter.

All loops draw their batches from a :class:`SyntheticCorpus` through
explicit ``Rng`` streams, so a fixed seed reproduces a run exactly (single
thread).  The denoiser is trained in v-form on scaled codec latents of the
max-intensity composite of the clean streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .codec import Stage1LossWeights, VQCodec, make_adamw, stage1_train_step
from .denoiser import ConditionAdapter, Stage2LossWeights, TemporalDenoiser, stage2_objective
from .flow import downsample_flow, downsample_mask, temporal_loss
from .numerics import Rng
from .sampler import FusionModels, cosine_alpha
from .scenes import GroundTruthBundle, generate_sequence, random_scene_config


@dataclass
class SyntheticCorpus:
    bundles: list[GroundTruthBundle]

    @classmethod
    def generate(cls, n: int, seed: int, length: int = 12, size: int = 32, flicker=(0.0, 0.2), max_objects: int = 2) -> "SyntheticCorpus":
        root = Rng(seed, (11,))
        bundles = []
        for i in range(n):
            cfg = random_scene_config(root.child(i, 0), height=size, width=size, length=length, max_objects=max_objects, flicker=flicker)
            bundles.append(generate_sequence(cfg, root.child(i, 1)))
        return cls(bundles)

    def __len__(self):
        return len(self.bundles)

    def stream(self, i: int, kind: str) -> torch.Tensor:
        b = self.bundles[i]
        return {"ir": b.ir, "vi": b.vi, "target": b.composite(), "ir_clean": b.ir_clean, "vi_clean": b.vi_clean}[kind]

    def clips(self, rng: Rng, batch: int, clip_len: int, factor: int, kinds=("ir", "vi", "target"), dtype=torch.float32):
        """Random clips ``[B, T, 1, H, W]`` with latent-resolution flows ``[B, T-1, 2, h, w]`` and masks."""
        xs, fs, ms = [], [], []
        for j in range(batch):
            r = rng.child(j)
            i = int(r.integers(0, len(self)))
            b = self.bundles[i]
            t0 = int(r.integers(0, b.length - clip_len + 1))
            kind = kinds[int(r.integers(0, len(kinds)))]
            xs.append(self.stream(i, kind)[t0 : t0 + clip_len, None])
            fs.append(torch.stack([downsample_flow(f, factor) for f in b.flows[t0 : t0 + clip_len - 1]]))
            ms.append(torch.stack([downsample_mask(m, factor) for m in b.masks[t0 : t0 + clip_len - 1]]))
        return torch.stack(xs).to(dtype), torch.stack(fs).to(dtype), torch.stack(ms).to(dtype)


@dataclass
class TrainLog:
    columns: list[str]
    rows: list[list[float]] = field(default_factory=list)

    def add(self, step: int, values: dict[str, float]):
        self.rows.append([step] + [values[c] for c in self.columns[1:]])

    def column(self, name: str) -> np.ndarray:
        return np.array([r[self.columns.index(name)] for r in self.rows], dtype=float)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(self.columns) + "\n")
            for r in self.rows:
                fh.write(",".join([str(int(r[0]))] + [f"{v:.8g}" for v in r[1:]]) + "\n")


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


def is_frozen(module: torch.nn.Module) -> bool:
    return not any(p.requires_grad for p in module.parameters())


# -- Stage I ----------------------------------------------------------------------


def train_codec(corpus: SyntheticCorpus, steps: int, seed: int = 0, batch: int = 16, clip_len: int = 2, weights: Stage1LossWeights | None = None, lr: float = 1e-3, codec: VQCodec | None = None, log_every: int = 10, restart_every: int = 50) -> tuple[VQCodec, TrainLog]:
    """Stage-I training; codebook entries unused for ``restart_every`` steps are re-seeded from encoder outputs."""
    weights = weights or Stage1LossWeights()
    torch.manual_seed(Rng(seed, (21,)).torch_seed())
    codec = codec or VQCodec()
    opt = make_adamw(codec.parameters(), lr=lr)
    rng = Rng(seed, (22,))
    log = TrainLog(["step", "total", "rec", "vq", "freq", "temp"])
    usage = torch.zeros(codec.codebook.shape[0])
    for step in range(steps):
        clips, flows, masks = corpus.clips(rng.child(step), batch, clip_len, codec.factor)
        losses = stage1_train_step(codec, opt, clips, flows, masks, weights)
        if restart_every:
            with torch.no_grad():
                zl = codec.encode(clips)
                usage += torch.bincount(codec.quantize(zl)[2].reshape(-1), minlength=usage.numel()).float()
                z = zl.movedim(-3, -1).reshape(-1, codec.latent_channels)
                if (step + 1) % restart_every == 0 and step + 1 < steps * 0.8:
                    dead = torch.nonzero(usage == 0).reshape(-1)
                    if dead.numel():
                        pick = torch.from_numpy(rng.child(step, 1).integers(0, z.shape[0], dead.numel()))
                        codec.codebook[dead] = z[pick]
                    usage.zero_()
        if step % log_every == 0 or step == steps - 1:
            log.add(step, losses)
    return freeze(codec), log


@torch.no_grad()
def latent_warp_error(codec: VQCodec, corpus: SyntheticCorpus, kind: str = "vi") -> float:
    """Mean occlusion-masked latent warping error over every adjacent pair of ``corpus``."""
    vals = []
    for i, b in enumerate(corpus.bundles):
        x = corpus.stream(i, kind)[:, None].to(next(codec.parameters()).dtype)
        z = codec.encode(x).double()
        for t in range(1, b.length):
            f = downsample_flow(b.flows[t - 1], codec.factor)
            m = downsample_mask(b.masks[t - 1], codec.factor)
            vals.append(float(temporal_loss(z[t - 1], z[t], f, m)))
    return float(np.mean(vals))


@torch.no_grad()
def latent_scale(codec: VQCodec, corpus: SyntheticCorpus) -> float:
    """``1 / std`` of the composite-target latents, so scaled latents have unit variance."""
    x = torch.cat([corpus.stream(i, "target") for i in range(len(corpus))])[:, None].float()
    return float(1.0 / codec.encode(x).std().clamp_min(1e-6))


@torch.no_grad()
def encode_targets(codec: VQCodec, corpus: SyntheticCorpus, scale: float) -> list[torch.Tensor]:
    with torch.no_grad():
        return [codec.encode(corpus.stream(i, "target")[:, None].float()) * scale for i in range(len(corpus))]


def encode_gain_bank(codec: VQCodec, corpus: SyntheticCorpus, scale: float, max_gain: float, levels: int = 5) -> list[torch.Tensor]:
    """Per sequence ``[levels, T, C, h, w]`` latents of the target under brightness gains in ``[-max_gain, max_gain]``."""
    gains = torch.linspace(-max_gain, max_gain, levels)
    out = []
    with torch.no_grad():
        for i in range(len(corpus)):
            frames = corpus.stream(i, "target").float()
            out.append(torch.stack([codec.encode((frames * (1 + g)).clamp(0, 1)[:, None]) * scale for g in gains]))
    return out


# -- history prior -------------------------------------------------------------


@dataclass
class PriorSettings:
    steps: int = 3000
    batch: int = 32
    lr: float = 1e-3
    history: int = 8
    p_empty: float = 0.15  # no history at all
    p_baseline: float = 0.15  # all slots replaced by noise, tagged level 1
    p_last_only: float = 0.15  # only the most recent slot visible
    slot_noise: float = 0.05  # max level of the per-slot modulation on clean history
    degrade_gain: float = 0.2  # max per-slot brightness perturbation of history latents
    degrade_noise: float = 0.2  # max per-slot additive latent noise (untagged)


def _v_target(x0, eps, a, s):
    return a * eps - s * x0


def history_batch(latents: list[torch.Tensor], rng: Rng, batch: int, settings: PriorSettings, bank: list[torch.Tensor] | None = None):
    """Sample (clean current latent, history window, levels, validity, sequence index, frame index).

    History slots carry untagged perturbations (brightness gain applied in
    pixel space, drawn from ``bank``, plus latent noise) so the prior
    learns to treat its own past outputs as imperfect evidence.
    """
    cap = settings.history
    c, h, w = latents[0].shape[1:]
    x0 = torch.zeros(batch, c, h, w)
    hist = torch.zeros(batch, cap, c, h, w)
    levels = torch.zeros(batch, cap)
    valid = torch.zeros(batch, cap, dtype=torch.bool)
    idx = []
    for j in range(batch):
        r = rng.child(j)
        i = int(r.integers(0, len(latents)))
        lat = latents[i]
        t = int(r.integers(0, lat.shape[0]))
        x0[j] = lat[t]
        idx.append((i, t))
        n = min(t, cap)
        mode = r.uniform(0, 1)
        if n == 0 or mode < settings.p_empty:
            continue
        slots = lat[t - n : t].clone()
        if bank is not None:
            pick = torch.from_numpy(r.child(1).integers(0, bank[i].shape[0], n))
            slots = bank[i][pick, torch.arange(t - n, t)].clone()
        amp = settings.degrade_noise * float(r.uniform(0, 1))
        slots = slots + amp * torch.from_numpy(r.child(2).normal(slots.shape)).float()
        if mode < settings.p_empty + settings.p_baseline:
            slots = torch.from_numpy(r.child(3).normal(slots.shape)).float()
            lv = torch.ones(n)
            ok = torch.ones(n, dtype=torch.bool)
        else:
            lv = torch.from_numpy(r.child(4).uniform(0, settings.slot_noise, n)).float() * float(r.uniform(0, 1) < 0.7)
            noise = torch.from_numpy(r.child(5).normal(slots.shape)).float()
            slots = torch.sqrt(1 - lv**2)[:, None, None, None] * slots + lv[:, None, None, None] * noise
            ok = torch.ones(n, dtype=torch.bool)
            if mode < settings.p_empty + settings.p_baseline + settings.p_last_only:
                ok[:-1] = False
                slots[:-1] = 0
                lv[:] = 0
        hist[j, cap - n :] = slots
        levels[j, cap - n :] = lv
        valid[j, cap - n :] = ok
    return x0, hist, levels, valid, idx


def noisy_current(x0: torch.Tensor, rng: Rng):
    b = x0.shape[0]
    t = torch.from_numpy(rng.child(0).uniform(0.0, 1.0, b)).float().clamp_min(1e-3)
    a = cosine_alpha(t).float().clamp(0, 1)
    s = torch.sqrt(1 - a**2)
    eps = torch.from_numpy(rng.child(1).normal(x0.shape)).float()
    a4, s4 = a[:, None, None, None], s[:, None, None, None]
    return a4 * x0 + s4 * eps, s, _v_target(x0, eps, a4, s4), a4, s4


def train_prior(codec: VQCodec, corpus: SyntheticCorpus, scale: float, settings: PriorSettings | None = None, seed: int = 0, denoiser: TemporalDenoiser | None = None, log_every: int = 25) -> tuple[TemporalDenoiser, TrainLog]:
    settings = settings or PriorSettings()
    torch.manual_seed(Rng(seed, (31,)).torch_seed())
    denoiser = denoiser or TemporalDenoiser()
    latents = encode_targets(codec, corpus, scale)
    bank = encode_gain_bank(codec, corpus, scale, settings.degrade_gain) if settings.degrade_gain > 0 else None
    opt = make_adamw(denoiser.parameters(), lr=settings.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda i: min(1.0, (i + 1) / 100) * 0.5 * (1 + math.cos(math.pi * i / max(settings.steps, 1))))
    rng = Rng(seed, (32,))
    log = TrainLog(["step", "loss"])
    denoiser.train()
    for step in range(settings.steps):
        r = rng.child(step)
        x0, hist, levels, valid, _ = history_batch(latents, r.child(0), settings.batch, settings, bank)
        z, lvl, v_t, _, _ = noisy_current(x0, r.child(1))
        loss = ((denoiser(z, lvl, hist, levels, valid) - v_t) ** 2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(denoiser.parameters(), 1.0)
        opt.step()
        sched.step()
        if step % log_every == 0 or step == settings.steps - 1:
            log.add(step, {"loss": float(loss.detach())})
    return freeze(denoiser), log


# -- Stage II ---------------------------------------------------------------------


@dataclass
class Stage2Batch:
    z: torch.Tensor  # noisy current latents [B, C, h, w]
    level: torch.Tensor  # [B]
    alpha: torch.Tensor  # [B, 1, 1, 1]
    sigma: torch.Tensor
    hist: torch.Tensor
    hist_levels: torch.Tensor
    hist_valid: torch.Tensor
    ir: torch.Tensor  # adapter input [B, 1, H, W]
    target: torch.Tensor  # [B, 1, H, W]
    ir_ref: torch.Tensor
    vi_ref: torch.Tensor


def stage2_batch(latents, corpus: SyntheticCorpus, rng: Rng, batch: int, settings: PriorSettings, bank=None) -> Stage2Batch:
    x0, hist, levels, valid, idx = history_batch(latents, rng.child(0), batch, settings, bank)
    z, lvl, _, a4, s4 = noisy_current(x0, rng.child(1))

    def frames(kind):
        return torch.stack([corpus.stream(i, kind)[t] for i, t in idx])[:, None].float()

    return Stage2Batch(z, lvl, a4, s4, hist, levels, valid, frames("ir"), frames("target"), frames("ir_clean"), frames("vi_clean"))


def stage2_train_step(batch: Stage2Batch, models: FusionModels, weights: Stage2LossWeights, optimizer, train_denoiser: bool = False, use_adapter: bool = True) -> dict[str, float]:
    """One step of the structural objective on decoded one-step predictions.

    The codec must be frozen.  Only the adapter is updated unless
    ``train_denoiser`` is set (the optimizer decides what actually moves).
    """
    if not is_frozen(models.codec):
        raise ValueError("the codec must be frozen during Stage II")
    if not train_denoiser and not is_frozen(models.denoiser):
        raise ValueError("the denoiser must be frozen unless train_denoiser is set")
    c_struct = models.adapter(batch.ir) if (use_adapter and models.adapter is not None) else None
    v = models.denoiser(batch.z, batch.level, batch.hist, batch.hist_levels, batch.hist_valid, c_struct)
    z0 = batch.alpha * batch.z - batch.sigma * v
    pred = models.codec.decode(z0 / models.latent_scale)
    losses = stage2_objective(pred, batch.target, batch.ir_ref, batch.vi_ref, weights, feature_fn=models.codec.encode)
    optimizer.zero_grad(set_to_none=True)
    if losses["total"].requires_grad:
        losses["total"].backward()
        optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}


@dataclass
class Stage2Settings:
    steps: int = 600
    batch: int = 16
    lr: float = 1e-3
    weights: Stage2LossWeights = field(default_factory=Stage2LossWeights)


def train_adapter(models: FusionModels, corpus: SyntheticCorpus, settings: Stage2Settings | None = None, prior: PriorSettings | None = None, seed: int = 0, log_every: int = 25, train_denoiser: bool = False) -> tuple[ConditionAdapter, TrainLog]:
    settings = settings or Stage2Settings()
    prior = prior or PriorSettings()
    torch.manual_seed(Rng(seed, (41,)).torch_seed())
    if models.adapter is None:
        models.adapter = ConditionAdapter(width=models.denoiser.config.width)
    latents = encode_targets(models.codec, corpus, models.latent_scale)
    bank = encode_gain_bank(models.codec, corpus, models.latent_scale, prior.degrade_gain) if prior.degrade_gain > 0 else None
    params = list(models.adapter.parameters()) + (list(models.denoiser.parameters()) if train_denoiser else [])
    if train_denoiser:
        for p in models.denoiser.parameters():
            p.requires_grad_(True)
    opt = make_adamw(params, lr=settings.lr)
    rng = Rng(seed, (42,))
    log = TrainLog(["step", "total", "perc", "ssim", "grad", "int"])
    models.adapter.train()
    for step in range(settings.steps):
        b = stage2_batch(latents, corpus, rng.child(step), settings.batch, prior, bank)
        losses = stage2_train_step(b, models, settings.weights, opt, train_denoiser=train_denoiser)
        if step % log_every == 0 or step == settings.steps - 1:
            log.add(step, losses)
    freeze(models.adapter)
    if train_denoiser:
        freeze(models.denoiser)
    return models.adapter, log


@torch.no_grad()
def stage2_eval(models: FusionModels, corpus: SyntheticCorpus, seed: int = 0, batches: int = 4, batch: int = 16, use_adapter: bool = True, weights: Stage2LossWeights | None = None, prior: PriorSettings | None = None) -> float:
    """Mean structural objective on held-out batches (same draws for any ``use_adapter``)."""
    weights = weights or Stage2LossWeights()
    prior = prior or PriorSettings()
    latents = encode_targets(models.codec, corpus, models.latent_scale)
    bank = encode_gain_bank(models.codec, corpus, models.latent_scale, prior.degrade_gain) if prior.degrade_gain > 0 else None
    rng = Rng(seed, (43,))
    vals = []
    for i in range(batches):
        b = stage2_batch(latents, corpus, rng.child(i), batch, prior, bank)
        c = models.adapter(b.ir) if (use_adapter and models.adapter is not None) else None
        v = models.denoiser(b.z, b.level, b.hist, b.hist_levels, b.hist_valid, c)
        pred = models.codec.decode((b.alpha * b.z - b.sigma * v) / models.latent_scale)
        vals.append(float(stage2_objective(pred, b.target, b.ir_ref, b.vi_ref, weights, models.codec.encode)["total"]))
    return float(np.mean(vals))


def train_all(corpus: SyntheticCorpus, seed: int = 0, codec_steps: int = 800, prior: PriorSettings | None = None, stage2: Stage2Settings | None = None, progress: Callable[[str], None] | None = None) -> FusionModels:
    """Codec, prior and adapter in sequence with default settings."""
    say = progress or (lambda msg: None)
    codec, _ = train_codec(corpus, codec_steps, seed=seed)
    say("codec trained")
    scale = latent_scale(codec, corpus)
    den, _ = train_prior(codec, corpus, scale, prior, seed=seed)
    say("prior trained")
    models = FusionModels(codec, den, None, scale)
    train_adapter(models, corpus, stage2, prior, seed=seed)
    say("adapter trained")
    return models
