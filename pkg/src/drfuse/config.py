"""Flat ``key = value`` run configuration with typed, documented defaults."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .codec import Stage1LossWeights
from .denoiser import DenoiserConfig, Stage2LossWeights
from .guidance import GuidanceSettings
from .sampler import RefinementSettings, SamplerSettings


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # synthetic data
    seed: int = 0
    frame_size: int = 32
    length: int = 16
    n_objects: int = 2
    max_speed: int = 1
    flicker: float = 0.2
    ir_noise: float = 0.01
    train_sequences: int = 32
    # codec
    latent_channels: int = 8
    downsample: int = 4
    codebook_size: int = 64
    codec_hidden: int = 32
    lambda_vq: float = 1.0
    beta: float = 0.25
    lambda_freq: float = 0.1
    lambda_temp: float = 1.0
    stage1_steps: int = 1500
    stage1_batch: int = 16
    # denoiser
    width: int = 64
    heads: int = 4
    blocks: int = 4
    patch: int = 2
    history: int = 8
    prior_steps: int = 3000
    prior_batch: int = 32
    # stage II
    lambda_perc: float = 0.1
    lambda_ssim: float = 1.0
    lambda_grad: float = 1.0
    lambda_int: float = 1.0
    stage2_steps: int = 600
    stage2_batch: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    # sampling
    steps: int = 50
    scale: float = 2.0
    sigma_stab: float = 0.02
    n_ref: int = 5
    gamma: float = 0.3
    lambda_reg: float = 1.0
    refine_steps: int = 10
    refine_step_size: float = 0.1
    w_grad: float = 1.0
    w_int: float = 1.0
    strength: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int) and (isinstance(v, bool) or not isinstance(v, int)):
                raise ConfigError(f"{f.name} must be an integer")
            if f.type in ("float", float):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError(f"{f.name} must be a number")
                setattr(self, f.name, float(v))
        if self.frame_size % (self.downsample * self.patch):
            raise ConfigError("frame_size must be divisible by downsample * patch")
        if self.history < 1 or self.steps < 1 or self.n_ref < 1:
            raise ConfigError("history, steps and n_ref must be >= 1")
        if not 0.0 < self.strength <= 1.0:
            raise ConfigError("strength must lie in (0, 1]")
        try:
            self.guidance()
            self.refinement()
            self.stage1_weights()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # -- typed views -----------------------------------------------------------

    def guidance(self) -> GuidanceSettings:
        return GuidanceSettings(self.scale, self.sigma_stab)

    def refinement(self) -> RefinementSettings:
        return RefinementSettings(gamma=self.gamma, reg=self.lambda_reg, steps=self.refine_steps, step_size=self.refine_step_size, every=self.n_ref, w_grad=self.w_grad, w_int=self.w_int)

    def sampler(self, threads: int = 1) -> SamplerSettings:
        return SamplerSettings(steps=self.steps, history=self.history, guidance=self.guidance(), refinement=self.refinement(), threads=threads, strength=self.strength)

    def stage1_weights(self) -> Stage1LossWeights:
        return Stage1LossWeights(vq=self.lambda_vq, freq=self.lambda_freq, temp=self.lambda_temp, beta=self.beta)

    def stage2_weights(self) -> Stage2LossWeights:
        return Stage2LossWeights(perc=self.lambda_perc, ssim=self.lambda_ssim, grad=self.lambda_grad, int=self.lambda_int)

    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(self.latent_channels, self.frame_size // self.downsample, self.patch, self.width, self.heads, self.blocks, self.history)

    # -- text form ---------------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def replace(self, **overrides) -> "RunConfig":
        return parse_config_lines([f"{k} = {v}" for k, v in overrides.items()], base=self)


def _coerce(name: str, kind, raw: str):
    try:
        if kind in ("int", int):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config_lines(lines, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` comments, blank lines allowed) over ``base``."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {f.name: getattr(base or RunConfig(), f.name) for f in fields(RunConfig)}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    return RunConfig(**values)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    return parse_config_lines(text.splitlines(), base)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
