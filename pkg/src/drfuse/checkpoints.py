"""Checkpoint directories for the codec and the denoiser/adapter pair.

Each directory holds DRFT tensors, a ``manifest.txt`` and the ``config.txt``
that fixes the architecture, so a checkpoint reloads without side information.
"""

from __future__ import annotations

from pathlib import Path

import torch

from .codec import VQCodec
from .config import RunConfig, load_config
from .denoiser import ConditionAdapter, TemporalDenoiser
from .io import load_state_dict, save_state_dict
from .sampler import FusionModels
from .training import freeze


def build_codec(cfg: RunConfig) -> VQCodec:
    return VQCodec(1, cfg.latent_channels, cfg.downsample, cfg.codebook_size, cfg.codec_hidden)


def _prefixed(prefix: str, module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v.detach() for k, v in module.state_dict().items()}


def _load_prefixed(prefix: str, module: torch.nn.Module, state: dict[str, torch.Tensor]) -> None:
    own = {k[len(prefix) + 1 :]: v for k, v in state.items() if k.startswith(prefix + ".")}
    module.load_state_dict(own, strict=True)


def save_codec(directory, codec: VQCodec, cfg: RunConfig, latent_scale: float) -> None:
    save_state_dict(directory, _prefixed("codec", codec), {"stage": "1", "latent_scale": repr(float(latent_scale))})
    cfg.save(Path(directory) / "config.txt")


def load_codec(directory) -> tuple[VQCodec, float, RunConfig]:
    directory = Path(directory)
    state, extra = load_state_dict(directory)
    if extra.get("stage") != "1":
        raise ValueError(f"{directory} is not a stage-1 checkpoint")
    cfg = load_config(directory / "config.txt")
    codec = build_codec(cfg)
    _load_prefixed("codec", codec, state)
    return freeze(codec), float(extra["latent_scale"]), cfg


def save_fusion(directory, models: FusionModels, cfg: RunConfig) -> None:
    state = _prefixed("codec", models.codec) | _prefixed("denoiser", models.denoiser)
    if models.adapter is not None:
        state |= _prefixed("adapter", models.adapter)
    extra = {"stage": "2", "latent_scale": repr(float(models.latent_scale)), "adapter": str(int(models.adapter is not None))}
    save_state_dict(directory, state, extra)
    cfg.save(Path(directory) / "config.txt")


def load_fusion(directory) -> tuple[FusionModels, RunConfig]:
    directory = Path(directory)
    state, extra = load_state_dict(directory)
    if extra.get("stage") != "2":
        raise ValueError(f"{directory} is not a stage-2 checkpoint")
    cfg = load_config(directory / "config.txt")
    codec = build_codec(cfg)
    _load_prefixed("codec", codec, state)
    den = TemporalDenoiser(cfg.denoiser())
    _load_prefixed("denoiser", den, state)
    adapter = None
    if extra.get("adapter") == "1":
        adapter = ConditionAdapter(width=cfg.width, stride_total=cfg.downsample * cfg.patch)
        _load_prefixed("adapter", adapter, state)
        freeze(adapter)
    return FusionModels(freeze(codec), freeze(den), adapter, float(extra["latent_scale"])), cfg
