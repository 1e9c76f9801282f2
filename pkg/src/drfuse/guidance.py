"""History modulation, the three history configurations and guidance composition."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from .numerics import Rng, seeded_gaussian


class HistoryVariant(str, Enum):
    BASELINE = "baseline"  # every slot pure noise
    STABILIZED = "stabilized"  # every slot lightly modulated
    CONTEXT_SUPPRESSED = "context_suppressed"  # only the most recent frame kept


@dataclass
class GuidanceSettings:
    scale: float = 2.0
    sigma_stab: float = 0.02

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if not 0.0 <= self.sigma_stab <= 1.0:
            raise ValueError("sigma_stab must lie in [0, 1]")


def modulation_coefficients(level: float) -> tuple[float, float]:
    """Variance-preserving ``(alpha, sigma)`` for a modulation level in [0, 1]."""
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"modulation level must lie in [0, 1], got {level}")
    return math.sqrt(1.0 - level * level), float(level)


def modulate(z: torch.Tensor, level: float, rng: Rng) -> torch.Tensor:
    """``alpha * z + sigma * eps`` with fresh ``eps`` from ``rng``."""
    alpha, sigma = modulation_coefficients(level)
    eps = seeded_gaussian(z.shape, rng, dtype=z.dtype)
    return alpha * z + sigma * eps


@dataclass
class HistoryConfig:
    variant: HistoryVariant
    slots: torch.Tensor  # [L, C, h, w]
    levels: torch.Tensor  # [L] modulation level tag per slot
    valid: torch.Tensor  # [L] bool; False slots are masked out of attention

    def __len__(self):
        return self.slots.shape[0]

    @property
    def window_frames(self) -> int:
        """Frames visible to attention: valid history slots plus the current frame."""
        return int(self.valid.sum()) + 1


def make_history_config(history: torch.Tensor, variant: HistoryVariant, settings: GuidanceSettings, rng: Rng, capacity: int = 8) -> HistoryConfig:
    """Build one of the three modulated history views of ``history`` ``[L, C, h, w]`` (oldest first)."""
    variant = HistoryVariant(variant)
    n = history.shape[0]
    if n > capacity:
        raise ValueError(f"history length {n} exceeds the window capacity {capacity}")
    dtype = history.dtype
    if variant is HistoryVariant.BASELINE:
        slots = (
            torch.stack([seeded_gaussian(history.shape[1:], rng.child(j), dtype=dtype) for j in range(n)])
            if n
            else history.clone()
        )
        levels = torch.ones(n, dtype=dtype)
        valid = torch.ones(n, dtype=torch.bool)
    elif variant is HistoryVariant.STABILIZED:
        slots = (
            torch.stack([modulate(history[j], settings.sigma_stab, rng.child(j)) for j in range(n)])
            if n
            else history.clone()
        )
        levels = torch.full((n,), settings.sigma_stab, dtype=dtype)
        valid = torch.ones(n, dtype=torch.bool)
    else:
        if n == 0:
            raise ValueError("context suppression needs at least one history frame")
        slots = torch.zeros_like(history)
        slots[-1] = history[-1]
        levels = torch.zeros(n, dtype=dtype)
        valid = torch.zeros(n, dtype=torch.bool)
        valid[-1] = True
    return HistoryConfig(variant, slots, levels, valid)


def compose_guidance(v0: torch.Tensor, v1: torch.Tensor, v2: torch.Tensor, scale: float) -> torch.Tensor:
    """Guided velocity ``v0 + scale * (v1 - v2)``."""
    if not (v0.shape == v1.shape == v2.shape):
        raise ValueError("velocity estimates must share a shape")
    return v0 + scale * (v1 - v2)


# -- spectral view of the modulation operator ---------------------------------


def radial_bands(shape: tuple[int, int], n_bands: int) -> tuple[np.ndarray, np.ndarray]:
    """Band index per DFT bin (radial frequency in cycles/sample) and band edges."""
    fy = np.fft.fftfreq(shape[0])[:, None]
    fx = np.fft.fftfreq(shape[1])[None, :]
    r = np.sqrt(fx**2 + fy**2)
    edges = np.linspace(0.0, r.max() + 1e-12, n_bands + 1)
    idx = np.clip(np.searchsorted(edges, r, side="right") - 1, 0, n_bands - 1)
    return idx, edges


@dataclass
class BandRow:
    band_low: float
    band_high: float
    retention: float
    corruption: float
    predicted: float


def spectral_attenuation_report(z: torch.Tensor, level: float, rng: Rng, trials: int = 1000, n_bands: int = 8) -> list[BandRow]:
    """Per radial band: retained signal power ``alpha^2`` and the noise-to-signal
    ratio ``sigma^2 / (alpha^2 P_z(band))``, measured by Monte Carlo over
    ``trials`` draws of the modulation noise (``predicted`` holds the closed form).
    """
    if z.dim() != 2:
        raise ValueError("spectral report needs a 2-D latent")
    if trials < 100:
        raise ValueError("need at least 100 trials")
    z = z.double()
    zf = torch.fft.fft2(z, norm="ortho")
    p_z = (zf.real**2 + zf.imag**2).numpy()
    if not np.any(p_z > 0):
        raise ValueError("trivial (all-zero) spectrum")
    alpha, sigma = modulation_coefficients(level)
    idx, edges = radial_bands(tuple(z.shape), n_bands)

    noise_power = np.zeros(n_bands)
    signal_ret = np.zeros(n_bands)
    counts = np.bincount(idx.ravel(), minlength=n_bands).astype(float)
    p_band = np.bincount(idx.ravel(), weights=p_z.ravel(), minlength=n_bands) / np.maximum(counts, 1)
    for i in range(trials):
        y = modulate(z, level, rng.child(i))
        yf = torch.fft.fft2(y, norm="ortho")
        nf = (yf - alpha * zf).numpy()
        sf = (alpha * zf).numpy()
        noise_power += np.bincount(idx.ravel(), weights=np.abs(nf).ravel() ** 2, minlength=n_bands)
        signal_ret += np.bincount(idx.ravel(), weights=np.abs(sf).ravel() ** 2, minlength=n_bands)
    noise_power /= trials * np.maximum(counts, 1)
    signal_ret /= trials * np.maximum(counts, 1)

    rows = []
    for b in range(n_bands):
        if counts[b] == 0:
            continue
        ret = signal_ret[b] / p_band[b] if p_band[b] > 0 else 1.0
        if alpha == 0 or p_band[b] == 0:
            corr = pred = math.inf if sigma > 0 else 0.0
        else:
            corr = noise_power[b] / (alpha**2 * p_band[b])
            pred = sigma**2 / (alpha**2 * p_band[b])
        rows.append(BandRow(float(edges[b]), float(edges[b + 1]), float(ret), float(corr), float(pred)))
    return rows


def write_spectral_csv(path, rows: list[BandRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["band_low", "band_high", "retention", "corruption"])
        for r in rows:
            w.writerow([f"{r.band_low:.6g}", f"{r.band_high:.6g}", f"{r.retention:.6g}", f"{r.corruption:.6g}"])


def power_law_field(shape: tuple[int, int], exponent: float, rng: Rng) -> torch.Tensor:
    """Real 2-D field whose power spectrum is exactly ``|f|^-exponent`` (random phases, zero mean)."""
    fy = np.fft.fftfreq(shape[0])[:, None]
    fx = np.fft.fftfreq(shape[1])[None, :]
    f = np.sqrt(fx**2 + fy**2)
    f[0, 0] = np.inf
    white = np.fft.fft2(rng.normal(shape))
    phase = white / np.maximum(np.abs(white), 1e-300)
    field = np.real(np.fft.ifft2(phase * f ** (-exponent / 2)))
    return torch.from_numpy(field / field.std())
