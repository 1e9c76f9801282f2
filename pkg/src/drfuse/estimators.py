"""scikit-learn style wrappers around the codec and the full fusion pipeline."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .codec import Stage1LossWeights
from .config import RunConfig
from .checkpoints import build_codec
from .sampler import FusionModels, FusionRunReport, SamplerSettings, rollout
from .training import PriorSettings, Stage2Settings, SyntheticCorpus, latent_scale, train_adapter, train_codec, train_prior


def check_frames(x, name: str = "frames", min_size: int = 1) -> torch.Tensor:
    """Validate a stack of frames ``[N, H, W]`` with finite values in [0, 1]."""
    t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if t.dim() != 3:
        raise ValueError(f"{name} must have shape [N, H, W], got {tuple(t.shape)}")
    if t.shape[0] < 1 or min(t.shape[1:]) < min_size:
        raise ValueError(f"{name} is empty or smaller than {min_size}x{min_size}")
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")
    if t.min() < 0 or t.max() > 1:
        raise ValueError(f"{name} must lie in [0, 1]")
    return t


def check_sequence_pair(ir, vi) -> tuple[torch.Tensor, torch.Tensor]:
    ir, vi = check_frames(ir, "ir"), check_frames(vi, "vi")
    if ir.shape != vi.shape:
        raise ValueError(f"IR {tuple(ir.shape)} and VI {tuple(vi.shape)} sequences are not aligned")
    return ir, vi


def check_corpus(corpus) -> SyntheticCorpus:
    if isinstance(corpus, SyntheticCorpus):
        out = corpus
    else:
        out = SyntheticCorpus(list(corpus))
    if len(out) == 0:
        raise ValueError("training corpus is empty")
    return out


class LatentCodec(BaseEstimator, TransformerMixin):
    """Stage-I codec: ``fit`` on a synthetic corpus, ``transform`` frames to scaled latents."""

    def __init__(self, latent_channels=8, factor=4, codebook_size=64, hidden=32, lambda_vq=1.0, beta=0.25, lambda_freq=0.1, lambda_temp=1.0, steps=1500, batch=16, lr=1e-3, seed=0):
        self.latent_channels = latent_channels
        self.factor = factor
        self.codebook_size = codebook_size
        self.hidden = hidden
        self.lambda_vq = lambda_vq
        self.beta = beta
        self.lambda_freq = lambda_freq
        self.lambda_temp = lambda_temp
        self.steps = steps
        self.batch = batch
        self.lr = lr
        self.seed = seed

    def fit(self, X, y=None):
        corpus = check_corpus(X)
        cfg = RunConfig(latent_channels=self.latent_channels, downsample=self.factor, codebook_size=self.codebook_size, codec_hidden=self.hidden, patch=1, frame_size=corpus.bundles[0].ir.shape[-1])
        weights = Stage1LossWeights(vq=self.lambda_vq, freq=self.lambda_freq, temp=self.lambda_temp, beta=self.beta)
        self.codec_, self.log_ = train_codec(corpus, self.steps, seed=self.seed, batch=self.batch, weights=weights, lr=self.lr, codec=build_codec(cfg))
        self.latent_scale_ = latent_scale(self.codec_, corpus)
        return self

    def transform(self, X):
        check_is_fitted(self, "codec_")
        x = check_frames(X, min_size=self.factor)
        with torch.no_grad():
            return (self.codec_.encode(x[:, None].float()) * self.latent_scale_).double()

    def inverse_transform(self, Z):
        check_is_fitted(self, "codec_")
        z = torch.as_tensor(Z).float()
        if z.dim() != 4 or z.shape[1] != self.latent_channels:
            raise ValueError(f"latents must have shape [N, {self.latent_channels}, h, w]")
        with torch.no_grad():
            return self.codec_.decode(z / self.latent_scale_)[:, 0].double()


class DRFusion(BaseEstimator):
    """Full pipeline: codec, history prior and IR adapter; ``predict`` runs the guided rollout."""

    def __init__(self, codec=None, history=8, prior_steps=3000, prior_batch=32, stage2_steps=600, stage2_batch=16, lr=1e-3, steps=50, scale=2.0, sigma_stab=0.02, n_ref=5, gamma=0.3, lambda_reg=1.0, seed=0, threads=1):
        self.codec = codec
        self.history = history
        self.prior_steps = prior_steps
        self.prior_batch = prior_batch
        self.stage2_steps = stage2_steps
        self.stage2_batch = stage2_batch
        self.lr = lr
        self.steps = steps
        self.scale = scale
        self.sigma_stab = sigma_stab
        self.n_ref = n_ref
        self.gamma = gamma
        self.lambda_reg = lambda_reg
        self.seed = seed
        self.threads = threads

    def _config(self) -> RunConfig:
        return RunConfig(history=self.history, steps=self.steps, scale=self.scale, sigma_stab=self.sigma_stab, n_ref=self.n_ref, gamma=self.gamma, lambda_reg=self.lambda_reg, seed=self.seed)

    def fit(self, X, y=None):
        corpus = check_corpus(X)
        codec = self.codec if self.codec is not None else LatentCodec(seed=self.seed)
        if not hasattr(codec, "codec_"):
            codec = codec.fit(corpus)
        self.codec_ = codec
        prior = PriorSettings(steps=self.prior_steps, batch=self.prior_batch, lr=self.lr, history=self.history)
        den, self.prior_log_ = train_prior(codec.codec_, corpus, codec.latent_scale_, prior, seed=self.seed, denoiser=None)
        self.models_ = FusionModels(codec.codec_, den, None, codec.latent_scale_)
        _, self.stage2_log_ = train_adapter(self.models_, corpus, Stage2Settings(steps=self.stage2_steps, batch=self.stage2_batch, lr=self.lr), prior, seed=self.seed)
        return self

    def sampler_settings(self, **overrides) -> SamplerSettings:
        s = self._config().sampler(self.threads)
        for k, v in overrides.items():
            setattr(s, k, v)
        return s

    def predict(self, X, vi=None, **overrides):
        """Fuse ``(ir, vi)`` sequences ``[T, H, W]``; extra keywords override sampler settings."""
        fused, self.report_ = self.predict_with_report(X, vi, **overrides)
        return fused.numpy()

    def predict_with_report(self, X, vi=None, flows=None, masks=None, reference=None, **overrides) -> tuple[torch.Tensor, FusionRunReport]:
        if not hasattr(self, "models_"):
            raise NotFittedError("DRFusion is not fitted yet; call fit first")
        ir, vi = check_sequence_pair(*(X if vi is None else (X, vi)))
        return rollout(ir, vi, self.models_, self.sampler_settings(**overrides), self.seed, flows, masks, reference)
