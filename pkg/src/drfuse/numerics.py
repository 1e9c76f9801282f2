"""Dense tensor helpers, seeded randomness and a finite-difference gradient checker.

Tensors are ``torch.Tensor`` objects; torch autograd plays the role of the
reverse-mode tape.  Everything numerically sensitive runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

DTYPE = torch.float64


class Rng:
    """Counter-based deterministic generator (numpy Philox).

    Child streams are derived from ``(seed, key...)`` via ``SeedSequence``
    spawn keys, so a draw never depends on how many draws other streams made
    or on the order in which threads consume them.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=self.key))
        )

    algorithm = "philox4x64-10"

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(key))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal((shape,) if isinstance(shape, int) else tuple(shape))

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def torch_seed(self) -> int:
        """A 63-bit seed for torch generators (parameter init, data shuffles)."""
        return int(self._gen.integers(0, 2**63 - 1))

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"


def _check_dims(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ValueError(f"shape must have positive dimensions, got {shape}")
    return shape


def seeded_gaussian(shape, rng: Rng, dtype=DTYPE) -> torch.Tensor:
    """I.i.d. standard-normal tensor drawn from ``rng``."""
    shape = _check_dims(shape)
    return torch.from_numpy(rng.normal(shape)).to(dtype)


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return x


def softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 0 or x.shape[-1] < 1:
        raise ValueError("softmax needs a non-empty last dimension")
    shifted = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def power_spectrum_2d(x: torch.Tensor) -> torch.Tensor:
    """Squared magnitude of the unnormalized 2-D DFT.

    Parseval: ``spectrum.sum() == x.numel() * (x**2).sum()``.
    """
    if x.dim() != 2:
        raise ValueError(f"power_spectrum_2d expects a 2-D tensor, got {x.dim()}-D")
    spec = torch.fft.fft2(x)
    return spec.real**2 + spec.imag**2


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g}, n={self.rel_error.size})"


def grad_check(
    f: Callable[..., torch.Tensor],
    inputs,
    eps: float = 1e-6,
    tol: float = 1e-4,
    atol: float = 1e-7,
    max_coords: int | None = None,
    rng: Rng | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``f(*inputs)`` with central differences.

    ``inputs`` is a tensor or a sequence of tensors; finite differences are
    taken on private copies.  The relative error per
    coordinate is ``|a - n| / (max(|a|, |n|) + atol)``.  ``max_coords`` checks a
    random subset of coordinates drawn from ``rng``.
    """
    if isinstance(inputs, torch.Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != torch.float64:
            raise TypeError("grad_check requires float64 tensors")

    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    with torch.enable_grad():
        out = f(*leaves)
        if not isinstance(out, torch.Tensor) or out.numel() != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        grads = torch.autograd.grad(out.reshape(()), leaves, allow_unused=True)
    analytic = torch.cat(
        [
            (g if g is not None else torch.zeros_like(t)).reshape(-1)
            for g, t in zip(grads, leaves)
        ]
    ).numpy()

    sizes = [t.numel() for t in inputs]
    total = sum(sizes)
    coords = np.arange(total)
    if max_coords is not None and total > max_coords:
        rng = rng or Rng(0)
        coords = np.sort(rng._gen.choice(total, size=max_coords, replace=False))

    work = [t.detach().clone() for t in inputs]
    offsets = np.cumsum([0] + sizes)
    numeric = np.empty(len(coords))

    def evaluate():
        with torch.no_grad():
            return float(f(*work))

    for n, c in enumerate(coords):
        i = int(np.searchsorted(offsets, c, side="right") - 1)
        j = int(c - offsets[i])
        flat = work[i].view(-1)
        orig = flat[j].item()
        flat[j] = orig + eps
        fp = evaluate()
        flat[j] = orig - eps
        fm = evaluate()
        flat[j] = orig
        numeric[n] = (fp - fm) / (2 * eps)

    a = analytic[coords]
    rel = np.abs(a - numeric) / (np.maximum(np.abs(a), np.abs(numeric)) + atol)
    return GradCheckReport(analytic=a, numeric=numeric, rel_error=rel, tol=tol)


def grad_check_module(loss_fn: Callable[[], torch.Tensor], params, **kw) -> GradCheckReport:
    """grad_check over ``nn.Module`` parameters that ``loss_fn`` reads implicitly."""
    params = list(params)

    def f(*values):
        saved = [p.data for p in params]
        try:
            for p, v in zip(params, values):
                p.data = v.detach()
            if not values[0].requires_grad:
                return loss_fn()
            # route gradients from the module params back to the leaves
            out = loss_fn()
            gs = torch.autograd.grad(out, params, allow_unused=True)
            surrogate = sum(
                (g.detach() * v).sum() for g, v in zip(gs, values) if g is not None
            )
            return out.detach() + surrogate - surrogate.detach()
        finally:
            for p, s in zip(params, saved):
                p.data = s

    return grad_check(f, [p.detach().clone() for p in params], **kw)
