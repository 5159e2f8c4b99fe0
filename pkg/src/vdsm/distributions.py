"""Closed-form probabilistic primitives shared by every part of the model.

All functions operate on torch tensors with arbitrary leading batch
dimensions; the event dimension is always the last one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

SCALE_FLOOR = 1e-5
PIXEL_EPS = 1e-6


@dataclass
class DiagGaussian:
    """Diagonal Gaussian given by location and (strictly positive) scale."""

    loc: torch.Tensor
    scale: torch.Tensor

    def __post_init__(self):
        if self.loc.shape != self.scale.shape:
            raise ValueError(
                f"loc shape {tuple(self.loc.shape)} != scale shape {tuple(self.scale.shape)}"
            )

    @property
    def dim(self) -> int:
        return self.loc.shape[-1]

    def sample(self, noise: torch.Tensor) -> torch.Tensor:
        return sample_reparameterized(self, noise)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.loc.detach(), self.scale.detach())

    @classmethod
    def standard(cls, shape, scale: float = 1.0, like: torch.Tensor | None = None) -> "DiagGaussian":
        kw = {} if like is None else {"dtype": like.dtype, "device": like.device}
        loc = torch.zeros(shape, **kw)
        return cls(loc, torch.full_like(loc, scale))


def check_simplex(weights: torch.Tensor, atol: float = 1e-6) -> None:
    if (weights < 0).any():
        raise ValueError("simplex weights must be nonnegative")
    total = weights.sum(-1)
    if not torch.allclose(total, torch.ones_like(total), atol=atol, rtol=0.0):
        raise ValueError("simplex weights must sum to 1")


def softplus(x):
    """log(1 + exp(x)) without overflow; accepts floats or tensors."""
    if isinstance(x, torch.Tensor):
        return torch.relu(x) + torch.log1p(torch.exp(-x.abs()))
    x = float(x)
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def positive_scale(raw: torch.Tensor) -> torch.Tensor:
    return softplus(raw) + SCALE_FLOOR


def sample_reparameterized(g: DiagGaussian, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape[-1] != g.loc.shape[-1]:
        raise ValueError(f"noise dimension {noise.shape[-1]} != {g.loc.shape[-1]}")
    return g.loc + g.scale * noise


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """KL(q || p) summed over the event dimension."""
    if q.loc.shape[-1] != p.loc.shape[-1]:
        raise ValueError(f"dimension mismatch: {q.loc.shape[-1]} vs {p.loc.shape[-1]}")
    if (q.scale <= 0).any() or (p.scale <= 0).any():
        raise ValueError("scales must be strictly positive")
    var_ratio = (q.scale / p.scale) ** 2
    mahal = ((q.loc - p.loc) / p.scale) ** 2
    # log(p/q) written through the ratio keeps KL(q, q) exactly zero
    return (0.5 * (var_ratio + mahal - 1.0) - torch.log(q.scale / p.scale)).sum(-1)


def bernoulli_log_likelihood(x: torch.Tensor, p: torch.Tensor, eps: float = PIXEL_EPS) -> torch.Tensor:
    """Sum of x log p + (1-x) log(1-p) over every element.

    ``x`` may hold continuous intensities in [0, 1]. Probabilities are clamped
    to [eps, 1 - eps].
    """
    if x.shape != p.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(p.shape)}")
    p = p.clamp(eps, 1.0 - eps)
    return (x * torch.log(p) + (1.0 - x) * torch.log1p(-p)).sum()


def temperature_softmax(s: torch.Tensor, tau: float) -> torch.Tensor:
    """Mixture weights softmax(s * tau).

    ``tau`` acts as a sharpness multiplier: raising it concentrates the
    weights on the largest component.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return torch.softmax(s * tau, dim=-1)
