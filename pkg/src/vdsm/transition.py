"""Gated transition prior p(z_t | z_{t-1}, d)."""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn

from .distributions import DiagGaussian, positive_scale, sample_reparameterized


class Transition(nn.Module):
    def __init__(self, kappa_z: int, kappa_d: int, hidden: int = 16):
        super().__init__()
        self.kappa_z = kappa_z
        self.kappa_d = kappa_d
        inp = kappa_z + kappa_d
        self.f1 = nn.Linear(inp, hidden)
        self.f2 = nn.Linear(hidden, kappa_z)
        self.f3 = nn.Linear(inp, hidden)
        self.f4 = nn.Linear(hidden, kappa_z)
        self.f5 = nn.Linear(inp, kappa_z)
        self.f6 = nn.Linear(kappa_z, kappa_z)
        nn.init.zeros_(self.f2.bias)

    def gate(self, zd: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.f2(torch.relu(self.f1(zd))))

    def forward(self, z_prev: torch.Tensor, d: torch.Tensor) -> DiagGaussian:
        if z_prev.shape[-1] != self.kappa_z or d.shape[-1] != self.kappa_d:
            raise ValueError(
                f"transition expects z of dim {self.kappa_z} and d of dim {self.kappa_d}, "
                f"got {z_prev.shape[-1]} and {d.shape[-1]}"
            )
        zd = torch.cat([z_prev, d], dim=-1)
        g = self.gate(zd)
        h = self.f4(torch.relu(self.f3(zd)))
        loc = g * h + (1.0 - g) * self.f5(zd)
        scale = positive_scale(self.f6(torch.relu(h)))
        return DiagGaussian(loc, scale)

    transition_step = forward

    def rollout(self, z1: torch.Tensor, d: torch.Tensor, steps: int, noise: Sequence[torch.Tensor]) -> torch.Tensor:
        """Ancestral sample of z_{1:T}; ``noise`` holds T-1 standard-normal draws.

        Returns a tensor with the time axis inserted before the last dimension.
        """
        if steps < 1:
            raise ValueError(f"need at least one step, got {steps}")
        if len(noise) != steps - 1:
            raise ValueError(f"rollout of {steps} steps needs {steps - 1} noise vectors, got {len(noise)}")
        zs = [z1]
        for eps in noise:
            zs.append(sample_reparameterized(self(zs[-1], d), eps))
        return torch.stack(zs, dim=-2)
