"""Seq2seq inference backbone: bi-LSTM summary -> dynamics d -> LSTM unroll -> combiner."""
from __future__ import annotations

import torch
import torch.nn as nn

from .distributions import DiagGaussian, positive_scale


class Seq2Seq(nn.Module):
    def __init__(
        self,
        kappa_z: int,
        kappa_d: int,
        hidden: int = 64,
        layers: int = 1,
        token_dim: int = 8,
    ):
        super().__init__()
        self.kappa_z = kappa_z
        self.kappa_d = kappa_d
        self.hidden = hidden
        self.layers = layers

        self.encoder = nn.LSTM(kappa_z, hidden, layers, batch_first=True, bidirectional=True)
        summary = 2 * layers * hidden
        self.d_loc = nn.Linear(summary, kappa_d)
        self.d_scale = nn.Linear(summary, kappa_d)

        self.init_state = nn.Linear(kappa_d, hidden)
        self.token = nn.Parameter(torch.zeros(token_dim))
        self.decoder = nn.LSTM(token_dim, hidden, layers, batch_first=True)

        comb = hidden + kappa_d
        self.f7 = nn.Linear(kappa_z, comb)
        self.f8 = nn.Linear(comb, kappa_z)
        self.f9 = nn.Linear(comb, kappa_z)

    def summarize_dynamics(self, pose_embeds: torch.Tensor) -> DiagGaussian:
        """Posterior over d from pose embeddings (B, T, kz) or (T, kz)."""
        single = pose_embeds.dim() == 2
        if single:
            pose_embeds = pose_embeds[None]
        if pose_embeds.shape[1] < 2:
            raise ValueError("dynamics need at least 2 frames")
        if pose_embeds.shape[-1] != self.kappa_z:
            raise ValueError(f"pose embeddings have dimension {pose_embeds.shape[-1]}, expected {self.kappa_z}")
        _, (h_n, _) = self.encoder(pose_embeds)
        h = h_n.transpose(0, 1).reshape(pose_embeds.shape[0], -1)
        out = DiagGaussian(self.d_loc(h), positive_scale(self.d_scale(h)))
        return DiagGaussian(out.loc[0], out.scale[0]) if single else out

    def unroll_decoder(self, d: torch.Tensor, steps: int) -> torch.Tensor:
        """Hidden states (B, T, hidden) of the decoder LSTM started from d.

        Every step consumes the same learned token, so everything the decoder
        knows about the sequence arrives through its initial state.
        """
        if steps < 1:
            raise ValueError(f"need at least one step, got {steps}")
        single = d.dim() == 1
        if single:
            d = d[None]
        h0 = self.init_state(d)[None].expand(self.layers, -1, -1).contiguous()
        tokens = self.token.expand(d.shape[0], steps, -1)
        out, _ = self.decoder(tokens, (h0, h0))
        return out[0] if single else out

    def combine(self, z_prev: torch.Tensor, h_bar: torch.Tensor, d: torch.Tensor) -> DiagGaussian:
        """Pose posterior q(z_t | z_{t-1}, h_bar_t, d)."""
        h_hat = torch.cat([h_bar, d], dim=-1)
        if z_prev.shape[-1] != self.kappa_z or h_hat.shape[-1] != self.f7.out_features:
            raise ValueError("combiner input dimensions do not match the configuration")
        c = 0.5 * (torch.tanh(self.f7(z_prev)) + h_hat)
        return DiagGaussian(self.f8(c), positive_scale(self.f9(c)))
