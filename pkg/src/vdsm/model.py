"""The full model: encoder, MoE decoder bank, seq2seq backbone and transition."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import torch
import torch.nn as nn

from .config import TrainConfig
from .distributions import DiagGaussian, temperature_softmax
from .encoder import FrameEncoder
from .moe import ExpertBank
from .seq2seq import Seq2Seq
from .transition import Transition


@dataclass
class Factors:
    """Posterior-mean factors of a batch of sequences."""

    s: torch.Tensor  # (B, ks)
    d: torch.Tensor  # (B, kd)
    z1: torch.Tensor  # (B, kz)


class VDSM(nn.Module):
    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        c = config
        self.encoder = FrameEncoder(
            c.frame_shape, c.kappa_z, c.kappa_s, c.enc_channels, c.identity_dim, c.blur
        )
        self.bank = ExpertBank(c.n_experts, c.kappa_s + c.kappa_z, c.frame_shape, c.dec_channels)
        self.seq2seq = Seq2Seq(c.kappa_z, c.kappa_d, c.rnn_hidden, c.rnn_layers, c.token_dim)
        self.transition = Transition(c.kappa_z, c.kappa_d, c.trans_hidden)

    @property
    def static_prior_scale(self) -> float:
        # N_s = kappa_s, also under the single-decoder ablation
        return 1.0 / self.config.kappa_s

    # -- parameter groups -------------------------------------------------

    def stage_two_trainable(self) -> Iterator[Tuple[str, nn.Parameter]]:
        """Parameters left trainable after pretraining.

        Everything sequential, plus the final encoder layers that parameterize
        the pose and static posteriors. The conv trunk, identity features and
        the whole expert bank stay frozen.
        """
        heads = tuple(f"encoder.{m}." for m in FrameEncoder.HEAD_MODULES)
        for name, p in self.named_parameters():
            if name.startswith(("seq2seq.", "transition.")) or name.startswith(heads):
                yield name, p

    def apply_stage_two_freeze(self) -> None:
        keep = {name for name, _ in self.stage_two_trainable()}
        for name, p in self.named_parameters():
            p.requires_grad_(name in keep)

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(True)

    def frozen_flags(self):
        return {name: not p.requires_grad for name, p in self.named_parameters()}

    # -- inference ---------------------------------------------------------

    def mixture(self, s: torch.Tensor, tau: float) -> torch.Tensor:
        if self.bank.n_experts == 1:
            return torch.ones(*s.shape[:-1], 1, dtype=s.dtype, device=s.device)
        return temperature_softmax(s, tau)

    def posteriors(self, frames: torch.Tensor) -> Tuple[DiagGaussian, DiagGaussian, DiagGaussian]:
        """(per-frame pose posterior, static posterior, dynamics posterior) for (B, T, C, H, W)."""
        enc = self.encoder(frames)
        s_dist = self.encoder.infer_static(enc.identity_features)
        d_dist = self.seq2seq.summarize_dynamics(enc.pose_params.loc)
        return enc.pose_params, s_dist, d_dist

    @torch.no_grad()
    def infer_factors(self, frames: torch.Tensor) -> Factors:
        _, s_dist, d_dist = self.posteriors(frames)
        d = d_dist.loc
        h_bar = self.seq2seq.unroll_decoder(d, 1)[:, 0]
        z0 = d.new_zeros(d.shape[0], self.config.kappa_z)
        z1 = self.seq2seq.combine(z0, h_bar, d).loc
        return Factors(s_dist.loc, d, z1)

    # -- generation --------------------------------------------------------

    def generate_from(
        self, factors: Factors, steps: int, tau: float, noise: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """Roll the transition prior forward from ``factors`` and decode.

        ``noise`` is (B, steps-1, kz); ``None`` rolls out the transition means.
        """
        bsz = factors.s.shape[0]
        if noise is None:
            noise = factors.z1.new_zeros(bsz, steps - 1, self.config.kappa_z)
        z = self.transition.rollout(factors.z1, factors.d, steps, noise.unbind(1))
        return self.bank.decode(z, factors.s, self.mixture(factors.s, tau))

    def sample_prior_factors(self, n: int, generator: torch.Generator) -> Factors:
        c = self.config
        dtype = next(self.parameters()).dtype
        s = torch.randn(n, c.kappa_s, generator=generator, dtype=dtype) * self.static_prior_scale
        d = torch.randn(n, c.kappa_d, generator=generator, dtype=dtype)
        z1 = torch.randn(n, c.kappa_z, generator=generator, dtype=dtype)
        return Factors(s, d, z1)
