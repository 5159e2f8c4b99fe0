"""Evidence lower bounds for both training stages, and a gradient checker.

Reconstruction terms are summed over pixels and frames; every quantity is
then averaged over the sequences (or identity groups) in the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import torch

from .distributions import (
    DiagGaussian,
    bernoulli_log_likelihood,
    kl_diag_gaussians,
    sample_reparameterized,
)
from .model import VDSM
from .schedules import AnnealState


@dataclass
class LossBreakdown:
    reconstruction: torch.Tensor
    kl_s: torch.Tensor
    kl_d: torch.Tensor
    kl_z1: torch.Tensor
    kl_z_trans: torch.Tensor
    weighted_total: torch.Tensor

    @classmethod
    def assemble(cls, recon, kl_s, kl_d, kl_z1, kl_z_trans, anneal: AnnealState) -> "LossBreakdown":
        total = (
            recon
            - anneal.lambda_s * kl_s
            - anneal.lambda_d * kl_d
            - anneal.lambda_z * (kl_z1 + kl_z_trans)
        )
        return cls(recon, kl_s, kl_d, kl_z1, kl_z_trans, total)

    def floats(self) -> Dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


@dataclass
class PretrainNoise:
    s: torch.Tensor  # (G, ks)
    z: torch.Tensor  # (G, n, kz)


@dataclass
class SequenceNoise:
    s: torch.Tensor  # (B, ks)
    d: torch.Tensor  # (B, kd)
    z: torch.Tensor  # (B, T, kz)


def _batched(frames: torch.Tensor) -> torch.Tensor:
    return frames[None] if frames.dim() == 4 else frames


def draw_pretrain_noise(model: VDSM, groups: int, n: int, generator=None, dtype=torch.float32) -> PretrainNoise:
    c = model.config
    return PretrainNoise(
        torch.randn(groups, c.kappa_s, generator=generator, dtype=dtype),
        torch.randn(groups, n, c.kappa_z, generator=generator, dtype=dtype),
    )


def draw_sequence_noise(model: VDSM, batch: int, steps: int, generator=None, dtype=torch.float32) -> SequenceNoise:
    c = model.config
    return SequenceNoise(
        torch.randn(batch, c.kappa_s, generator=generator, dtype=dtype),
        torch.randn(batch, c.kappa_d, generator=generator, dtype=dtype),
        torch.randn(batch, steps, c.kappa_z, generator=generator, dtype=dtype),
    )


def _check_frames(model: VDSM, frames: torch.Tensor):
    if frames.dim() != 5 or frames.shape[0] == 0 or frames.shape[1] == 0:
        raise ValueError("expected a nonempty batch of frame groups (G, n, C, H, W)")
    if tuple(frames.shape[2:]) != model.config.frame_shape:
        raise ValueError(f"frames of shape {tuple(frames.shape[2:])}, expected {model.config.frame_shape}")


def pretrain_elbo(
    model: VDSM,
    frames: torch.Tensor,
    anneal: AnnealState,
    noise: Optional[PretrainNoise] = None,
    generator: Optional[torch.Generator] = None,
) -> LossBreakdown:
    """Non-sequential bound on identity-grouped frames (G, n, C, H, W).

    All frames of a group share one static factor, inferred from the group
    mean; each frame gets its own i.i.d. pose factor.
    """
    frames = _batched(frames)
    _check_frames(model, frames)
    groups, n = frames.shape[:2]
    if noise is None:
        noise = draw_pretrain_noise(model, groups, n, generator, frames.dtype)

    enc = model.encoder(frames)
    q_z = enc.pose_params
    q_s = model.encoder.infer_static(enc.identity_features)
    s = sample_reparameterized(q_s, noise.s)
    z = sample_reparameterized(q_z, noise.z)

    probs = model.bank.decode(z, s, model.mixture(s, anneal.tau_s))
    recon = bernoulli_log_likelihood(frames, probs) / groups

    p_z = DiagGaussian.standard(q_z.loc.shape, like=q_z.loc)
    p_s = DiagGaussian.standard(q_s.loc.shape, model.static_prior_scale, like=q_s.loc)
    kl_z = kl_diag_gaussians(q_z, p_z).sum() / groups
    kl_s = kl_diag_gaussians(q_s, p_s).mean()
    zero = recon.new_zeros(())
    # per-frame pose KLs are reported in the kl_z1 slot
    return LossBreakdown.assemble(recon, kl_s, zero, kl_z, zero, anneal)


def sequence_elbo(
    model: VDSM,
    frames: torch.Tensor,
    anneal: AnnealState,
    noise: Optional[SequenceNoise] = None,
    generator: Optional[torch.Generator] = None,
) -> LossBreakdown:
    """Full sequential bound for sequences (B, T, C, H, W) or a single (T, C, H, W).

    The pose KL after the first step is evaluated in closed form between the
    combiner posterior and the transition prior, both conditioned on the
    single sampled posterior path z_{t-1}.
    """
    frames = _batched(frames)
    _check_frames(model, frames)
    bsz, steps = frames.shape[:2]
    if steps < 2:
        raise ValueError("sequence bound needs T >= 2")
    if noise is None:
        noise = draw_sequence_noise(model, bsz, steps, generator, frames.dtype)

    _, q_s, q_d = model.posteriors(frames)
    s = sample_reparameterized(q_s, noise.s)
    d = sample_reparameterized(q_d, noise.d)
    h_bar = model.seq2seq.unroll_decoder(d, steps)

    z_prev = d.new_zeros(bsz, model.config.kappa_z)
    zs = []
    kl_z1 = kl_trans = None
    for t in range(steps):
        q_t = model.seq2seq.combine(z_prev, h_bar[:, t], d)
        if t == 0:
            kl_z1 = kl_diag_gaussians(q_t, DiagGaussian.standard(q_t.loc.shape, like=q_t.loc))
        else:
            kl_t = kl_diag_gaussians(q_t, model.transition(z_prev, d))
            kl_trans = kl_t if kl_trans is None else kl_trans + kl_t
        z_prev = sample_reparameterized(q_t, noise.z[:, t])
        zs.append(z_prev)
    z = torch.stack(zs, dim=1)

    probs = model.bank.decode(z, s, model.mixture(s, anneal.tau_s))
    recon = bernoulli_log_likelihood(frames, probs) / bsz
    p_s = DiagGaussian.standard(q_s.loc.shape, model.static_prior_scale, like=q_s.loc)
    p_d = DiagGaussian.standard(q_d.loc.shape, like=q_d.loc)
    return LossBreakdown.assemble(
        recon,
        kl_diag_gaussians(q_s, p_s).mean(),
        kl_diag_gaussians(q_d, p_d).mean(),
        kl_z1.mean(),
        kl_trans.mean(),
        anneal,
    )


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-6,
    samples: int = 20,
    seed: int = 0,
    min_denominator: float = 1e-6,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` must be deterministic (fixed noise). ``samples`` entries are
    drawn at random across ``params``; relative error is
    |a - n| / max(|a|, |n|, min_denominator).
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss_fn().backward()
    # parameters the loss never touches have zero gradient
    analytic = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params]

    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with torch.no_grad():
        for idx in flat:
            k = int(np.searchsorted(offsets, idx, side="right") - 1)
            p, j = params[k], int(idx - offsets[k])
            view = p.view(-1)
            orig = view[j].item()
            view[j] = orig + eps
            plus = float(loss_fn())
            view[j] = orig - eps
            minus = float(loss_fn())
            view[j] = orig
            numeric = (plus - minus) / (2 * eps)
            a = float(analytic[k].view(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), min_denominator)
            worst = max(worst, err)
    return worst
