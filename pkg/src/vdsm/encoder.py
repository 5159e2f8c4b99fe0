"""Per-frame convolutional encoder and the mean-pooled static head."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .distributions import DiagGaussian, positive_scale

LEAK = 0.2


@dataclass
class FrameEncoding:
    pose_params: DiagGaussian
    identity_features: torch.Tensor


def n_conv_stages(size: int) -> int:
    """Stride-2 stages needed to bring ``size`` down to 2x2 (0 for size <= 2)."""
    if size < 2 or size & (size - 1):
        raise ValueError(f"frame size must be a power of two >= 2, got {size}")
    return int(math.log2(size)) - 1


class BlurDownsample(nn.Module):
    """Fixed [1, 2, 1] binomial blur followed by stride-2 subsampling."""

    def __init__(self, channels: int):
        super().__init__()
        k = torch.tensor([1.0, 2.0, 1.0])
        k = torch.outer(k, k)
        k = k / k.sum()
        self.register_buffer("kernel", k.expand(channels, 1, 3, 3).clone(), persistent=False)
        self.channels = channels

    def forward(self, x):
        return F.conv2d(x, self.kernel.to(x.dtype), stride=2, padding=1, groups=self.channels)


class FrameEncoder(nn.Module):
    """Conv trunk -> (pose posterior, identity features); static head f_s.

    The trunk halves resolution at every stage until the feature map is 2x2.
    With ``blur=True`` each stage convolves at stride 1 and downsamples with a
    binomial blur instead.
    """

    def __init__(
        self,
        frame_shape: Sequence[int],
        kappa_z: int,
        kappa_s: int,
        channels: Sequence[int] = (16, 16, 32, 32),
        identity_dim: int = 64,
        blur: bool = False,
    ):
        super().__init__()
        c, h, w = frame_shape
        if h != w:
            raise ValueError("frames must be square")
        stages = n_conv_stages(h)
        if len(channels) != stages:
            raise ValueError(f"{h}x{w} frames need {stages} encoder channel widths, got {len(channels)}")
        self.frame_shape = tuple(frame_shape)
        self.kappa_z = kappa_z
        self.kappa_s = kappa_s

        layers = []
        prev = c
        for width in channels:
            if blur:
                layers += [nn.Conv2d(prev, width, 3, 1, 1), nn.LeakyReLU(LEAK), BlurDownsample(width)]
            else:
                layers += [nn.Conv2d(prev, width, 4, 2, 1), nn.LeakyReLU(LEAK)]
            prev = width
        self.trunk = nn.Sequential(*layers)
        feat = prev * (2 * 2 if stages else h * w)

        self.pose_loc = nn.Linear(feat, kappa_z)
        self.pose_scale = nn.Linear(feat, kappa_z)
        self.identity = nn.Linear(feat, identity_dim)
        self.static_loc = nn.Linear(identity_dim, kappa_s)
        self.static_scale = nn.Linear(identity_dim, kappa_s)

    # parameters still trained during the sequence stage
    HEAD_MODULES = ("pose_loc", "pose_scale", "static_loc", "static_scale")

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-3:]) != self.frame_shape:
            raise ValueError(f"expected frames of shape {self.frame_shape}, got {tuple(x.shape[-3:])}")
        lead = x.shape[:-3]
        h = self.trunk(x.reshape(-1, *self.frame_shape))
        return h.reshape(*lead, -1)

    def forward(self, x: torch.Tensor) -> FrameEncoding:
        """Encode frames of shape (..., C, H, W)."""
        h = self.features(x)
        pose = DiagGaussian(self.pose_loc(h), positive_scale(self.pose_scale(h)))
        ident = F.leaky_relu(self.identity(h), LEAK)
        return FrameEncoding(pose, ident)

    encode_frame = forward

    def infer_static(self, identity_features: torch.Tensor) -> DiagGaussian:
        """Posterior over s from per-frame identity features (..., T, F).

        Features are averaged over the frame axis before the two heads.
        """
        if identity_features.shape[-2] == 0:
            raise ValueError("cannot infer the static factor from zero frames")
        # sorting first fixes the summation order, making the pool bit-exact
        # under any permutation of the frames
        pooled = torch.sort(identity_features, dim=-2).values.mean(-2)
        return DiagGaussian(self.static_loc(pooled), positive_scale(self.static_scale(pooled)))


def infer_static(encodings: Sequence[FrameEncoding], encoder: FrameEncoder) -> DiagGaussian:
    """List-of-encodings convenience wrapper around :meth:`FrameEncoder.infer_static`."""
    if len(encodings) == 0:
        raise ValueError("cannot infer the static factor from an empty list")
    feats = torch.stack([e.identity_features for e in encodings], dim=-2)
    return encoder.infer_static(feats)
