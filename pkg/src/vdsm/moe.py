"""Mixture-of-experts transpose-convolution decoder.

The bank holds ``n_experts`` decoders with identical shapes. For each
sequence the expert parameters are averaged with the sequence's mixture
weights into a single effective decoder, which then renders every frame of
that sequence. Blending happens in parameter space, not on decoded images.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

LEAK = 0.2


def decoder_layout(size: int):
    """(kernel, stride, padding) per stage that maps a 1x1 input to ``size``."""
    if size < 2 or size & (size - 1):
        raise ValueError(f"frame size must be a power of two >= 2, got {size}")
    base = min(4, size)
    layout = [(base, 1, 0)]
    res = base
    while res < size:
        layout.append((4, 2, 1))
        res *= 2
    return layout


@dataclass
class BlendedDecoder:
    """Effective parameters, one set per sequence: weights[i] is (B, Cin, Cout, k, k)."""

    weights: List[torch.Tensor]
    biases: List[torch.Tensor]

    @property
    def batch(self) -> int:
        return self.weights[0].shape[0]


class ExpertBank(nn.Module):
    def __init__(
        self,
        n_experts: int,
        in_dim: int,
        frame_shape: Sequence[int],
        channels: Sequence[int] = (32, 32, 16),
    ):
        super().__init__()
        if n_experts < 1:
            raise ValueError("need at least one expert")
        c, h, w = frame_shape
        if h != w:
            raise ValueError("frames must be square")
        self.layout = decoder_layout(h)
        if len(channels) != len(self.layout) - 1:
            raise ValueError(
                f"{h}x{w} output needs {len(self.layout) - 1} hidden decoder widths, got {len(channels)}"
            )
        self.n_experts = n_experts
        self.in_dim = in_dim
        self.frame_shape = tuple(frame_shape)

        widths = [in_dim, *channels, c]
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for (k, stride, _), cin, cout in zip(self.layout, widths[:-1], widths[1:]):
            bound = 1.0 / math.sqrt(cin * k * k / stride**2)
            self.weights.append(nn.Parameter(torch.empty(n_experts, cin, cout, k, k).uniform_(-bound, bound)))
            self.biases.append(nn.Parameter(torch.empty(n_experts, cout).uniform_(-bound, bound)))

    def blend(self, mix: torch.Tensor) -> BlendedDecoder:
        """Convex combination of expert parameters; ``mix`` is (N,) or (B, N)."""
        if mix.shape[-1] != self.n_experts:
            raise ValueError(f"mix has {mix.shape[-1]} weights for {self.n_experts} experts")
        mix = mix.reshape(-1, self.n_experts)
        ws = [torch.einsum("bn,n...->b...", mix, w) for w in self.weights]
        bs = [mix @ b for b in self.biases]
        return BlendedDecoder(ws, bs)

    def expert(self, k: int) -> BlendedDecoder:
        return BlendedDecoder([w[k : k + 1] for w in self.weights], [b[k : k + 1] for b in self.biases])

    def run(self, dec: BlendedDecoder, inputs: torch.Tensor) -> torch.Tensor:
        """Render ``inputs`` (B, T, in_dim) through per-sequence decoders -> (B, T, C, H, W)."""
        bsz, steps, dim = inputs.shape
        if dim != self.in_dim:
            raise ValueError(f"decoder input has dimension {dim}, expected {self.in_dim}")
        if dec.batch != bsz:
            raise ValueError(f"{dec.batch} blended decoders for {bsz} sequences")
        x = inputs.transpose(0, 1).reshape(steps, bsz * dim, 1, 1)
        last = len(self.layout) - 1
        for i, ((_, stride, pad), w, b) in enumerate(zip(self.layout, dec.weights, dec.biases)):
            x = F.conv_transpose2d(
                x, w.reshape(-1, *w.shape[2:]), b.reshape(-1), stride=stride, padding=pad, groups=bsz
            )
            x = torch.sigmoid(x) if i == last else F.leaky_relu(x, LEAK)
        return x.reshape(steps, bsz, *self.frame_shape).transpose(0, 1)

    def decode(self, z: torch.Tensor, s: torch.Tensor, mix: torch.Tensor) -> torch.Tensor:
        """Pixel probabilities for poses ``z`` given static factor ``s`` and mixture ``mix``.

        Shapes: z (B, T, kz), s (B, ks), mix (B, N). Unbatched inputs
        z (kz,), s (ks,), mix (N,) return a single (C, H, W) frame.
        """
        single = z.dim() == 1
        if single:
            z, s, mix = z[None, None], s[None], mix[None]
        if s.shape[-1] + z.shape[-1] != self.in_dim:
            raise ValueError(
                f"len(s) + len(z) = {s.shape[-1] + z.shape[-1]} does not match decoder input {self.in_dim}"
            )
        if s.shape[0] != z.shape[0] or mix.shape[0] != z.shape[0]:
            raise ValueError("z, s and mix must share the batch dimension")
        inputs = torch.cat([s[:, None, :].expand(-1, z.shape[1], -1), z], dim=-1)
        out = self.run(self.blend(mix), inputs)
        return out[0, 0] if single else out
