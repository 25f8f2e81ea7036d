"""The denoiser: a small U-Net that maps (x_t, t, condition image) to an x0
estimate of the motion-field tensor.

The condition is concatenated at the input and re-injected, average-pooled to
the working resolution, at every encoder stage; timestep embeddings are
sinusoidal; row-patch attention runs at the two coarsest feature resolutions.
A null condition is represented by an all-0.5 gray image (the same stand-in
used for condition dropout during training).
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .attention import PatchAttention, PatchAttentionConfig

GRAY_CONDITION = 0.5


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10_000.0) * torch.arange(half, dtype=torch.float32) / (half - 1)
    ).to(t.device)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, t_dim: int):
        super().__init__()
        groups = math.gcd(8, in_ch)
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, out_ch)
        self.norm2 = nn.GroupNorm(math.gcd(8, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.t_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class UNetDenoiser(nn.Module):
    """x0-prediction denoiser for 2-channel field tensors at one resolution."""

    def __init__(
        self,
        resolution: int = 64,
        base_width: int = 32,
        num_patches: int = 8,
        embed_dim: int = 64,
        heads: int = 4,
        t_dim: int = 128,
    ):
        super().__init__()
        self.resolution = resolution
        widths = (base_width, base_width * 3 // 2, base_width * 2, base_width * 3)
        self.t_mlp = nn.Sequential(
            nn.Linear(t_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim)
        )
        self.t_dim = t_dim

        self.stem = nn.Conv2d(2 + 3, widths[0], 3, padding=1)
        # each encoder stage sees its features plus the pooled condition
        self.enc = nn.ModuleList(
            [ResBlock(w + 3, w, t_dim) for w in widths[:3]]
        )
        self.down = nn.ModuleList(
            [nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(3)]
        )
        self.mid = ResBlock(widths[3] + 3, widths[3], t_dim)

        def site_cfg(feature_height: int) -> PatchAttentionConfig:
            # largest patch count compatible with this feature height
            return PatchAttentionConfig(
                num_patches=math.gcd(num_patches, feature_height),
                embed_dim=embed_dim, heads=heads,
            )

        self.attn_coarse = PatchAttention(widths[2], site_cfg(resolution // 4))
        self.attn_mid = PatchAttention(widths[3], site_cfg(resolution // 8))

        self.up = nn.ModuleList(
            [nn.Conv2d(widths[i + 1], widths[i], 3, padding=1) for i in range(3)]
        )
        self.dec = nn.ModuleList(
            [ResBlock(widths[i] * 2, widths[i], t_dim) for i in range(3)]
        )
        self.out_norm = nn.GroupNorm(math.gcd(8, widths[0]), widths[0])
        self.out_conv = nn.Conv2d(widths[0], 2, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        """x_t (B,2,R,R), t (B,) long, condition (B,3,R,R) -> x0_hat (B,2,R,R)."""
        t_emb = self.t_mlp(timestep_embedding(t, self.t_dim))
        h = self.stem(torch.cat([x_t, condition], dim=1))
        skips = []
        for stage, (block, down) in enumerate(zip(self.enc, self.down)):
            cond = condition if stage == 0 else F.avg_pool2d(condition, 2**stage)
            h = block(torch.cat([h, cond], dim=1), t_emb)
            if stage == 2:
                h = self.attn_coarse(h)
            skips.append(h)
            h = down(h)
        cond = F.avg_pool2d(condition, 8)
        h = self.mid(torch.cat([h, cond], dim=1), t_emb)
        h = self.attn_mid(h)
        for stage in (2, 1, 0):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.up[stage](h)
            h = self.dec[stage](torch.cat([h, skips[stage]], dim=1), t_emb)
        return self.out_conv(F.silu(self.out_norm(h)))


def build_denoiser(resolution: int = 64, **kwargs) -> UNetDenoiser:
    return UNetDenoiser(resolution=resolution, **kwargs)


def gray_like(condition_shape, device=None) -> torch.Tensor:
    return torch.full(condition_shape, GRAY_CONDITION, device=device)


def as_denoiser_fn(model: UNetDenoiser):
    """Wrap the network as (x_t (2,R,R), t, condition (3,R,R) | None) -> x0_hat.

    Numpy in, numpy out; a null condition becomes the gray stand-in. The
    wrapper is deterministic in eval mode.
    """
    import numpy as np

    def den(x_t, t, condition):
        model.eval()
        with torch.no_grad():
            x = torch.as_tensor(np.asarray(x_t), dtype=torch.float32)[None]
            if condition is None:
                cond = gray_like((1, 3, x.shape[2], x.shape[3]))
            else:
                c = np.asarray(condition, dtype=np.float32)
                if c.ndim == 3 and c.shape[2] in (1, 3):  # HWC image -> CHW
                    c = np.transpose(c, (2, 0, 1))
                if c.shape[0] == 1:
                    c = np.repeat(c, 3, axis=0)
                cond = torch.from_numpy(c)[None]
            out = model(x, torch.tensor([int(t)]), cond)
        return out[0].double().numpy()

    return den
