"""Row-patch attention: rolling-shutter motion is row-correlated, so rows are
grouped into horizontal patches and attended in two stages.

Stage one (intra) lets the rows inside each patch exchange information; stage
two (inter) connects rows that sit at the same offset in different patches,
which ties boundary-adjacent rows across patch seams. Tokens are one per row:
the width-averaged feature row projected into the attention width. Both
stages are residual, and both output projections start at zero, so a freshly
initialized block is exactly the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class PatchAttentionConfig:
    num_patches: int
    embed_dim: int = 64
    heads: int = 4

    def __post_init__(self):
        if self.num_patches < 1 or self.embed_dim < 1 or self.heads < 1:
            raise ConfigurationError(f"bad patch attention config {self}")
        if self.embed_dim % self.heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )


class _RowAttentionStage(nn.Module):
    """One residual attention stage over row tokens of shape (B', S, C)."""

    def __init__(self, channels: int, cfg: PatchAttentionConfig):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.in_proj = nn.Linear(channels, cfg.embed_dim)
        self.attn = nn.MultiheadAttention(cfg.embed_dim, cfg.heads, batch_first=True)
        self.out_proj = nn.Linear(cfg.embed_dim, channels)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        t = self.in_proj(self.norm(tokens))
        attended, _ = self.attn(t, t, t, need_weights=False)
        return self.out_proj(attended)


class PatchAttention(nn.Module):
    def __init__(self, channels: int, cfg: PatchAttentionConfig):
        super().__init__()
        self.cfg = cfg
        self.intra = _RowAttentionStage(channels, cfg)
        self.inter = _RowAttentionStage(channels, cfg)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> same shape; H must be divisible by num_patches."""
        b, c, h, w = x.shape
        p = self.cfg.num_patches
        if h % p:
            raise ConfigurationError(f"height {h} not divisible by {p} patches")
        rows_per_patch = h // p

        # stage 1: attend among the rows of each patch
        tokens = x.mean(dim=3).transpose(1, 2)  # (B, H, C) row descriptors
        intra_in = tokens.reshape(b * p, rows_per_patch, c)
        delta = self.intra(intra_in).reshape(b, h, c)
        x = x + delta.transpose(1, 2).unsqueeze(-1)

        # stage 2: attend among same-offset rows across patches
        tokens = x.mean(dim=3).transpose(1, 2)
        inter_in = (
            tokens.reshape(b, p, rows_per_patch, c)
            .transpose(1, 2)
            .reshape(b * rows_per_patch, p, c)
        )
        delta = (
            self.inter(inter_in)
            .reshape(b, rows_per_patch, p, c)
            .transpose(1, 2)
            .reshape(b, h, c)
        )
        return x + delta.transpose(1, 2).unsqueeze(-1)
