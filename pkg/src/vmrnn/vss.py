"""Gated two-stream token-mixing block around the 2D selective scan.

A block normalizes its input, expands it into two streams, pushes one
through conv + SiLU + SS2D + LayerNorm, gates it with SiLU of the other,
projects back down and adds the residual.  There is no MLP stage.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .ss2d import SS2D

__all__ = ["CONV_VARIANTS", "make_conv", "VSSBlock", "VSSStack"]

CONV_VARIANTS = ("dw", "conv2d", "dw_dwd_1x1")


def make_conv(channels: int, variant: str) -> nn.Module:
    """3x3 spatial mixing on [b, C, H, W]; padding preserves H x W."""
    if variant == "dw":
        return nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
    if variant == "conv2d":
        return nn.Conv2d(channels, channels, 3, padding=1)
    if variant == "dw_dwd_1x1":
        # large-kernel decomposition: depth-wise, dilated depth-wise, pointwise
        return nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, groups=channels),
            nn.Conv2d(channels, channels, 3, padding=2, dilation=2, groups=channels),
            nn.Conv2d(channels, channels, 1),
        )
    raise ConfigError(f"conv_variant must be one of {CONV_VARIANTS}, got {variant!r}")


class VSSBlock(nn.Module):
    def __init__(
        self,
        channels: int,
        state_dim: int = 16,
        expansion: int = 2,
        conv_variant: str = "dw",
        dt_rank: int | None = None,
    ):
        super().__init__()
        self.channels = channels
        self.inner = expansion * channels
        self.in_norm = nn.LayerNorm(channels)
        self.in_proj = nn.Linear(channels, 2 * self.inner)
        self.conv = make_conv(self.inner, conv_variant)
        self.ss2d = SS2D(self.inner, state_dim, dt_rank=dt_rank)
        self.post_norm = nn.LayerNorm(self.inner)
        self.out_proj = nn.Linear(self.inner, channels)

    def forward(
        self,
        tokens: torch.Tensor,
        grid_shape: tuple[int, int],
        chunk_len: int | None = None,
    ) -> torch.Tensor:
        h, w = grid_shape
        b, length, c = tokens.shape
        if length != h * w:
            raise ConfigError(f"L={length} tokens do not tile a {h}x{w} grid")
        if c != self.channels:
            raise ConfigError(f"expected {self.channels} channels, got {c}")

        stream1, stream2 = self.in_proj(self.in_norm(tokens)).chunk(2, dim=-1)
        grid = stream1.reshape(b, h, w, self.inner).permute(0, 3, 1, 2)
        grid = F.silu(self.conv(grid)).permute(0, 2, 3, 1)
        mixed = self.post_norm(self.ss2d(grid, chunk_len=chunk_len))
        gated = mixed.reshape(b, length, self.inner) * F.silu(stream2)
        return tokens + self.out_proj(gated)


class VSSStack(nn.Module):
    """Sequential composition of ``depth`` blocks; shape-preserving."""

    def __init__(self, channels: int, depth: int, **block_kw):
        super().__init__()
        if depth < 1:
            raise ConfigError(f"depth must be >= 1, got {depth}")
        self.blocks = nn.ModuleList(VSSBlock(channels, **block_kw) for _ in range(depth))

    def forward(
        self,
        tokens: torch.Tensor,
        grid_shape: tuple[int, int],
        chunk_len: int | None = None,
    ) -> torch.Tensor:
        for block in self.blocks:
            tokens = block(tokens, grid_shape, chunk_len=chunk_len)
        return tokens
