"""Full predictive models: patch embedding, the single-cell base model and
the four-cell encoder-decoder with patch merging/expanding, frame
reconstruction, and the warmup-then-autoregressive rollout protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .cell import VMRNNCell
from .errors import ConfigError
from .vss import CONV_VARIANTS

__all__ = [
    "ModelConfig",
    "RolloutPlan",
    "PatchEmbed",
    "PatchMerging",
    "PatchExpanding",
    "FrameHead",
    "VMRNNB",
    "VMRNND",
    "build_model",
    "rollout",
]


@dataclass(frozen=True)
class ModelConfig:
    """Declarative architecture description.

    ``resolution`` is (H_img, W_img, C_in).  ``vsb_depths`` has one entry for
    variant B and four for variant D.  Variant D merges twice, so the image
    sides must divide by ``4 * patch_size``.
    """

    variant: str = "B"
    patch_size: int = 4
    resolution: tuple[int, int, int] = (32, 32, 1)
    embed_dim: int = 128
    vsb_depths: tuple[int, ...] = (12,)
    conv_variant: str = "dw"
    state_dim: int = 16
    dt_rank: int | None = None

    def __post_init__(self):
        h, w, c_in = self.resolution
        if self.variant not in ("B", "D"):
            raise ConfigError(f"variant must be 'B' or 'D', got {self.variant!r}")
        if self.conv_variant not in CONV_VARIANTS:
            raise ConfigError(f"conv_variant must be one of {CONV_VARIANTS}")
        if self.patch_size < 1 or h < 1 or w < 1 or c_in < 1:
            raise ConfigError(f"bad resolution/patch: {self.resolution}, P={self.patch_size}")
        divisor = self.patch_size * (4 if self.variant == "D" else 1)
        if h % divisor or w % divisor:
            raise ConfigError(
                f"{h}x{w} image not divisible by {divisor} (patch {self.patch_size}, variant {self.variant})"
            )
        want = 4 if self.variant == "D" else 1
        if len(self.vsb_depths) != want:
            raise ConfigError(
                f"variant {self.variant} needs {want} vsb depth(s), got {self.vsb_depths}"
            )
        if any(d < 1 for d in self.vsb_depths):
            raise ConfigError(f"vsb_depths must be positive, got {self.vsb_depths}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        h, w, _ = self.resolution
        return h // self.patch_size, w // self.patch_size

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "patch_size": self.patch_size,
            "resolution": list(self.resolution),
            "embed_dim": self.embed_dim,
            "vsb_depths": list(self.vsb_depths),
            "conv_variant": self.conv_variant,
            "state_dim": self.state_dim,
            "dt_rank": self.dt_rank,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["resolution"] = tuple(d["resolution"])
        d["vsb_depths"] = tuple(d["vsb_depths"])
        return cls(**d)


@dataclass(frozen=True)
class RolloutPlan:
    """Warmup frame count and autoregressive prediction horizon."""

    observe: int
    horizon: int

    def __post_init__(self):
        if self.observe < 1 or self.horizon < 1:
            raise ConfigError(f"observe and horizon must be >= 1, got {self}")


class PatchEmbed(nn.Module):
    """Flatten non-overlapping P x P patches and project them to tokens.

    Token order is row-major over patches; patch pixels flatten row-major
    with channels fastest, so an identity weight with embed_dim = P*P*C_in
    reproduces raw pixels.
    """

    def __init__(self, patch_size: int, in_channels: int, embed_dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.in_channels = in_channels
        self.proj = nn.Linear(patch_size * patch_size * in_channels, embed_dim)

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        if frame.dim() != 4 or frame.shape[-1] != self.in_channels:
            raise ConfigError(f"expected [b, H, W, {self.in_channels}] frame, got {tuple(frame.shape)}")
        b, h, w, c = frame.shape
        p = self.patch_size
        if h % p or w % p:
            raise ConfigError(f"{h}x{w} frame not divisible by patch size {p}")
        x = frame.reshape(b, h // p, p, w // p, p, c)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, (h // p) * (w // p), p * p * c)
        return self.proj(x)


class PatchMerging(nn.Module):
    """Concatenate 2x2 token neighborhoods, normalize, reduce 4C -> 2C."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.norm = nn.LayerNorm(4 * channels)
        self.reduction = nn.Linear(4 * channels, 2 * channels, bias=False)

    def forward(self, tokens: torch.Tensor, grid_shape: tuple[int, int]):
        h, w = grid_shape
        b, length, c = tokens.shape
        if length != h * w or c != self.channels:
            raise ConfigError(f"tokens {tuple(tokens.shape)} do not match grid {grid_shape}")
        if h % 2 or w % 2:
            raise ConfigError(f"grid {grid_shape} must have even sides to merge")
        x = tokens.reshape(b, h, w, c)
        quads = [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]]
        x = torch.cat(quads, dim=-1).reshape(b, (h // 2) * (w // 2), 4 * c)
        return self.reduction(self.norm(x)), (h // 2, w // 2)


class PatchExpanding(nn.Module):
    """Expand C -> 2C then pixel-shuffle to a 2H x 2W grid of C/2 channels."""

    def __init__(self, channels: int):
        super().__init__()
        if channels % 2:
            raise ConfigError(f"patch expanding needs an even channel count, got {channels}")
        self.channels = channels
        self.expand = nn.Linear(channels, 2 * channels, bias=False)

    def forward(self, tokens: torch.Tensor, grid_shape: tuple[int, int]):
        h, w = grid_shape
        b, length, c = tokens.shape
        if length != h * w or c != self.channels:
            raise ConfigError(f"tokens {tuple(tokens.shape)} do not match grid {grid_shape}")
        half = c // 2
        x = self.expand(tokens).reshape(b, h, w, 2, 2, half)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, (2 * h) * (2 * w), half)
        return x, (2 * h, 2 * w)


class FrameHead(nn.Module):
    """Token grid back to pixels: linear to P*P*C_in, then depth-to-space."""

    def __init__(self, patch_size: int, out_channels: int, embed_dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.out_channels = out_channels
        self.proj = nn.Linear(embed_dim, patch_size * patch_size * out_channels)

    def forward(self, tokens: torch.Tensor, grid_shape: tuple[int, int]) -> torch.Tensor:
        h, w = grid_shape
        b, length, _ = tokens.shape
        if length != h * w:
            raise ConfigError(f"tokens {tuple(tokens.shape)} do not match grid {grid_shape}")
        p = self.patch_size
        x = self.proj(tokens).reshape(b, h, w, p, p, self.out_channels)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, h * p, w * p, self.out_channels)
        return x


def _init_weights(module: nn.Module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class VMRNNB(nn.Module):
    """Base model: patch embed -> one recurrent cell -> reconstruction."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.variant != "B":
            raise ConfigError("VMRNNB requires a variant-'B' config")
        self.config = config
        h_img, w_img, c_in = config.resolution
        self.embed = PatchEmbed(config.patch_size, c_in, config.embed_dim)
        self.cell = VMRNNCell(
            config.embed_dim,
            vsb_depth=config.vsb_depths[0],
            state_dim=config.state_dim,
            conv_variant=config.conv_variant,
            dt_rank=config.dt_rank,
        )
        self.head = FrameHead(config.patch_size, c_in, config.embed_dim)
        self.apply(_init_weights)

    def init_states(self):
        return [None]

    def step(self, frame: torch.Tensor, states, chunk_len: int | None = None):
        (state,) = states
        grid = self.config.grid_shape
        tokens = self.embed(frame)
        hidden, state = self.cell(tokens, state, grid, chunk_len=chunk_len)
        return self.head(hidden, grid), [state]

    forward = step


class VMRNND(nn.Module):
    """Deep model: two merges down, two expansions up, additive skips.

    Cells sit at grid scales (1, 1/2, 1/2, 1); the bottleneck is a merge
    immediately undone by an expansion, compressing through 4x channels at
    one quarter of the grid.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.variant != "D":
            raise ConfigError("VMRNND requires a variant-'D' config")
        self.config = config
        h_img, w_img, c_in = config.resolution
        dim = config.embed_dim
        cell_kw = dict(
            state_dim=config.state_dim,
            conv_variant=config.conv_variant,
            dt_rank=config.dt_rank,
        )
        self.embed = PatchEmbed(config.patch_size, c_in, dim)
        self.cell1 = VMRNNCell(dim, config.vsb_depths[0], **cell_kw)
        self.merge1 = PatchMerging(dim)
        self.cell2 = VMRNNCell(2 * dim, config.vsb_depths[1], **cell_kw)
        self.merge2 = PatchMerging(2 * dim)
        self.expand_bottleneck = PatchExpanding(4 * dim)
        self.cell3 = VMRNNCell(2 * dim, config.vsb_depths[2], **cell_kw)
        self.expand1 = PatchExpanding(2 * dim)
        self.cell4 = VMRNNCell(dim, config.vsb_depths[3], **cell_kw)
        self.head = FrameHead(config.patch_size, c_in, dim)
        self.apply(_init_weights)

    def init_states(self):
        return [None, None, None, None]

    def step(self, frame: torch.Tensor, states, chunk_len: int | None = None):
        s1, s2, s3, s4 = states
        g1 = self.config.grid_shape

        x = self.embed(frame)
        h1, s1 = self.cell1(x, s1, g1, chunk_len=chunk_len)
        x2, g2 = self.merge1(h1, g1)
        h2, s2 = self.cell2(x2, s2, g2, chunk_len=chunk_len)
        x3, g3 = self.merge2(h2, g2)
        up2, _ = self.expand_bottleneck(x3, g3)
        h3, s3 = self.cell3(up2 + h2, s3, g2, chunk_len=chunk_len)
        up1, _ = self.expand1(h3, g2)
        h4, s4 = self.cell4(up1 + h1, s4, g1, chunk_len=chunk_len)
        return self.head(h4, g1), [s1, s2, s3, s4]

    forward = step


def build_model(config: ModelConfig) -> nn.Module:
    return VMRNNB(config) if config.variant == "B" else VMRNND(config)


def rollout(
    model: nn.Module,
    frames: torch.Tensor,
    plan: RolloutPlan,
    return_warmup: bool = False,
    chunk_len: int | None = None,
):
    """Teacher-forced warmup then autoregressive prediction.

    ``frames`` is [b, T, H, W, C] with T >= plan.observe.  Ground-truth
    frames 0..observe-1 are fed in turn (each step predicts the next frame);
    the remaining horizon-1 steps feed back the model's own output.  Returns
    the ``horizon`` predictions for frames observe..observe+horizon-1; with
    ``return_warmup=True`` the observe-1 warmup predictions (for frames
    1..observe-1) are prepended instead.
    """
    if frames.dim() != 5:
        raise ConfigError(f"expected [b, T, H, W, C] frames, got {tuple(frames.shape)}")
    if frames.shape[1] < plan.observe:
        raise ConfigError(
            f"need at least observe={plan.observe} input frames, got {frames.shape[1]}"
        )
    states = model.init_states()
    preds = []
    pred = None
    for t in range(plan.observe):
        pred, states = model.step(frames[:, t], states, chunk_len=chunk_len)
        preds.append(pred)
    for _ in range(plan.horizon - 1):
        pred, states = model.step(pred, states, chunk_len=chunk_len)
        preds.append(pred)
    stacked = torch.stack(preds, dim=1)
    return stacked if return_warmup else stacked[:, plan.observe - 1 :]
