"""2D selective scan: unfold a token grid along four traversal directions,
run a selective scan per direction, and scatter-sum the results back.

Directions: 1 = row-major forward, 2 = row-major reverse, 3 = column-major
forward, 4 = column-major reverse.  2 is the exact reversal of 1, and 4 of 3.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import torch
import torch.nn as nn

from .errors import ConfigError
from .scan import S6Params, make_selective_params, scan_chunked

__all__ = ["DIRECTIONS", "scan_order", "scan_expand", "inverse_placement", "scan_merge", "ss2d_forward", "SS2D"]

DIRECTIONS = (1, 2, 3, 4)


@lru_cache(maxsize=128)
def _orders(h: int, w: int):
    row = torch.arange(h * w)
    col = (row % h) * w + row.div(h, rounding_mode="floor")
    orders = {1: row, 2: row.flip(0), 3: col, 4: col.flip(0)}
    inverses = {v: torch.argsort(o) for v, o in orders.items()}
    return orders, inverses


def scan_order(v: int, grid_shape: tuple[int, int]) -> torch.Tensor:
    """Permutation of row-major grid indices visited by direction ``v``."""
    if v not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}, got {v}")
    h, w = grid_shape
    if h < 1 or w < 1:
        raise ConfigError(f"grid must be at least 1x1, got {grid_shape}")
    return _orders(h, w)[0][v]


def scan_expand(z: torch.Tensor, v: int) -> torch.Tensor:
    """Unfold grid ``z [b, H, W, C]`` into the sequence for direction ``v``."""
    if z.dim() != 4:
        raise ConfigError(f"expected [batch, H, W, C] grid, got {tuple(z.shape)}")
    b, h, w, c = z.shape
    order = scan_order(v, (h, w)).to(z.device)
    return z.reshape(b, h * w, c).index_select(1, order)


def inverse_placement(seq: torch.Tensor, v: int, grid_shape: tuple[int, int]) -> torch.Tensor:
    """Scatter a directional sequence back to its grid positions."""
    h, w = grid_shape
    if seq.dim() != 3 or seq.shape[1] != h * w:
        raise ConfigError(
            f"sequence length {tuple(seq.shape)} does not match grid {grid_shape}"
        )
    inv = _orders(h, w)[1][v].to(seq.device)
    b, _, c = seq.shape
    return seq.index_select(1, inv).reshape(b, h, w, c)


def scan_merge(seqs: Sequence[torch.Tensor], grid_shape: tuple[int, int]) -> torch.Tensor:
    """Sum the four directional sequences scattered back onto the grid."""
    if len(seqs) != len(DIRECTIONS):
        raise ConfigError(f"expected {len(DIRECTIONS)} sequences, got {len(seqs)}")
    h, w = grid_shape
    widths = {s.shape[-1] for s in seqs}
    lengths = {s.shape[1] for s in seqs}
    if len(widths) != 1 or lengths != {h * w}:
        raise ConfigError(
            f"sequences disagree with grid {grid_shape}: lengths {sorted(lengths)}, widths {sorted(widths)}"
        )
    out = inverse_placement(seqs[0], 1, grid_shape)
    for v, s in zip(DIRECTIONS[1:], seqs[1:]):
        out = out + inverse_placement(s, v, grid_shape)
    return out


def ss2d_forward(
    z: torch.Tensor,
    params: Sequence[S6Params],
    chunk_len: int | None = None,
) -> torch.Tensor:
    """Expand -> per-direction selective scan -> merge, fused over directions.

    The four directional sequences are stacked on an extra batch axis and run
    through a single chunked scan call with per-direction parameters
    broadcast along it; results scatter-sum back to the grid shape.
    """
    if len(params) != len(DIRECTIONS):
        raise ConfigError(f"need one parameter set per direction, got {len(params)}")
    b, h, w, c = z.shape
    seqs = torch.stack([scan_expand(z, v) for v in DIRECTIONS], dim=1)  # [b, 4, L, C]

    made = [make_selective_params(seqs[:, i], p) for i, p in enumerate(params)]
    delta = torch.stack([m[0] for m in made], dim=1)
    bs = torch.stack([m[1] for m in made], dim=1)
    cs = torch.stack([m[2] for m in made], dim=1)
    a = torch.stack([p.A for p in params]).unsqueeze(1)  # [4, 1, C, N]
    d = torch.stack([p.D for p in params]).unsqueeze(1)  # [4, 1, C]

    if chunk_len is None:
        chunk_len = _auto_chunk(b * len(DIRECTIONS), c, params[0].state_dim, h * w)
    y = scan_chunked(seqs, delta, a, bs, cs, d, chunk_len=chunk_len)
    return scan_merge([y[:, i] for i in range(len(DIRECTIONS))], (h, w))


def _auto_chunk(batch: int, channels: int, state_dim: int, length: int, budget: int = 2**24) -> int:
    """Chunk length keeping the pairwise decay tensor near ``budget`` elements."""
    k = int((budget / max(1, batch * channels * state_dim)) ** 0.5)
    k = max(8, min(64, k))
    return min(k, max(1, length))


class SS2D(nn.Module):
    """Four-direction selective scan over a token grid.

    Each direction owns an independent parameter set; the merge is a plain
    sum, so downstream normalization absorbs the x4 scale.
    """

    def __init__(self, channels: int, state_dim: int = 16, dt_rank: int | None = None):
        super().__init__()
        self.directions = nn.ModuleList(
            S6Params(channels, state_dim, dt_rank=dt_rank) for _ in DIRECTIONS
        )

    def forward(self, z: torch.Tensor, chunk_len: int | None = None) -> torch.Tensor:
        return ss2d_forward(z, list(self.directions), chunk_len=chunk_len)
