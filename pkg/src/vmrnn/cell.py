"""Recurrent cell: concatenate input tokens with the previous hidden state,
project, run the VSS stack once, and derive gate and candidate from the
shared activation:

    F_t = sigmoid(G),  C_t = F_t * (tanh(G) + C_(t-1)),  H_t = F_t * tanh(C_t)

with G = VSB(LP([X_t ; H_(t-1)])).  The gate multiplies the *sum* of the
candidate and the previous cell state, which differs from classic LSTM
gating; the weight-free ConvLSTM step below covers the classic form as a
reference baseline.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ConfigError
from .vss import VSSStack

__all__ = ["CellState", "VMRNNCell", "simplified_convlstm_step"]

CellState = tuple[torch.Tensor, torch.Tensor]  # (hidden H, cell C), same shape


class VMRNNCell(nn.Module):
    def __init__(
        self,
        channels: int,
        vsb_depth: int,
        state_dim: int = 16,
        expansion: int = 2,
        conv_variant: str = "dw",
        dt_rank: int | None = None,
    ):
        super().__init__()
        self.channels = channels
        self.lp = nn.Linear(2 * channels, channels)
        self.vsb = VSSStack(
            channels,
            vsb_depth,
            state_dim=state_dim,
            expansion=expansion,
            conv_variant=conv_variant,
            dt_rank=dt_rank,
        )

    def forward(
        self,
        x: torch.Tensor,
        state: CellState | None,
        grid_shape: tuple[int, int],
        chunk_len: int | None = None,
    ) -> tuple[torch.Tensor, CellState]:
        """One recurrent step; ``state=None`` means zero initial states."""
        if state is None:
            prev_h = torch.zeros_like(x)
            prev_c = torch.zeros_like(x)
        else:
            prev_h, prev_c = state
            if prev_h.shape != x.shape or prev_c.shape != x.shape:
                raise ConfigError(
                    f"state shape {tuple(prev_h.shape)} does not match input {tuple(x.shape)}"
                )
        g = self.vsb(self.lp(torch.cat([x, prev_h], dim=-1)), grid_shape, chunk_len=chunk_len)
        gate = torch.sigmoid(g)
        cell = gate * (torch.tanh(g) + prev_c)
        hidden = gate * torch.tanh(cell)
        return hidden, (hidden, cell)


def simplified_convlstm_step(
    x: torch.Tensor, state: CellState | None = None
) -> tuple[torch.Tensor, CellState]:
    """Weight-free ConvLSTM step: i = f = o = sigmoid(X + H_(t-1)).

    Reference baseline only; not used inside production models.
    """
    if state is None:
        prev_h = torch.zeros_like(x)
        prev_c = torch.zeros_like(x)
    else:
        prev_h, prev_c = state
        if prev_h.shape != x.shape or prev_c.shape != x.shape:
            raise ConfigError(
                f"state shape {tuple(prev_h.shape)} does not match input {tuple(x.shape)}"
            )
    z = x + prev_h
    gate = torch.sigmoid(z)
    cell = gate * prev_c + gate * torch.tanh(z)
    hidden = gate * torch.tanh(cell)
    return hidden, (hidden, cell)
