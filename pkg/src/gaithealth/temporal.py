"""Bidirectional GRU over per-frame features.

Gate equations (per direction):

    z  = sigmoid(W_z x + U_z h + b_z)
    r  = sigmoid(W_r x + U_r h + b_r)
    h~ = tanh(W x + U (r * h) + b)
    h' = (1 - z) * h + z * h~
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn


@dataclass
class GruConfig:
    input_dim: int = 256
    hidden_dim: int = 128
    layers: int = 1
    bidirectional: bool = True

    def __post_init__(self):
        if self.hidden_dim <= 0 or self.layers < 1:
            raise ValueError("hidden_dim and layers must be positive")

    @property
    def output_dim(self) -> int:
        return self.hidden_dim * (2 if self.bidirectional else 1)

    def to_dict(self) -> dict:
        return asdict(self)


class GruWeights(NamedTuple):
    w: torch.Tensor  # (3H, I) rows [z, r, candidate]
    u: torch.Tensor  # (3H, H)
    b: torch.Tensor  # (3H,)


class SequenceFeature(NamedTuple):
    per_frame: torch.Tensor  # (..., T, D)
    last: torch.Tensor  # (..., D)


def gru_cell(x, h, weights: GruWeights, x_proj=None):
    """One GRU step. ``x_proj`` may carry a precomputed ``W x + b``."""
    hidden = h.shape[-1]
    if weights.w.shape[0] != 3 * hidden or (x is not None and x.shape[-1] != weights.w.shape[1]):
        raise ValueError("GRU input/hidden sizes do not match the weights")
    gx = x @ weights.w.T + weights.b if x_proj is None else x_proj
    xz, xr, xn = gx.split(hidden, -1)
    hz, hr = (h @ weights.u[:2 * hidden].T).split(hidden, -1)
    z = torch.sigmoid(xz + hz)
    r = torch.sigmoid(xr + hr)
    cand = torch.tanh(xn + (r * h) @ weights.u[2 * hidden:].T)
    return (1 - z) * h + z * cand


class GRUCell(nn.Module):
    def __init__(self, input_dim, hidden_dim):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.w = nn.Parameter(torch.empty(3 * hidden_dim, input_dim))
        self.u = nn.Parameter(torch.empty(3 * hidden_dim, hidden_dim))
        self.b = nn.Parameter(torch.empty(3 * hidden_dim))
        bound = 1.0 / math.sqrt(hidden_dim)
        for p in self.parameters():
            nn.init.uniform_(p, -bound, bound)

    @property
    def weights(self) -> GruWeights:
        return GruWeights(self.w, self.u, self.b)

    def forward(self, x, h):
        return gru_cell(x, h, self.weights)

    def run(self, xs, reverse=False):
        """xs (B, T, I) -> hidden states (B, T, H), in input time order."""
        proj = xs @ self.w.T + self.b
        h = xs.new_zeros(xs.shape[0], self.hidden_dim)
        steps = range(xs.shape[1] - 1, -1, -1) if reverse else range(xs.shape[1])
        out = [None] * xs.shape[1]
        for t in steps:
            h = gru_cell(None, h, self.weights, x_proj=proj[:, t])
            out[t] = h
        return torch.stack(out, 1)


class TemporalEncoder(nn.Module):
    def __init__(self, config: GruConfig = None):
        super().__init__()
        self.config = config = config or GruConfig()
        dirs = 2 if config.bidirectional else 1
        self.forward_cells = nn.ModuleList()
        self.backward_cells = nn.ModuleList()
        for layer in range(config.layers):
            dim = config.input_dim if layer == 0 else config.hidden_dim * dirs
            self.forward_cells.append(GRUCell(dim, config.hidden_dim))
            if config.bidirectional:
                self.backward_cells.append(GRUCell(dim, config.hidden_dim))

    def forward(self, features) -> SequenceFeature:
        """(B, T, I) or (T, I) features -> per-frame (.., T, D) and last frame (.., D)."""
        squeeze = features.dim() == 2
        x = features.unsqueeze(0) if squeeze else features
        if x.shape[1] == 0:
            raise ValueError("cannot encode an empty sequence")
        if x.shape[-1] != self.config.input_dim:
            raise ValueError(f"expected feature dim {self.config.input_dim}, got {x.shape[-1]}")
        for layer, fwd in enumerate(self.forward_cells):
            outs = [fwd.run(x)]
            if self.config.bidirectional:
                outs.append(self.backward_cells[layer].run(x, reverse=True))
            x = torch.cat(outs, -1)
        if squeeze:
            x = x[0]
        return SequenceFeature(x, x[..., -1, :])

    encode_sequence = forward
