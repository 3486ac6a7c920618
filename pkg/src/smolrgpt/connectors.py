"""Pixel-shuffle connectors from encoder grids into the language-model embedding space."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import IndivisibleChannels, IndivisibleFactor, ModalityMismatch, ShapeError
from .vision_encoder import FeatureGrid


def shuffle_tensor(x: torch.Tensor, r: int) -> torch.Tensor:
    """(h, w, c) -> (h/r, w/r, c*r*r); cell (di, dj) lands at channel block di*r + dj."""
    h, w, c = x.shape
    if r < 1 or h % r or w % r:
        raise IndivisibleFactor(f"shuffle factor {r} does not divide grid {h}x{w}")
    x = x.reshape(h // r, r, w // r, r, c).permute(0, 2, 1, 3, 4)
    return x.reshape(h // r, w // r, r * r * c)


def unshuffle_tensor(x: torch.Tensor, r: int) -> torch.Tensor:
    h, w, c = x.shape
    if r < 1 or c % (r * r):
        raise IndivisibleChannels(f"{c} channels are not divisible by {r}^2")
    x = x.reshape(h, w, r, r, c // (r * r)).permute(0, 2, 1, 3, 4)
    return x.reshape(h * r, w * r, c // (r * r))


def pixel_shuffle(grid: FeatureGrid, r: int) -> FeatureGrid:
    return FeatureGrid(grid.modality, shuffle_tensor(grid.values, r))


def pixel_unshuffle(grid: FeatureGrid, r: int) -> FeatureGrid:
    return FeatureGrid(grid.modality, unshuffle_tensor(grid.values, r))


@dataclass
class TokenEmbeddings:
    values: torch.Tensor  # (count, lm_dim)
    grid_shape: tuple[int, int]

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != self.grid_shape[0] * self.grid_shape[1]:
            raise ShapeError(
                f"{tuple(self.values.shape)} tokens do not match grid shape {self.grid_shape}"
            )

    @property
    def count(self) -> int:
        return self.values.shape[0]

    @property
    def lm_dim(self) -> int:
        return self.values.shape[1]


class Connector(nn.Module):
    """Pixel shuffle then one affine layer: ``flatten(shuffle(x)) @ weight + bias``."""

    def __init__(self, modality: str, dim: int, r: int, lm_dim: int, dtype=torch.float32, init_std: float = 0.02):
        super().__init__()
        self.modality = modality
        self.r = r
        self.dim = dim
        self.lm_dim = lm_dim
        self.weight = nn.Parameter(torch.empty(dim * r * r, lm_dim, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(lm_dim, dtype=dtype))
        nn.init.normal_(self.weight, std=init_std)

    def forward(self, grid: FeatureGrid) -> TokenEmbeddings:
        return connect(grid, self)


def connect(grid: FeatureGrid, params: Connector) -> TokenEmbeddings:
    if grid.modality != params.modality:
        raise ModalityMismatch(f"{grid.modality} grid sent to the {params.modality} connector")
    if grid.dim != params.dim:
        raise ShapeError(f"grid has {grid.dim} channels, connector expects {params.dim}")
    shuffled = shuffle_tensor(grid.values.to(params.weight.dtype), params.r)
    hs, ws, c = shuffled.shape
    tokens = shuffled.reshape(hs * ws, c) @ params.weight + params.bias
    return TokenEmbeddings(tokens, (hs, ws))
