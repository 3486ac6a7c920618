"""Transpose-convolution refiners and mask pooling of region embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .connectors import TokenEmbeddings
from .data_ingest import RegionMask, decode_mask
from .errors import EmptyRegion, ModalityMismatch, ShapeError
from .vision_encoder import FeatureGrid

KERNEL, STRIDE, PADDING = 4, 2, 1


class Refiner(nn.Module):
    """Stack of stride-2 transpose convolutions, ReLU between layers, none after the last.

    Each layer maps spatial size s -> 2s exactly.
    """

    def __init__(self, modality: str, channels: list[int], dtype=torch.float32):
        super().__init__()
        if len(channels) < 2:
            raise ValueError("need at least an input and an output channel count")
        self.modality = modality
        self.channels = list(channels)
        self.layers = nn.ModuleList(
            nn.ConvTranspose2d(cin, cout, KERNEL, STRIDE, PADDING, dtype=dtype)
            for cin, cout in zip(channels[:-1], channels[1:])
        )
        # He init against the effective fan-in: with k=4, s=2 every output cell
        # sees 2x2 input cells, so fan_in = 4 * c_in. Keeps region embeddings on
        # the same scale as image tokens instead of shrinking ~4x per layer.
        for k, layer in enumerate(self.layers):
            gain = 2.0 if k < len(self.layers) - 1 else 1.0
            nn.init.normal_(layer.weight, std=(gain / (4 * layer.in_channels)) ** 0.5)
            nn.init.zeros_(layer.bias)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def upsample(self) -> int:
        return 2 ** self.n_layers

    def forward_batch(self, x: torch.Tensor) -> torch.Tensor:
        """(B, h, w, c_in) -> (B, h*2^L, w*2^L, c_out)."""
        x = x.permute(0, 3, 1, 2)
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = torch.relu(x)
        return x.permute(0, 2, 3, 1)

    def forward(self, tokens: TokenEmbeddings) -> FeatureGrid:
        return refine(tokens, self)


def refine(tokens: TokenEmbeddings, params: Refiner, modality: str | None = None) -> FeatureGrid:
    if modality is not None and modality != params.modality:
        raise ModalityMismatch(f"{modality} tokens sent to the {params.modality} refiner")
    if tokens.lm_dim != params.channels[0]:
        raise ShapeError(f"tokens have width {tokens.lm_dim}, refiner expects {params.channels[0]}")
    hs, ws = tokens.grid_shape
    grid = tokens.values.reshape(1, hs, ws, tokens.lm_dim)
    return FeatureGrid(params.modality, params.forward_batch(grid)[0])


@dataclass
class RegionEmbedding:
    modality: str
    values: torch.Tensor  # (lm_dim,)


def resample_mask(mask: RegionMask | np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resample to ``size``; target cell i samples source row floor((i + 1/2) H / h)."""
    grid = decode_mask(mask) if isinstance(mask, RegionMask) else np.asarray(mask)
    H, W = grid.shape
    h, w = size
    rows = ((2 * np.arange(h) + 1) * H) // (2 * h)
    cols = ((2 * np.arange(w) + 1) * W) // (2 * w)
    return grid[np.ix_(rows, cols)].astype(np.uint8)


def pooling_weights(mask: RegionMask | np.ndarray, size: tuple[int, int], dtype=torch.float64) -> torch.Tensor:
    """Flattened averaging weights (h*w,) for ``mask`` at ``size``: 1/|mask| on active cells."""
    small = resample_mask(mask, size)
    n = int(small.sum())
    if n == 0:
        raise EmptyRegion(f"mask has no active cell at resolution {size[0]}x{size[1]}")
    return torch.from_numpy(small.reshape(-1).astype(np.float64) / n).to(dtype)


def mask_pool(refined: FeatureGrid, mask: RegionMask | np.ndarray) -> RegionEmbedding:
    h, w, c = refined.values.shape
    weights = pooling_weights(mask, (h, w), refined.values.dtype)
    return RegionEmbedding(refined.modality, weights @ refined.values.reshape(h * w, c))
