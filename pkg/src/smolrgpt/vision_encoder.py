"""Frozen patch encoder shared by the RGB and depth pathways."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, NonFiniteInput, ShapeError

MODALITIES = ("rgb", "depth")


@dataclass(frozen=True)
class EncoderConfig:
    patch: int = 4
    dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.patch <= 0 or self.dim <= 0:
            raise ConfigError("patch and dim must be positive")


@dataclass
class FeatureGrid:
    """``values`` has shape (height_p, width_p, dim)."""

    modality: str
    values: torch.Tensor

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.values.ndim != 3:
            raise ShapeError(f"feature grid must be 3-D, got {tuple(self.values.shape)}")

    @property
    def height_p(self) -> int:
        return self.values.shape[0]

    @property
    def width_p(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


class PatchEncoder(nn.Module):
    """Patch flattening followed by a fixed random linear map.

    The projection is a buffer drawn from ``cfg.seed``; it is never a
    parameter, so no optimizer can reach it.
    """

    def __init__(self, cfg: EncoderConfig, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        fan_in = cfg.patch * cfg.patch * 3
        proj = rng.standard_normal((fan_in, cfg.dim)) / np.sqrt(fan_in)
        self.register_buffer("projection", torch.from_numpy(proj).to(dtype))

    def patchify(self, image: torch.Tensor) -> torch.Tensor:
        h, w, c = image.shape
        p = self.cfg.patch
        x = image.reshape(h // p, p, w // p, p, c).permute(0, 2, 1, 3, 4)
        return x.reshape(h // p, w // p, p * p * c)

    @torch.no_grad()
    def forward(self, image: torch.Tensor) -> torch.Tensor:
        _check_image(image, self.cfg.patch)
        return self.patchify(image.to(self.projection.dtype)) @ self.projection


def _check_image(image, patch: int) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 image, got shape {tuple(image.shape)}")
    h, w = image.shape[:2]
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {patch}")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64))


_ENCODER_CACHE: dict[tuple[EncoderConfig, torch.dtype], PatchEncoder] = {}


def get_encoder(cfg: EncoderConfig, dtype: torch.dtype = torch.float64) -> PatchEncoder:
    key = (cfg, dtype)
    if key not in _ENCODER_CACHE:
        _ENCODER_CACHE[key] = PatchEncoder(cfg, dtype)
    return _ENCODER_CACHE[key]


def encode_rgb(image, cfg: EncoderConfig, encoder: PatchEncoder | None = None) -> FeatureGrid:
    encoder = encoder or get_encoder(cfg)
    return FeatureGrid("rgb", encoder(_as_tensor(image)))


def normalize_depth(depth) -> torch.Tensor:
    """Min-max normalize to [0, 1]; a constant map becomes all zeros."""
    d = _as_tensor(depth)
    if d.ndim != 2:
        raise ShapeError(f"expected an HxW depth map, got shape {tuple(d.shape)}")
    if not torch.isfinite(d).all():
        raise NonFiniteInput("depth map contains non-finite values")
    lo, hi = d.min(), d.max()
    if hi == lo:
        return torch.zeros_like(d)
    return (d - lo) / (hi - lo)


def replicate_depth(normalized: torch.Tensor) -> torch.Tensor:
    return normalized[..., None].expand(*normalized.shape, 3).contiguous()


def encode_depth(depth, cfg: EncoderConfig, encoder: PatchEncoder | None = None) -> FeatureGrid:
    encoder = encoder or get_encoder(cfg)
    return FeatureGrid("depth", encoder(replicate_depth(normalize_depth(depth))))
