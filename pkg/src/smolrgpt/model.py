"""The full dual-pathway model: frozen encoder, connectors, refiners, mask pooling and the LM."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .connectors import Connector, TokenEmbeddings
from .data_ingest import ConversationSample
from .errors import ConfigError
from .lm_core import LmConfig, TinyDecoder, loss_sum
from .refiners import RegionEmbedding, Refiner, pooling_weights
from .sequence_builder import EmbeddingSequence, assemble, detokenize, layout
from .vision_encoder import EncoderConfig, PatchEncoder, normalize_depth, replicate_depth

GROUPS = ("vision_encoder", "rgb_connector", "depth_connector", "rgb_refiner", "depth_refiner", "lm")

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    image_size: tuple[int, int] = (32, 32)
    shuffle_factor: int = 2
    refiner_layers: int = 2
    refiner_hidden: int | None = None  # defaults to lm_dim
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        validate_model_config(self)

    @property
    def grid_shape(self) -> tuple[int, int]:
        h, w = self.image_size
        return h // self.encoder.patch, w // self.encoder.patch

    @property
    def token_grid(self) -> tuple[int, int]:
        hp, wp = self.grid_shape
        return hp // self.shuffle_factor, wp // self.shuffle_factor

    @property
    def n_vis(self) -> int:
        hs, ws = self.token_grid
        return hs * ws

    @property
    def pool_resolution(self) -> tuple[int, int]:
        hs, ws = self.token_grid
        up = 2 ** self.refiner_layers
        return hs * up, ws * up

    @property
    def refiner_channels(self) -> list[int]:
        d = self.lm.lm_dim
        hidden = self.refiner_hidden or d
        return [d] + [hidden] * (self.refiner_layers - 1) + [d]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder", {}))
        lm = LmConfig(**d.pop("lm", {}))
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(encoder=enc, lm=lm, **d)


def validate_model_config(cfg: ModelConfig) -> None:
    """Reject cross-module shape inconsistencies before anything is allocated."""
    h, w = cfg.image_size
    p = cfg.encoder.patch
    if h <= 0 or w <= 0:
        raise ConfigError("image_size must be positive")
    if h % p or w % p:
        raise ConfigError(f"image size {h}x{w} is not divisible by patch {p}")
    r = cfg.shuffle_factor
    if r < 1:
        raise ConfigError("shuffle_factor must be >= 1")
    hp, wp = h // p, w // p
    if hp % r or wp % r:
        raise ConfigError(f"shuffle factor {r} does not divide the {hp}x{wp} patch grid")
    if cfg.refiner_layers < 1:
        raise ConfigError("refiner_layers must be >= 1")
    if cfg.refiner_hidden is not None and cfg.refiner_hidden <= 0:
        raise ConfigError("refiner_hidden must be positive")
    if cfg.dtype not in DTYPES:
        raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
    hr, wr = cfg.pool_resolution
    if hr > h or wr > w:
        raise ConfigError(f"refined resolution {hr}x{wr} exceeds the {h}x{w} mask resolution")
    if cfg.n_vis >= cfg.lm.max_seq:
        raise ConfigError(f"{cfg.n_vis} image tokens do not fit in max_seq {cfg.lm.max_seq}")


@dataclass
class PreparedSample:
    """Frozen-encoder features and pooling weights, computed once per sample."""

    sample: ConversationSample
    rgb: torch.Tensor  # (hp, wp, dim)
    depth: torch.Tensor | None
    pool: torch.Tensor | None  # (n_masks, hr * wr)
    n_supervised: int


class SmolRGPT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dtype = DTYPES[cfg.dtype]
        torch.manual_seed(cfg.seed)
        d = cfg.lm.lm_dim
        self.vision_encoder = PatchEncoder(cfg.encoder)
        self.rgb_connector = Connector("rgb", cfg.encoder.dim, cfg.shuffle_factor, d, dtype)
        self.depth_connector = Connector("depth", cfg.encoder.dim, cfg.shuffle_factor, d, dtype)
        self.rgb_refiner = Refiner("rgb", cfg.refiner_channels, dtype)
        self.depth_refiner = Refiner("depth", cfg.refiner_channels, dtype)
        torch.manual_seed(cfg.lm.seed)
        self.lm = TinyDecoder(cfg.lm, dtype)

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.cfg.dtype]

    def group(self, name: str) -> nn.Module:
        if name not in GROUPS:
            raise KeyError(f"unknown parameter group {name!r}")
        return getattr(self, name)

    def group_tensors(self, name: str) -> dict[str, torch.Tensor]:
        module = self.group(name)
        out = {f"{name}.{k}": v for k, v in module.named_parameters()}
        out.update({f"{name}.{k}": v for k, v in module.named_buffers()})
        return dict(sorted(out.items()))

    def fingerprints(self) -> dict[str, str]:
        return {g: fingerprint(self.group_tensors(g).values()) for g in GROUPS}

    # -- per-sample preparation -------------------------------------------

    def prepare(self, sample: ConversationSample) -> PreparedSample:
        image = torch.from_numpy(np.ascontiguousarray(sample.image, dtype=np.float64))
        rgb = self.vision_encoder(image)
        depth = None
        if sample.depth is not None:
            depth = self.vision_encoder(replicate_depth(normalize_depth(sample.depth)))
        pool = None
        if sample.masks:
            res = self.cfg.pool_resolution
            pool = torch.stack([pooling_weights(m, res, self.dtype) for m in sample.masks])
        n_supervised = sum(layout(sample.turns, 0).loss_mask)
        return PreparedSample(
            sample, rgb.to(self.dtype), None if depth is None else depth.to(self.dtype), pool, n_supervised
        )

    # -- forward -----------------------------------------------------------

    def _visual(self, preps: list[PreparedSample]):
        """Batched connector + refiner pass; returns per-sample image tokens and region pairs."""
        hs, ws = self.cfg.token_grid
        rgb = torch.stack([p.rgb for p in preps])
        b = rgb.shape[0]
        rgb_tokens = self._project(rgb, self.rgb_connector)  # (B, hs, ws, D)
        need_regions = [i for i, p in enumerate(preps) if p.pool is not None]
        regions: list[list[tuple[RegionEmbedding, RegionEmbedding]]] = [[] for _ in preps]
        if need_regions:
            depth = torch.stack([preps[i].depth for i in need_regions])
            depth_tokens = self._project(depth, self.depth_connector)
            rgb_ref = self.rgb_refiner.forward_batch(rgb_tokens[need_regions])
            dep_ref = self.depth_refiner.forward_batch(depth_tokens)
            hr, wr = self.cfg.pool_resolution
            for j, i in enumerate(need_regions):
                pool = preps[i].pool
                pr = pool @ rgb_ref[j].reshape(hr * wr, -1)
                pd = pool @ dep_ref[j].reshape(hr * wr, -1)
                regions[i] = [
                    (RegionEmbedding("rgb", pr[k]), RegionEmbedding("depth", pd[k]))
                    for k in range(pool.shape[0])
                ]
        images = [TokenEmbeddings(rgb_tokens[i].reshape(hs * ws, -1), (hs, ws)) for i in range(b)]
        return images, regions

    def _project(self, grids: torch.Tensor, connector: Connector) -> torch.Tensor:
        b, hp, wp, c = grids.shape
        r = connector.r
        x = grids.reshape(b, hp // r, r, wp // r, r, c).permute(0, 1, 3, 2, 4, 5)
        x = x.reshape(b, hp // r, wp // r, r * r * c)
        return x @ connector.weight + connector.bias

    def sequences(self, preps: list[PreparedSample], for_generation: bool = False) -> list[EmbeddingSequence]:
        images, regions = self._visual(preps)
        out = []
        for p, img, reg in zip(preps, images, regions):
            turns = p.sample.turns
            if for_generation:
                last_user = max(i for i, t in enumerate(turns) if t.role == "user")
                turns = turns[: last_user + 1]
            has_image = any("<image>" in t.text for t in turns)
            out.append(
                assemble(
                    p.sample,
                    img if has_image else None,
                    reg,
                    self.lm.tok_emb,
                    add_generation_prompt=for_generation,
                    turns=turns,
                )
            )
        return out

    def batch_loss_sum(self, preps: list[PreparedSample]) -> tuple[torch.Tensor, int]:
        seqs = self.sequences(preps)
        t = max(s.length for s in seqs)
        d = self.cfg.lm.lm_dim
        emb = torch.zeros(len(seqs), t, d, dtype=self.dtype)
        targets = torch.zeros(len(seqs), t, dtype=torch.long)
        mask = torch.zeros(len(seqs), t, dtype=torch.bool)
        rows = []
        for i, s in enumerate(seqs):
            pad = t - s.length
            rows.append(torch.cat([s.embeddings, emb[i, :pad]]) if pad else s.embeddings)
            targets[i, : s.length] = s.targets
            mask[i, : s.length] = s.loss_mask
        logits = self.lm(torch.stack(rows))
        return loss_sum(logits, targets, mask)

    @torch.no_grad()
    def respond(self, sample: ConversationSample, max_new: int = 64) -> str:
        seq = self.sequences([self.prepare(sample)], for_generation=True)[0]
        budget = min(max_new, self.cfg.lm.max_seq - seq.length)
        if budget < 1:
            return ""
        ids = self.lm.generate(seq.embeddings, budget)
        return detokenize(ids, skip_special=True).strip()


def fingerprint(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes())
    return h.hexdigest()
