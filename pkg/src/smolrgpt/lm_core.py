"""Tiny pre-norm decoder-only transformer with learned absolute positions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, EmptyLossMask, SequenceTooLong
from .sequence_builder import END_ID, VOCAB, EmbeddingSequence


@dataclass(frozen=True)
class LmConfig:
    lm_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    vocab_size: int = len(VOCAB)
    max_seq: int = 256
    seed: int = 0
    tie_embeddings: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        if self.lm_dim <= 0 or self.n_layers <= 0 or self.n_heads <= 0:
            raise ConfigError("lm_dim, n_layers and n_heads must be positive")
        if self.lm_dim % self.n_heads:
            raise ConfigError(f"lm_dim {self.lm_dim} is not divisible by n_heads {self.n_heads}")
        if self.vocab_size < len(VOCAB):
            raise ConfigError(f"vocab_size must be at least {len(VOCAB)}")


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: LmConfig, dtype):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = nn.Linear(cfg.lm_dim, 3 * cfg.lm_dim, dtype=dtype)
        self.out = nn.Linear(cfg.lm_dim, cfg.lm_dim, dtype=dtype)

    def forward(self, x: torch.Tensor, return_probs: bool = False):
        b, t, d = x.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(x).split(d, dim=-1)
        q, k, v = (z.view(b, t, self.n_heads, hd).transpose(1, 2) for z in (q, k, v))
        if not return_probs:
            y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
            return self.out(y.transpose(1, 2).reshape(b, t, d))
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        causal = torch.ones(t, t, dtype=torch.bool).triu(1)
        scores = scores.masked_fill(causal, float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        y = (probs @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(y), probs


class Block(nn.Module):
    def __init__(self, cfg: LmConfig, dtype):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.lm_dim, dtype=dtype)
        self.attn = CausalSelfAttention(cfg, dtype)
        self.ln2 = nn.LayerNorm(cfg.lm_dim, dtype=dtype)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.lm_dim, cfg.ffn_mult * cfg.lm_dim, dtype=dtype),
            nn.GELU(),
            nn.Linear(cfg.ffn_mult * cfg.lm_dim, cfg.lm_dim, dtype=dtype),
        )

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class TinyDecoder(nn.Module):
    def __init__(self, cfg: LmConfig, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.lm_dim, dtype=dtype)
        self.pos_emb = nn.Embedding(cfg.max_seq, cfg.lm_dim, dtype=dtype)
        self.blocks = nn.ModuleList(Block(cfg, dtype) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.lm_dim, dtype=dtype)
        self.head = None if cfg.tie_embeddings else nn.Linear(cfg.lm_dim, cfg.vocab_size, bias=False, dtype=dtype)
        self._init(cfg.init_std)

    def _init(self, std):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=std)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Embedding):
                nn.init.normal_(m.weight, std=std)

    def forward(self, embeds: torch.Tensor) -> torch.Tensor:
        """Logits for ``(T, D)`` or right-padded ``(B, T, D)`` input embeddings."""
        squeeze = embeds.ndim == 2
        x = embeds[None] if squeeze else embeds
        t = x.shape[1]
        if t > self.cfg.max_seq:
            raise SequenceTooLong(f"sequence of length {t} exceeds max_seq {self.cfg.max_seq}")
        # Always run at max_seq. Kernels pick reduction orders by shape, so a
        # fixed shape is what makes earlier logits bitwise independent of later
        # positions; the causal mask keeps the zero padding out of real rows.
        pad = self.cfg.max_seq - t
        if pad:
            x = torch.cat([x, x.new_zeros(x.shape[0], pad, x.shape[2])], dim=1)
        x = x + self.pos_emb.weight
        for block in self.blocks:
            x = block(x)
        x = self.ln_f(x)
        weight = self.tok_emb.weight if self.head is None else self.head.weight
        logits = (x @ weight.T)[:, :t]
        return logits[0] if squeeze else logits

    @torch.no_grad()
    def generate(self, embeds: torch.Tensor, max_new: int, stop_id: int = END_ID) -> list[int]:
        """Greedy decoding; ties go to the lowest token id. The stop token is included."""
        if max_new < 1:
            raise ValueError("max_new must be at least 1")
        x = embeds
        out: list[int] = []
        for _ in range(max_new):
            logits = self.forward(x)[-1]
            tok = int(torch.argmax(logits))  # first maximal index
            out.append(tok)
            if tok == stop_id:
                break
            x = torch.cat([x, self.tok_emb.weight[tok][None].to(x.dtype)])
        return out


def forward(seq: EmbeddingSequence, params: TinyDecoder) -> torch.Tensor:
    return params(seq.embeddings)


def token_nll(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-position negative log-likelihood via log-sum-exp."""
    logz = torch.logsumexp(logits, dim=-1)
    picked = logits.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    return logz - picked


def loss_sum(logits, targets, loss_mask) -> tuple[torch.Tensor, int]:
    """Summed NLL over masked positions and the number of those positions."""
    mask = loss_mask.to(torch.bool)
    nll = token_nll(logits, targets)
    return torch.where(mask, nll, torch.zeros_like(nll)).sum(), int(mask.sum())


def loss(logits, targets, loss_mask) -> torch.Tensor:
    """Mean next-token cross-entropy over positions where ``loss_mask`` is set."""
    total, n = loss_sum(logits, targets, loss_mask)
    if n == 0:
        raise EmptyLossMask("loss mask selects no positions")
    return total / n


def generate(seq: EmbeddingSequence, params: TinyDecoder, max_new: int) -> list[int]:
    return params.generate(seq.embeddings, max_new)
