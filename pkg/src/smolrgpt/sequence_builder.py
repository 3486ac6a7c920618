"""Byte-level tokenizer, chat template and interleaved embedding assembly."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import torch

from .connectors import TokenEmbeddings
from .data_ingest import MASK_TOKEN, ConversationSample, Turn
from .errors import MissingImageTokens, RegionCountMismatch, RoleOrderError
from .refiners import RegionEmbedding

SPECIAL_TOKENS = (
    "<image>",
    "<mask_rgb>",
    "<mask_depth>",
    "<bos>",
    "<eos>",
    "<|user|>",
    "<|assistant|>",
    "<|end|>",
    "<pad>",
)


class Vocabulary:
    """256 byte tokens followed by the special tokens, in a fixed order."""

    n_bytes = 256

    def __init__(self):
        self.special = {tok: self.n_bytes + i for i, tok in enumerate(SPECIAL_TOKENS)}
        self.inverse = {i: tok for tok, i in self.special.items()}
        self._split = re.compile("(" + "|".join(re.escape(t) for t in SPECIAL_TOKENS) + ")")

    def __len__(self) -> int:
        return self.n_bytes + len(SPECIAL_TOKENS)

    def __getitem__(self, token: str) -> int:
        return self.special[token]

    def tokenize(self, text: str) -> list[int]:
        ids: list[int] = []
        for piece in self._split.split(text):
            if not piece:
                continue
            if piece in self.special:
                ids.append(self.special[piece])
            else:
                ids.extend(piece.encode("utf-8"))
        return ids

    def detokenize(self, ids: Sequence[int], skip_special: bool = False) -> str:
        out: list[str] = []
        buf = bytearray()
        for i in ids:
            i = int(i)
            if i < self.n_bytes:
                buf.append(i)
                continue
            out.append(buf.decode("utf-8", errors="replace"))
            buf = bytearray()
            if not skip_special:
                out.append(self.inverse[i])
        out.append(buf.decode("utf-8", errors="replace"))
        return "".join(out)


VOCAB = Vocabulary()
IMAGE_ID = VOCAB["<image>"]
MASK_RGB_ID = VOCAB["<mask_rgb>"]
MASK_DEPTH_ID = VOCAB["<mask_depth>"]
BOS_ID = VOCAB["<bos>"]
USER_ID = VOCAB["<|user|>"]
ASSISTANT_ID = VOCAB["<|assistant|>"]
END_ID = VOCAB["<|end|>"]
PAD_ID = VOCAB["<pad>"]


def tokenize(text: str) -> list[int]:
    return VOCAB.tokenize(text)


def detokenize(ids: Sequence[int], skip_special: bool = False) -> str:
    return VOCAB.detokenize(ids, skip_special)


def render_chat(turns: Sequence[Turn | tuple[str, str]], add_generation_prompt: bool = False) -> str:
    parts = ["<bos>"]
    for i, turn in enumerate(turns):
        role, text = (turn.role, turn.text) if isinstance(turn, Turn) else turn
        expected = "user" if i % 2 == 0 else "assistant"
        if role != expected:
            raise RoleOrderError(f"turn {i} has role {role!r}, expected {expected!r}")
        parts.append("<|user|>" if role == "user" else "<|assistant|>")
        parts.append(text)
        parts.append("<|end|>")
    if add_generation_prompt:
        parts.append("<|assistant|>")
    return "".join(parts)


def expand_mask_placeholders(text: str) -> str:
    return text.replace(MASK_TOKEN, "<mask_rgb><mask_depth>")


# provenance tags
TEXT = "text"
IMAGE_TOKEN = "image_token"


def region_tag(modality: str, k: int) -> str:
    return f"region_{modality}({k})"


@dataclass
class EmbeddingSequence:
    embeddings: torch.Tensor  # (length, lm_dim)
    provenance: list[str]
    loss_mask: torch.Tensor  # (length,) bool
    targets: torch.Tensor  # (length,) long, next-token id where loss_mask is set
    token_ids: list[int]  # per position; -1 at substituted positions

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]

    @property
    def lm_dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class TokenLayout:
    """Embedding-free skeleton of an assembled sequence.

    ``slots`` lists, per position, ("text", token_id), ("image", j) or ("rgb"/"depth", k).
    """

    slots: list[tuple[str, int]]
    loss_mask: list[bool]
    targets: list[int]
    n_text: int
    n_placeholders: int
    n_masks: int
    has_image: bool


def layout(turns: Sequence[Turn], n_vis: int, add_generation_prompt: bool = False) -> TokenLayout:
    """Plan positions and the loss mask for a chat; shared by training and generation."""
    raw = tokenize(render_chat(turns, add_generation_prompt))
    n_masks = sum(t.text.count(MASK_TOKEN) for t in turns)
    has_image = IMAGE_ID in raw
    # <mask> is not a vocabulary entry; count each occurrence as one text token
    n_text = len(raw) - (len(MASK_TOKEN) - 1) * n_masks

    # mark which expanded tokens belong to assistant content (incl. its <|end|>)
    ids: list[int] = []
    trained: list[bool] = []
    in_assistant = False
    for piece_id in tokenize(expand_mask_placeholders(render_chat(turns, add_generation_prompt))):
        if piece_id == ASSISTANT_ID:
            ids.append(piece_id)
            trained.append(False)
            in_assistant = True
            continue
        if piece_id == USER_ID:
            in_assistant = False
        ids.append(piece_id)
        trained.append(in_assistant)
        if piece_id == END_ID:
            in_assistant = False

    slots: list[tuple[str, int]] = []
    token_of_slot: list[int] = []
    train_of_slot: list[bool] = []
    k_rgb = k_depth = 0
    for tid, tr in zip(ids, trained):
        if tid == IMAGE_ID:
            for j in range(n_vis):
                slots.append(("image", j))
                token_of_slot.append(-1)
                train_of_slot.append(False)
        elif tid == MASK_RGB_ID:
            slots.append(("rgb", k_rgb))
            token_of_slot.append(-1)
            train_of_slot.append(False)
            k_rgb += 1
        elif tid == MASK_DEPTH_ID:
            slots.append(("depth", k_depth))
            token_of_slot.append(-1)
            train_of_slot.append(False)
            k_depth += 1
        else:
            slots.append(("text", tid))
            token_of_slot.append(tid)
            train_of_slot.append(tr)

    # position i predicts the token at i + 1
    n = len(slots)
    loss_mask = [False] * n
    targets = [PAD_ID] * n
    for i in range(n - 1):
        if train_of_slot[i + 1]:
            loss_mask[i] = True
            targets[i] = token_of_slot[i + 1]
    return TokenLayout(slots, loss_mask, targets, n_text, int(has_image) + n_masks, n_masks, has_image)


def assemble(
    sample: ConversationSample,
    image_tokens: TokenEmbeddings | None,
    region_embeds: Sequence[tuple[RegionEmbedding, RegionEmbedding]],
    text_embedding_table: torch.Tensor | torch.nn.Embedding,
    add_generation_prompt: bool = False,
    turns: Sequence[Turn] | None = None,
) -> EmbeddingSequence:
    """Substitute visual and region embeddings into the embedded chat, position by position."""
    turns = list(sample.turns if turns is None else turns)
    table = text_embedding_table.weight if isinstance(text_embedding_table, torch.nn.Embedding) else text_embedding_table
    n_masks = sum(t.text.count(MASK_TOKEN) for t in turns if t.role == "user")
    if len(region_embeds) != n_masks:
        raise RegionCountMismatch(f"{n_masks} <mask> placeholders but {len(region_embeds)} region embeddings")
    has_image = any("<image>" in t.text for t in turns)
    if has_image and image_tokens is None:
        raise MissingImageTokens(f"sample {sample.sample_id!r} has <image> but no image tokens were given")
    if not has_image and image_tokens is not None:
        raise MissingImageTokens(f"sample {sample.sample_id!r} has image tokens but no <image> placeholder")
    n_vis = image_tokens.count if image_tokens is not None else 0
    plan = layout(turns, n_vis, add_generation_prompt)

    # One gather over [text rows | image tokens | rgb regions | depth regions].
    text_ids = [tid for kind, tid in plan.slots if kind == "text"]
    sources = [table[torch.tensor(text_ids, dtype=torch.long)]]
    offset = {"text": 0, "image": len(text_ids)}
    if image_tokens is not None:
        sources.append(image_tokens.values.to(table.dtype))
    offset["rgb"] = offset["image"] + n_vis
    offset["depth"] = offset["rgb"] + n_masks
    for modality in ("rgb", "depth"):
        for k, pair in enumerate(region_embeds):
            emb = pair[0] if modality == "rgb" else pair[1]
            if emb.modality != modality:
                raise RegionCountMismatch(f"region pair {k} has a {emb.modality} embedding in the {modality} slot")
            sources.append(emb.values.to(table.dtype)[None])
    index = []
    provenance = []
    t = 0
    for kind, idx in plan.slots:
        if kind == "text":
            index.append(t)
            t += 1
            provenance.append(TEXT)
        elif kind == "image":
            index.append(offset["image"] + idx)
            provenance.append(IMAGE_TOKEN)
        else:
            index.append(offset[kind] + idx)
            provenance.append(region_tag(kind, idx))
    embeddings = torch.cat(sources).index_select(0, torch.tensor(index, dtype=torch.long))
    return EmbeddingSequence(
        embeddings=embeddings,
        provenance=provenance,
        loss_mask=torch.tensor(plan.loss_mask, dtype=torch.bool),
        targets=torch.tensor(plan.targets, dtype=torch.long),
        token_ids=[tid if kind == "text" else -1 for kind, tid in plan.slots],
    )
