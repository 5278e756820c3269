"""Condition embeddings: vocabulary, text encoding, image patches, boxes.

The text and patch encoders are deliberately tiny stand-ins for the large
pretrained encoders a production system would use; conditioning topology,
not encoder quality, is what the rest of the package exercises.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError, VocabError
from .layers import FeedForward, LayerNorm, Linear, sinusoid_table
from .tensor import Tensor, concat, gather_rows, permute, softmax

PAD_TOKEN = "<pad>"
NULL_TOKEN = "<null>"

SUBJECT_COLORS = ("red", "green", "blue", "yellow", "purple")
SHAPE_WORDS = ("circle", "square", "triangle", "star")
BACKGROUND_WORDS = ("gray", "white", "dark")
SCENE_WORDS = ("room", "jungle", "snow", "beach", "grass", "cobblestone", "street")
TEMPLATE_WORDS = ("a", "and", "on", "in", "the", "with", "wearing", "woman", "background")


class Vocab:
    """Dense string-to-id mapping with PAD and NULL always present."""

    def __init__(self, tokens: list[str]):
        if PAD_TOKEN not in tokens or NULL_TOKEN not in tokens:
            raise ContractError("vocabulary must contain the PAD and NULL tokens")
        if len(set(tokens)) != len(tokens):
            raise ContractError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def default(cls) -> "Vocab":
        words = [PAD_TOKEN, NULL_TOKEN]
        words += list(SUBJECT_COLORS) + list(SHAPE_WORDS) + list(BACKGROUND_WORDS)
        words += list(SCENE_WORDS) + list(TEMPLATE_WORDS)
        return cls(words)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self._ids[PAD_TOKEN]

    @property
    def null_id(self) -> int:
        return self._ids[NULL_TOKEN]

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise VocabError(f"unknown token {token!r}")

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise VocabError(f"token id {idx} out of range (vocab size {len(self.tokens)})")
        return self.tokens[idx]

    def encode(self, text: str) -> list[int]:
        return [self.id_of(w) for w in tokenize(text)]


def tokenize(text: str) -> list[str]:
    return [w.strip(",.") for w in text.lower().split() if w.strip(",.")]


@dataclass(frozen=True)
class BoxNorm:
    """Axis-aligned box in normalized image coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ContractError(f"box coordinate {name}={v!r} outside [0, 1]")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ContractError(
                f"box must have positive extent, got [{self.x0}, {self.y0}, {self.x1}, {self.y1}]")

    @classmethod
    def full_frame(cls) -> "BoxNorm":
        return cls(0.0, 0.0, 1.0, 1.0)

    @classmethod
    def from_list(cls, values) -> "BoxNorm":
        if len(values) != 4:
            raise ContractError(f"box needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass
class GroundingTokens:
    """Initial query tokens for one subject, grounded or plain."""

    tokens: Tensor
    source: str  # "grounded" | "learned_base"

    def __post_init__(self):
        if self.source not in ("grounded", "learned_base"):
            raise ContractError(f"unknown grounding source {self.source!r}")


class TextEncoder:
    """Token embedding + position codes, one self-attention block, one FFN block."""

    def __init__(self, vocab: Vocab, d_t: int, max_prompt_len: int, rng):
        self.vocab = vocab
        self.d_t = d_t
        self.max_prompt_len = max_prompt_len
        self.embed = Tensor(rng.normal((len(vocab), d_t)) / np.sqrt(d_t), requires_grad=True)
        self.positions = sinusoid_table(max_prompt_len, d_t)
        self.ln1 = LayerNorm.init(d_t)
        self.wq = Linear.init(rng, d_t, d_t, bias=False)
        self.wk = Linear.init(rng, d_t, d_t, bias=False)
        self.wv = Linear.init(rng, d_t, d_t, bias=False)
        self.ln2 = LayerNorm.init(d_t)
        self.ffn = FeedForward.init(rng, d_t, 2 * d_t)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.embed": self.embed}
        out.update(self.ln1.params(f"{prefix}.ln1"))
        out.update(self.wq.params(f"{prefix}.wq"))
        out.update(self.wk.params(f"{prefix}.wk"))
        out.update(self.wv.params(f"{prefix}.wv"))
        out.update(self.ln2.params(f"{prefix}.ln2"))
        out.update(self.ffn.params(f"{prefix}.ffn"))
        return out

    def pad_ids(self, prompt_ids: list[int]) -> list[int]:
        if len(prompt_ids) > self.max_prompt_len:
            raise ContractError(
                f"prompt has {len(prompt_ids)} tokens, max is {self.max_prompt_len}")
        for i in prompt_ids:
            if not 0 <= i < len(self.vocab):
                raise VocabError(f"token id {i} out of range (vocab size {len(self.vocab)})")
        return list(prompt_ids) + [self.vocab.pad_id] * (self.max_prompt_len - len(prompt_ids))

    def __call__(self, prompt_ids: list[int]) -> Tensor:
        ids = self.pad_ids(prompt_ids)
        x = gather_rows(self.embed, ids) + self.positions
        h = self.ln1(x)
        q, k, v = self.wq(h), self.wk(h), self.wv(h)
        attn = softmax((q @ k.T) / math.sqrt(self.d_t))
        x = x + attn @ v
        x = x + self.ffn(self.ln2(x))
        return x

    def null_prompt(self) -> list[int]:
        return [self.vocab.null_id]


class PatchEncoder:
    """Non-overlapping patch flattening, linear projection, position codes."""

    def __init__(self, d_i: int, patch: int, rng):
        self.d_i = d_i
        self.patch = patch
        self.proj = Linear.init(rng, patch * patch * 3, d_i)
        self._pos_cache: dict[int, np.ndarray] = {}

    def params(self, prefix: str) -> dict[str, Tensor]:
        return self.proj.params(f"{prefix}.proj")

    def num_patches(self, h: int, w: int) -> int:
        return (h // self.patch) * (w // self.patch)

    def project_patches(self, image: Tensor) -> Tensor:
        """Projected patch rows before position codes are added."""
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"expected an (H, W, 3) image, got {image.shape}")
        h, w, _ = image.shape
        p = self.patch
        if h % p or w % p:
            raise ShapeError(f"image dims {h}x{w} not divisible by patch size {p}")
        grid = image.reshape(h // p, p, w // p, p * 3)
        patches = permute(grid, (0, 2, 1, 3)).reshape((h // p) * (w // p), p * p * 3)
        return self.proj(patches)

    def __call__(self, image: Tensor) -> Tensor:
        rows = self.project_patches(image)
        n = rows.shape[0]
        pos = self._pos_cache.get(n)
        if pos is None:
            pos = self._pos_cache.setdefault(n, sinusoid_table(n, self.d_i))
        return rows + pos


def fourier_box_embedding(box: BoxNorm, num_freqs: int) -> np.ndarray:
    """sin/cos of 2^k * pi * v for each coordinate v, coordinate-major order."""
    if num_freqs < 1:
        raise ContractError(f"num_freqs must be >= 1, got {num_freqs}")
    out = np.empty(8 * num_freqs)
    i = 0
    for v in (box.x0, box.y0, box.x1, box.y1):
        for k in range(num_freqs):
            angle = (2.0 ** k) * math.pi * v
            out[i] = math.sin(angle)
            out[i + 1] = math.cos(angle)
            i += 2
    return out


class GroundingFuser:
    """Two-layer MLP mapping (entity embedding, box embedding) to a query offset."""

    def __init__(self, d_t: int, d_q: int, num_freqs: int, rng):
        self.num_freqs = num_freqs
        self.mlp = FeedForward.init(rng, d_t + 8 * num_freqs, 2 * d_q, d_q)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return self.mlp.params(f"{prefix}.mlp")

    def offset(self, entity_id: int, box: BoxNorm, embed_table: Tensor) -> Tensor:
        e = gather_rows(embed_table, [entity_id])
        f = Tensor(fourier_box_embedding(box, self.num_freqs).reshape(1, -1))
        return self.mlp(concat([e, f], axis=1))


def build_grounding_tokens(entity_id: int, box: BoxNorm, base_queries: Tensor,
                           use_grounding: bool, *, fuser: GroundingFuser,
                           embed_table: Tensor) -> GroundingTokens:
    """Offset the learned base queries by the fused entity/box embedding.

    With use_grounding=false the base queries pass through untouched, which
    is what makes the grounding-drop path an exact no-op.
    """
    if not 0 <= entity_id < embed_table.shape[0]:
        raise VocabError(f"entity id {entity_id} out of range")
    if not use_grounding:
        return GroundingTokens(tokens=base_queries, source="learned_base")
    g = fuser.offset(entity_id, box, embed_table)
    return GroundingTokens(tokens=base_queries + g, source="grounded")
