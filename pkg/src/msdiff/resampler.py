"""Distill each subject image into a fixed number of condition tokens.

A stack of attention layers reads image patch features through learned
query tokens (optionally offset by entity/box grounding); the per-subject
token blocks are concatenated in input order. A plain linear projector is
provided as the degraded comparison variant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

from .embedding import BoxNorm, GroundingFuser, GroundingTokens, PatchEncoder, build_grounding_tokens
from .errors import ContractError, ShapeError
from .layers import FeedForward, LayerNorm, Linear
from .rng import Rng
from .tensor import Tensor, concat, softmax

MAX_SUBJECTS = 4


@dataclass(frozen=True)
class ResamplerConfig:
    depth: int = 2
    n_t: int = 4
    d_q: int = 32
    d_i: int = 32
    d_c: int = 32
    heads: int = 2
    grounding_drop_prob: float = 0.1

    def __post_init__(self):
        if self.depth < 1 or self.n_t < 1:
            raise ContractError(f"depth and n_t must be >= 1, got {self.depth} and {self.n_t}")
        if self.d_q % self.heads:
            raise ContractError(f"d_q={self.d_q} not divisible by heads={self.heads}")
        if not 0.0 <= self.grounding_drop_prob <= 1.0:
            raise ContractError(f"grounding_drop_prob must be in [0,1], got {self.grounding_drop_prob}")


@dataclass
class ImageCondition:
    """Concatenated subject tokens plus the span owned by each subject."""

    tokens: Tensor
    per_subject_spans: list[tuple[int, int]]
    n: int

    def __post_init__(self):
        total = self.tokens.shape[0]
        if self.n < 1 or len(self.per_subject_spans) != self.n:
            raise ContractError(f"need one span per subject, got {len(self.per_subject_spans)} for n={self.n}")
        cursor = 0
        for s, e in self.per_subject_spans:
            if s != cursor or e <= s:
                raise ContractError(f"spans must be disjoint, ordered, and tile 0..{total}")
            cursor = e
        if cursor != total:
            raise ContractError(f"spans cover 0..{cursor} but there are {total} tokens")

    @property
    def n_t(self) -> int:
        s, e = self.per_subject_spans[0]
        return e - s


class SubjectRef(NamedTuple):
    image: Tensor
    entity_id: int
    box: BoxNorm


class ResamplerLayer:
    """Pre-norm attention over [image features, queries], then a feed-forward block."""

    def __init__(self, cfg: ResamplerConfig, rng: Rng):
        d = cfg.d_q
        self.heads = cfg.heads
        self.ln_attn = LayerNorm.init(d)
        self.wq = Linear.init(rng, d, d, bias=False)
        self.wk = Linear.init(rng, d, d, bias=False)
        self.wv = Linear.init(rng, d, d, bias=False)
        self.ln_ffn = LayerNorm.init(d)
        self.ffn = FeedForward.init(rng, d, 2 * d)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.ln_attn.params(f"{prefix}.ln_attn"))
        out.update(self.wq.params(f"{prefix}.wq"))
        out.update(self.wk.params(f"{prefix}.wk"))
        out.update(self.wv.params(f"{prefix}.wv"))
        out.update(self.ln_ffn.params(f"{prefix}.ln_ffn"))
        out.update(self.ffn.params(f"{prefix}.ffn"))
        return out

    def __call__(self, f_q: Tensor, f_i: Tensor) -> Tensor:
        d = f_q.shape[-1]
        if f_i.ndim != 2 or f_i.shape[1] != d:
            raise ShapeError(f"image features {f_i.shape} do not match query dim {f_q.shape}")
        h = self.ln_attn(f_q)
        kv_in = concat([f_i, h], axis=0) if f_i.shape[0] else h
        q, k, v = self.wq(h), self.wk(kv_in), self.wv(kv_in)
        dh = d // self.heads
        outs = []
        for i in range(self.heads):
            qs, ks, vs = (t[:, i * dh:(i + 1) * dh] for t in (q, k, v))
            attn = softmax((qs @ ks.T) / math.sqrt(dh))
            outs.append(attn @ vs)
        x = f_q + concat(outs, axis=1)
        return x + self.ffn(self.ln_ffn(x))


class Resampler:
    """Query-token distillation of subject images into d_c condition tokens."""

    def __init__(self, cfg: ResamplerConfig, d_t: int, num_freqs: int, rng: Rng):
        self.cfg = cfg
        self.base_queries = Tensor(rng.normal((cfg.n_t, cfg.d_q)) / math.sqrt(cfg.d_q),
                                   requires_grad=True)
        self.fuser = GroundingFuser(d_t=d_t, d_q=cfg.d_q, num_freqs=num_freqs, rng=rng)
        self.adapter = Linear.init(rng, cfg.d_i, cfg.d_q)
        self.layers = [ResamplerLayer(cfg, rng) for _ in range(cfg.depth)]
        self.out_proj = Linear.init(rng, cfg.d_q, cfg.d_c)

    @property
    def d_c(self) -> int:
        return self.cfg.d_c

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.base_queries": self.base_queries}
        out.update(self.fuser.params(f"{prefix}.grounding"))
        out.update(self.adapter.params(f"{prefix}.adapter"))
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}.layer{i}"))
        out.update(self.out_proj.params(f"{prefix}.out_proj"))
        return out

    def grounding_for(self, subject: SubjectRef, use_grounding: bool,
                      embed_table: Tensor) -> GroundingTokens:
        return build_grounding_tokens(subject.entity_id, subject.box, self.base_queries,
                                      use_grounding, fuser=self.fuser, embed_table=embed_table)

    def resample_subject(self, subject_image: Tensor, grounding: GroundingTokens,
                         patch_encoder: PatchEncoder) -> Tensor:
        if grounding.tokens.shape != (self.cfg.n_t, self.cfg.d_q):
            raise ShapeError(f"grounding tokens {grounding.tokens.shape} do not match "
                             f"configured ({self.cfg.n_t}, {self.cfg.d_q})")
        f_i = self.adapter(patch_encoder(subject_image))
        x = grounding.tokens
        for layer in self.layers:
            x = layer(x, f_i)
        return self.out_proj(x)

    def project_subjects(self, subjects: list[SubjectRef], rng: Rng, training: bool,
                         *, patch_encoder: PatchEncoder, embed_table: Tensor,
                         use_grounding_override: list[bool] | None = None) -> ImageCondition:
        _check_subject_count(len(subjects))
        blocks = []
        for i, subject in enumerate(subjects):
            if use_grounding_override is not None:
                use_g = use_grounding_override[i]
            elif training:
                use_g = rng.uniform() >= self.cfg.grounding_drop_prob
            else:
                use_g = True
            grounding = self.grounding_for(subject, use_g, embed_table)
            blocks.append(self.resample_subject(subject.image, grounding, patch_encoder))
        n_t = self.cfg.n_t
        spans = [(i * n_t, (i + 1) * n_t) for i in range(len(subjects))]
        return ImageCondition(tokens=concat(blocks, axis=0), per_subject_spans=spans,
                              n=len(subjects))


class LinearProjector:
    """Comparison variant: mean-pooled patch features through one linear map."""

    def __init__(self, cfg: ResamplerConfig, rng: Rng):
        self.cfg = cfg
        self.proj = Linear.init(rng, cfg.d_i, cfg.n_t * cfg.d_c)

    @property
    def d_c(self) -> int:
        return self.cfg.d_c

    def params(self, prefix: str) -> dict[str, Tensor]:
        return self.proj.params(f"{prefix}.proj")

    def project_subjects(self, subjects: list[SubjectRef], rng: Rng, training: bool,
                         *, patch_encoder: PatchEncoder, embed_table: Tensor,
                         use_grounding_override: list[bool] | None = None) -> ImageCondition:
        _check_subject_count(len(subjects))
        n_t = self.cfg.n_t
        blocks = []
        for subject in subjects:
            rows = patch_encoder(subject.image)
            pooled = Tensor([[1.0 / rows.shape[0]] * rows.shape[0]]) @ rows
            blocks.append(self.proj(pooled).reshape(n_t, self.cfg.d_c))
        spans = [(i * n_t, (i + 1) * n_t) for i in range(len(subjects))]
        return ImageCondition(tokens=concat(blocks, axis=0), per_subject_spans=spans,
                              n=len(subjects))


def _check_subject_count(n: int) -> None:
    if n == 0:
        raise ContractError("at least one subject is required")
    if n > MAX_SUBJECTS:
        raise ContractError(f"at most {MAX_SUBJECTS} subjects are supported, got {n}")
