"""Dual text/image cross-attention with per-subject spatial masking.

Latent cells are flattened row-major, cell (x, y) -> y * latent_w + x.
Each subject's image tokens are visible only to cells whose center falls
inside that subject's box.  A block of dummy tokens stays visible to every
cell so no softmax row is ever empty, and cells outside all boxes get
their image contribution zeroed outright.  The text branch never sees
masks at all.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .embedding import BoxNorm
from .errors import ContractError, ShapeError
from .layers import LayerNorm, Linear
from .resampler import ImageCondition
from .tensor import (
    MASK_EXCLUDE,
    Tensor,
    add,
    concat,
    div,
    masked_softmax,
    mul,
    permute,
    power,
    scale,
    softmax,
    tsum,
)


def box_cell_membership(box: BoxNorm, latent_h: int, latent_w: int) -> np.ndarray:
    """Boolean (latent_h * latent_w,) vector: cell center inside [x0,x1)x[y0,y1)."""
    if latent_h < 1 or latent_w < 1:
        raise ContractError(f"latent grid must be at least 1x1, got {latent_h}x{latent_w}")
    cx = (np.arange(latent_w) + 0.5) / latent_w
    cy = (np.arange(latent_h) + 0.5) / latent_h
    in_x = (box.x0 <= cx) & (cx < box.x1)
    in_y = (box.y0 <= cy) & (cy < box.y1)
    return (in_y[:, None] & in_x[None, :]).reshape(-1)


@dataclass
class SubjectKeyMask:
    """Additive key mask for one subject: 0.0 where visible, -inf elsewhere."""

    grid: np.ndarray  # (latent_h * latent_w, n_t)
    box: BoxNorm
    latent_h: int
    latent_w: int

    def __post_init__(self) -> None:
        if self.grid.ndim != 2 or self.grid.shape[0] != self.latent_h * self.latent_w:
            raise ShapeError(f"mask grid shape {self.grid.shape} does not cover a "
                             f"{self.latent_h}x{self.latent_w} latent")
        if not np.all((self.grid == 0.0) | np.isneginf(self.grid)):
            raise ContractError("mask grid entries must be 0.0 or the exclusion sentinel")
        cols_equal = np.all(self.grid == self.grid[:, :1])
        if not cols_equal:
            raise ContractError("all key columns of one subject must share one spatial pattern")

    @property
    def inside(self) -> np.ndarray:
        """Boolean (HW,) vector of cells that can see this subject."""
        return self.grid[:, 0] == 0.0


def build_subject_mask(box: BoxNorm, latent_h: int, latent_w: int, n_t: int) -> SubjectKeyMask:
    if n_t < 1:
        raise ContractError(f"need at least one key column per subject, got n_t={n_t}")
    inside = box_cell_membership(box, latent_h, latent_w)
    column = np.where(inside, 0.0, MASK_EXCLUDE)
    grid = np.repeat(column[:, None], n_t, axis=1)
    return SubjectKeyMask(grid=grid, box=box, latent_h=latent_h, latent_w=latent_w)


@dataclass
class AssembledMask:
    """Key mask over [dummy tokens, subject tokens] plus the outside-all-boxes vector."""

    key_mask: np.ndarray  # (HW, dummy_count + n * n_t), 0.0 / -inf
    bg_mask: np.ndarray   # (HW,), 1.0 outside every box, 0.0 inside any
    dummy_count: int

    def __post_init__(self) -> None:
        if self.key_mask.ndim != 2 or self.bg_mask.ndim != 1:
            raise ShapeError(f"bad mask shapes {self.key_mask.shape} / {self.bg_mask.shape}")
        if self.key_mask.shape[0] != self.bg_mask.shape[0]:
            raise ShapeError("key mask and background mask cover different cell counts")
        if not np.all((self.bg_mask == 0.0) | (self.bg_mask == 1.0)):
            raise ContractError("background mask entries must be 0 or 1")
        if self.dummy_count and not np.all(self.key_mask[:, : self.dummy_count] == 0.0):
            raise ContractError("dummy key columns must be unmasked for every query cell")


def assemble_masks(boxes: list[BoxNorm], latent_h: int, latent_w: int,
                   n_t: int, dummy_count: int) -> AssembledMask:
    if not boxes:
        raise ContractError("need at least one subject box to assemble masks")
    if len(boxes) > 4:
        raise ContractError(f"at most 4 subjects supported, got {len(boxes)}")
    if dummy_count < 0:
        raise ContractError(f"dummy_count must be non-negative, got {dummy_count}")
    hw = latent_h * latent_w
    blocks = [np.zeros((hw, dummy_count))]
    covered = np.zeros(hw, dtype=bool)
    for box in boxes:
        sub = build_subject_mask(box, latent_h, latent_w, n_t)
        blocks.append(sub.grid)
        covered |= sub.inside
    key_mask = np.concatenate(blocks, axis=1)
    bg_mask = np.where(covered, 0.0, 1.0)
    return AssembledMask(key_mask=key_mask, bg_mask=bg_mask, dummy_count=dummy_count)


@dataclass
class AttentionResult:
    z_out: Tensor
    text_map: Tensor
    image_map: Tensor | None
    degenerate_cells: np.ndarray | None


class DualCrossAttention:
    """One conditioning block: z + attend(text) + gamma * masked attend(image).

    The query comes from a layer-normed copy of z; text and image branches
    use independent key/value projections so the image pathway can be
    disabled, swapped, or reweighted without touching text behaviour.
    """

    def __init__(self, ln: LayerNorm, wq: Linear, wk_text: Linear, wv_text: Linear,
                 wk_image: Linear, wv_image: Linear):
        self.ln = ln
        self.wq = wq
        self.wk_text = wk_text
        self.wv_text = wv_text
        self.wk_image = wk_image
        self.wv_image = wv_image
        self.d = wq.w.shape[1]

    @classmethod
    def init(cls, rng, d_z: int, d_t: int, d_c: int,
             zero_image_values: bool = False) -> "DualCrossAttention":
        return cls(
            ln=LayerNorm.init(d_z),
            wq=Linear.init(rng, d_z, d_z, bias=False),
            wk_text=Linear.init(rng, d_t, d_z, bias=False),
            wv_text=Linear.init(rng, d_t, d_z, bias=False),
            wk_image=Linear.init(rng, d_c, d_z, bias=False),
            # zero value projection lets a freshly added image branch start
            # as an exact no-op on top of a text-only model
            wv_image=Linear.init(rng, d_c, d_z, bias=False, zero=zero_image_values),
        )

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.ln.params(f"{prefix}.ln"))
        out.update(self.wq.params(f"{prefix}.wq"))
        out.update(self.wk_text.params(f"{prefix}.wk_text"))
        out.update(self.wv_text.params(f"{prefix}.wv_text"))
        out.update(self.wk_image.params(f"{prefix}.wk_image"))
        out.update(self.wv_image.params(f"{prefix}.wv_image"))
        return out

    def text_param_names(self, prefix: str) -> list[str]:
        names = list(self.ln.params(f"{prefix}.ln"))
        names += list(self.wq.params(f"{prefix}.wq"))
        names += list(self.wk_text.params(f"{prefix}.wk_text"))
        names += list(self.wv_text.params(f"{prefix}.wv_text"))
        return names

    def __call__(self, z: Tensor, text_tokens: Tensor, image_cond: ImageCondition | None,
                 dummy_tokens: Tensor, masks: AssembledMask | None,
                 gamma: float) -> AttentionResult:
        q = self.wq(self.ln(z))
        inv = 1.0 / math.sqrt(self.d)

        k_t = self.wk_text(text_tokens)
        text_map = softmax(scale(q @ permute(k_t, (1, 0)), inv))
        z_txt = text_map @ self.wv_text(text_tokens)
        z_out = z + z_txt

        if image_cond is None or gamma == 0.0:
            return AttentionResult(z_out=z_out, text_map=text_map,
                                   image_map=None, degenerate_cells=None)

        if masks is None:
            raise ContractError("image conditioning requires assembled masks")
        keys_in = concat([dummy_tokens, image_cond.tokens], axis=0)
        expected = masks.dummy_count + image_cond.tokens.shape[0]
        if masks.key_mask.shape != (z.shape[0], expected):
            raise ShapeError(f"key mask shape {masks.key_mask.shape} does not match "
                             f"{z.shape[0]} cells x {expected} keys")
        k_i = self.wk_image(keys_in)
        image_map, degenerate = masked_softmax(scale(q @ permute(k_i, (1, 0)), inv),
                                               masks.key_mask)
        z_img_hat = image_map @ self.wv_image(keys_in)
        keep = (1.0 - masks.bg_mask)[:, None]
        z_img = mul(z_img_hat, keep)
        z_out = z_out + scale(z_img, gamma)
        return AttentionResult(z_out=z_out, text_map=text_map,
                               image_map=image_map, degenerate_cells=degenerate)


def attention_map_loss(maps: list[Tensor], boxes: list[BoxNorm],
                       token_index_sets: list[list[int]],
                       dims: tuple[int, int] | list[tuple[int, int]],
                       ) -> tuple[Tensor, list[tuple[int, int]]]:
    """Penalty for subject attention mass landing outside the subject's box.

    dims gives the (latent_h, latent_w) grid behind each map; a single pair
    applies to every map.  Per layer and subject: ratio = in-box mass /
    total mass over that subject's key columns, term = (1 - ratio)^2; the
    result is the plain mean of all terms.  Subjects with zero total mass
    contribute a constant 1 and are reported in the flag list as
    (layer, subject).
    """
    if not maps:
        raise ContractError("need at least one attention map")
    if len(boxes) != len(token_index_sets) or not boxes:
        raise ContractError(f"got {len(boxes)} boxes for {len(token_index_sets)} token sets")
    dims_list = [dims] * len(maps) if isinstance(dims, tuple) else list(dims)
    if len(dims_list) != len(maps):
        raise ContractError(f"got {len(dims_list)} grid sizes for {len(maps)} maps")

    total: Tensor | None = None
    flags: list[tuple[int, int]] = []
    count = 0
    for li, (attn, (latent_h, latent_w)) in enumerate(zip(maps, dims_list)):
        hw = latent_h * latent_w
        memberships = [box_cell_membership(b, latent_h, latent_w) for b in boxes]
        if attn.ndim != 2 or attn.shape[0] != hw:
            raise ShapeError(f"attention map {li} has shape {attn.shape}, "
                             f"expected {hw} cell rows")
        for si, cols in enumerate(token_index_sets):
            if not cols:
                raise ContractError(f"subject {si} has an empty token index set")
            pick_cols = np.zeros((hw, attn.shape[1]))
            pick_cols[:, list(cols)] = 1.0
            pick_in = pick_cols * memberships[si][:, None]
            mass_total = tsum(mul(attn, pick_cols))
            if float(mass_total.data) == 0.0:
                flags.append((li, si))
                term = Tensor(1.0)
            else:
                ratio = div(tsum(mul(attn, pick_in)), mass_total)
                term = power(add(scale(ratio, -1.0), 1.0), 2)
            total = term if total is None else add(total, term)
            count += 1
    assert total is not None
    return scale(total, 1.0 / count), flags


def attribution_heatmap(attn: Tensor | np.ndarray, token_indices: list[int],
                        latent_h: int, latent_w: int) -> Tensor:
    """Mean attention over chosen key columns as a min-max normalized grid."""
    if not token_indices:
        raise ContractError("token_indices must not be empty")
    data = attn.data if isinstance(attn, Tensor) else np.asarray(attn, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] != latent_h * latent_w:
        raise ShapeError(f"attention shape {data.shape} does not cover a "
                         f"{latent_h}x{latent_w} latent")
    idx = list(token_indices)
    if min(idx) < 0 or max(idx) >= data.shape[1]:
        raise ContractError(f"token indices {idx} out of range for {data.shape[1]} keys")
    grid = data[:, idx].mean(axis=1).reshape(latent_h, latent_w)
    lo = grid.min()
    hi = grid.max()
    if hi == lo:
        return Tensor(np.zeros((latent_h, latent_w)))
    return Tensor((grid - lo) / (hi - lo))
