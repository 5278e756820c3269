"""Handcrafted, deterministic image-similarity and layout scores.

Features are a 4x4x4 color histogram plus an 8-bin gradient-orientation
histogram, each L1-normalized, concatenated, then L2-normalized.  They are
cheap stand-ins for learned embeddings: reproducible everywhere, but their
absolute values are not comparable to scores from pretrained encoders.
"""
from __future__ import annotations

import math

import numpy as np

from .embedding import BoxNorm, tokenize
from .errors import ContractError
from .scenes import BACKGROUND_VALUES, COLOR_VALUES, SHAPES

_MATCHABLE_VALUES = {**COLOR_VALUES, **BACKGROUND_VALUES}

COLOR_MATCH_TOLERANCE = 0.28
_PRESENCE_SATURATION = 0.02   # fraction of canvas pixels that counts as "present"
_LAYOUT_EPS = 1e-6

# plausible fill ratios of each shape inside its own tight box, rotation included
_FILL_RANGES = {
    "circle": (0.60, 0.90),
    "square": (0.45, 1.00),
    "triangle": (0.30, 0.70),
    "star": (0.15, 0.60),
}


def pixel_box(box: BoxNorm, height: int, width: int) -> tuple[int, int, int, int]:
    x0 = max(0, int(round(box.x0 * width)))
    y0 = max(0, int(round(box.y0 * height)))
    x1 = min(width, int(round(box.x1 * width)))
    y1 = min(height, int(round(box.y1 * height)))
    return x0, y0, x1, y1


def feature_vector(crop: np.ndarray) -> np.ndarray:
    """72-dim color + gradient histogram signature of an image crop."""
    arr = np.asarray(crop, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 2 or arr.shape[1] < 2:
        raise ContractError(f"need an (H>=2, W>=2, 3) crop, got {arr.shape}")
    bins = np.clip((arr * 4).astype(int), 0, 3)
    flat = bins[..., 0] * 16 + bins[..., 1] * 4 + bins[..., 2]
    color_hist = np.bincount(flat.ravel(), minlength=64).astype(np.float64)
    color_hist /= flat.size

    gray = arr.mean(axis=2)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    idx = np.clip(((ang + math.pi) / (2 * math.pi) * 8).astype(int), 0, 7)
    grad_hist = np.bincount(idx.ravel(), weights=mag.ravel(), minlength=8)
    total = grad_hist.sum()
    if total > 0.0:
        grad_hist = grad_hist / total

    vec = np.concatenate([color_hist, grad_hist])
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0.0 else vec


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def subject_fidelity(generated: np.ndarray, reference_crop: np.ndarray,
                     box: BoxNorm) -> float:
    """Cosine similarity of feature signatures, generated-crop vs reference."""
    h, w = generated.shape[:2]
    x0, y0, x1, y1 = pixel_box(box, h, w)
    if x1 - x0 < 2 or y1 - y0 < 2:
        raise ContractError(f"box {box} crops to {x1 - x0}x{y1 - y0} pixels, "
                            "need at least 2x2")
    crop = generated[y0:y1, x0:x1]
    return _cosine(feature_vector(crop), feature_vector(reference_crop))


def fidelity_product(per_subject: list[float]) -> float:
    """Product of per-subject fidelities, clamped to [0, 1] first.

    The product punishes a single neglected subject harder than the mean.
    """
    if not per_subject:
        raise ContractError("need at least one per-subject score")
    out = 1.0
    for v in per_subject:
        out *= min(1.0, max(0.0, float(v)))
    return out


def color_match_mask(image: np.ndarray, color_word: str,
                     tolerance: float = COLOR_MATCH_TOLERANCE) -> np.ndarray:
    if color_word not in _MATCHABLE_VALUES:
        raise ContractError(f"unknown subject color {color_word!r}")
    target = np.array(_MATCHABLE_VALUES[color_word])
    diff = np.abs(np.asarray(image, dtype=np.float64) - target[None, None, :])
    return diff.max(axis=2) <= tolerance


def parse_prompt_mentions(prompt: str) -> list[tuple[str, str]]:
    """(color, shape) pairs from the caption grammar; rejects dangling halves."""
    tokens = tokenize(prompt)
    mentions = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok in COLOR_VALUES:
            if i + 1 >= len(tokens) or tokens[i + 1] not in SHAPES:
                raise ContractError(f"color {tok!r} is not followed by a shape")
            mentions.append((tok, tokens[i + 1]))
            i += 2
            continue
        if tok in SHAPES:
            raise ContractError(f"shape {tok!r} appears without a color")
        i += 1
    return mentions


def _shape_plausibility(mask: np.ndarray, shape: str) -> float:
    ys, xs = np.nonzero(mask)
    area = float(ys.size)
    if area == 0.0:
        return 0.0
    bbox_area = float((ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1))
    fill = area / bbox_area
    lo, hi = _FILL_RANGES[shape]
    if lo <= fill <= hi:
        return 1.0
    dist = lo - fill if fill < lo else fill - hi
    return max(0.0, 1.0 - dist / 0.25)


def text_fidelity(generated: np.ndarray, prompt: str) -> float:
    """Mean per-mention presence score; prompts without mentions score 1."""
    mentions = parse_prompt_mentions(prompt)
    if not mentions:
        return 1.0
    img = np.asarray(generated, dtype=np.float64)
    scores = []
    for color, shape in mentions:
        mask = color_match_mask(img, color)
        presence = float(mask.sum()) / mask.size
        presence_score = min(1.0, presence / _PRESENCE_SATURATION)
        scores.append(presence_score * _shape_plausibility(mask, shape))
    return float(np.mean(scores))


def layout_adherence(generated: np.ndarray, boxes: list[BoxNorm],
                     colors: list[str]) -> float:
    """Mean fraction of each subject's color mass inside its own box."""
    if len(boxes) != len(colors):
        raise ContractError(f"{len(boxes)} boxes for {len(colors)} colors")
    if not boxes:
        raise ContractError("need at least one subject")
    img = np.asarray(generated, dtype=np.float64)
    h, w = img.shape[:2]
    contributions = []
    for box, color in zip(boxes, colors):
        mask = color_match_mask(img, color)
        x0, y0, x1, y1 = pixel_box(box, h, w)
        inside = float(mask[y0:y1, x0:x1].sum())
        total = float(mask.sum())
        contributions.append(inside / (total + _LAYOUT_EPS))
    return float(np.mean(contributions))
