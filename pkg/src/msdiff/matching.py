"""Cross-frame subject correspondence via minimum-cost assignment.

The assignment solver is the classic potentials/augmenting-path algorithm,
exact at the n, m <= 8 scale used here.  Matching cost is cosine distance
between mean-pooled patch embeddings of the subject crops; pairs above the
rejection threshold fall back to the subject's own crop from the target
frame, so every target subject always ends up with a reference image.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .embedding import PatchEncoder
from .errors import ContractError
from .ppm import resize_nearest
from .rng import Rng
from .scenes import SubjectAnnotation
from .tensor import Tensor, no_grad

MATCH_THRESHOLD = 0.3


def hungarian_match(cost: np.ndarray) -> tuple[list[tuple[int, int]], float]:
    """Minimum-total-cost one-to-one assignment of min(n, m) pairs."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return [], 0.0
    if cost.ndim != 2:
        raise ContractError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix must be finite")
    n, m = cost.shape
    if n > m:
        pairs, total = hungarian_match(cost.T)
        return sorted((r, c) for c, r in pairs), total

    # potentials over a virtual 0th row/column
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    col_row = [0] * (m + 1)   # column -> assigned row, 0 = free
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        col_row[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = col_row[j0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1][j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[col_row[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if col_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            col_row[j0] = col_row[j1]
            j0 = j1
    pairs = sorted((col_row[j] - 1, j - 1) for j in range(1, m + 1) if col_row[j])
    total = float(sum(cost[r, c] for r, c in pairs))
    return pairs, total


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def make_patch_embedder(d_i: int = 16, patch: int = 4, size: int = 16,
                        seed: int = 0xD474) -> Callable[[np.ndarray], np.ndarray]:
    """Mean-pooled patch features from a fixed-seed encoder.

    The fixed seed keeps dataset construction reproducible and independent
    of any trained model.
    """
    encoder = PatchEncoder(d_i=d_i, patch=patch, rng=Rng(seed))

    def embed(crop: np.ndarray) -> np.ndarray:
        arr = resize_nearest(np.asarray(crop, dtype=np.float64), size, size)
        with no_grad():
            rows = encoder.project_patches(Tensor(arr))
        return rows.data.mean(axis=0)

    return embed


@dataclass
class MatchOutcome:
    pairs: list[tuple[int, int]]        # accepted (ref idx, target idx)
    rejected: list[tuple[int, int]]     # assignment pairs over the threshold
    fallback_targets: list[int]         # targets resolved from their own crop
    reference_crops: list[np.ndarray]   # one per target subject


def match_subjects(ref_annotations: list[SubjectAnnotation],
                   target_annotations: list[SubjectAnnotation],
                   embed: Callable[[np.ndarray], np.ndarray],
                   threshold: float = MATCH_THRESHOLD) -> MatchOutcome:
    if threshold < 0.0:
        raise ContractError(f"threshold must be >= 0, got {threshold}")
    if not target_annotations:
        return MatchOutcome([], [], [], [])
    ref_vecs = [embed(a.crop) for a in ref_annotations]
    tgt_vecs = [embed(a.crop) for a in target_annotations]
    cost = np.array([[1.0 - cosine_similarity(rv, tv) for tv in tgt_vecs]
                     for rv in ref_vecs]).reshape(len(ref_vecs), len(tgt_vecs))
    pairs, _ = hungarian_match(cost) if ref_annotations else ([], 0.0)
    accepted: dict[int, int] = {}
    rejected: list[tuple[int, int]] = []
    for r, t in pairs:
        if cost[r, t] <= threshold:
            accepted[t] = r
        else:
            rejected.append((r, t))
    crops: list[np.ndarray] = []
    fallbacks: list[int] = []
    for t, ann in enumerate(target_annotations):
        if t in accepted:
            crops.append(ref_annotations[accepted[t]].crop)
        else:
            fallbacks.append(t)
            crops.append(ann.crop)
    return MatchOutcome(pairs=sorted((r, t) for t, r in accepted.items()),
                        rejected=rejected, fallback_targets=fallbacks,
                        reference_crops=crops)
