"""Synthetic two-frame scenes of colored shapes with box annotations.

A scene is 1..4 colored shapes on a plain background.  The second frame of a
pair re-renders the same shapes with jittered placement, standing in for two
frames of a video.  Annotation order is shuffled per frame so downstream
matching is never the identity by construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .embedding import BoxNorm, Vocab
from .errors import ContractError, RenderError
from .ppm import snap_to_byte_grid
from .rng import Rng

SHAPES = ("circle", "square", "triangle", "star")

COLOR_VALUES = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.80, 0.15),
    "blue": (0.15, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.70),
}

BACKGROUND_VALUES = {
    "gray": (0.50, 0.50, 0.50),
    "white": (0.95, 0.95, 0.95),
    "dark": (0.12, 0.12, 0.14),
}

# farthest vertex of any supported shape sits within 1.5 * (scale / 2)
_EXTENT_SLACK = 1.5
_STAR_INNER = 0.5
_MAX_PLACE_TRIES = 32


@dataclass(frozen=True)
class SubjectSpec:
    shape: str
    color: str
    center: tuple[float, float]
    scale: float
    rotation: float

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ContractError(f"unknown shape {self.shape!r}")
        if self.color not in COLOR_VALUES:
            raise ContractError(f"unknown color {self.color!r}")
        if not 0.0 < self.scale <= 0.6:
            raise ContractError(f"scale must be in (0, 0.6], got {self.scale}")

    def fits_canvas(self) -> bool:
        margin = _EXTENT_SLACK * self.scale / 2.0
        cx, cy = self.center
        return margin <= cx <= 1.0 - margin and margin <= cy <= 1.0 - margin


@dataclass(frozen=True)
class SceneSpec:
    subjects: tuple[SubjectSpec, ...]
    background: str
    canvas: int

    def __post_init__(self):
        if not 1 <= len(self.subjects) <= 4:
            raise ContractError(f"scenes carry 1..4 subjects, got {len(self.subjects)}")
        if self.background not in BACKGROUND_VALUES:
            raise ContractError(f"unknown background {self.background!r}")
        if self.canvas < 8:
            raise ContractError(f"canvas must be at least 8, got {self.canvas}")


def _pixel_centers(canvas: int) -> tuple[np.ndarray, np.ndarray]:
    axis = (np.arange(canvas) + 0.5) / canvas
    return np.meshgrid(axis, axis)  # (px, py), each (canvas, canvas)


def _rotate(dx: np.ndarray, dy: np.ndarray, theta: float) -> tuple[np.ndarray, np.ndarray]:
    c, s = math.cos(theta), math.sin(theta)
    return c * dx + s * dy, -s * dx + c * dy


def _polygon_vertices(spec: SubjectSpec) -> np.ndarray:
    r = spec.scale / 2.0
    if spec.shape == "triangle":
        angles = [math.pi / 2 + k * 2 * math.pi / 3 for k in range(3)]
        radii = [r] * 3
    else:  # star
        angles = [math.pi / 2 + k * math.pi / 5 for k in range(10)]
        radii = [r if k % 2 == 0 else r * _STAR_INNER for k in range(10)]
    cx, cy = spec.center
    # screen y grows downward; flip so "up" vertices point up
    return np.array([(cx + rad * math.cos(a + spec.rotation),
                      cy - rad * math.sin(a + spec.rotation))
                     for a, rad in zip(angles, radii)])


def _point_in_polygon(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        crosses = (y0 > py) != (y1 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < x_at)
    return inside


def subject_mask(spec: SubjectSpec, canvas: int) -> np.ndarray:
    """Boolean membership of each pixel center, pre-occlusion."""
    px, py = _pixel_centers(canvas)
    cx, cy = spec.center
    r = spec.scale / 2.0
    if spec.shape == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if spec.shape == "square":
        u, v = _rotate(px - cx, py - cy, -spec.rotation)
        return np.maximum(np.abs(u), np.abs(v)) <= r
    return _point_in_polygon(px, py, _polygon_vertices(spec))


def tight_box(mask: np.ndarray) -> BoxNorm:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise RenderError("subject rasterized to zero pixels")
    h, w = mask.shape
    return BoxNorm(float(xs.min() / w), float(ys.min() / h),
                   float((xs.max() + 1) / w), float((ys.max() + 1) / h))


def render_scene(spec: SceneSpec) -> tuple[np.ndarray, list[np.ndarray]]:
    """(image, per-subject membership masks), image snapped to the 8-bit grid.

    Subjects paint in spec order, later ones over earlier; masks stay
    occlusion-free so boxes describe each shape's own extent.
    """
    n = spec.canvas
    image = np.empty((n, n, 3), dtype=np.float64)
    image[:] = BACKGROUND_VALUES[spec.background]
    px, py = _pixel_centers(n)
    masks = []
    for subj in spec.subjects:
        mask = subject_mask(subj, n)
        masks.append(mask)
        # left-to-right shading in subject frame, rotating with the shape
        u, _ = _rotate(px - subj.center[0], py - subj.center[1], -subj.rotation)
        shade = 0.85 + 0.30 * np.clip(u / subj.scale + 0.5, 0.0, 1.0)
        color = np.array(COLOR_VALUES[subj.color])
        image[mask] = shade[mask, None] * color[None, :]
    return snap_to_byte_grid(image), masks


@dataclass(frozen=True)
class SubjectAnnotation:
    entity_id: int
    color: str
    shape: str
    box: BoxNorm
    crop: np.ndarray
    spec_index: int  # ground-truth identity, for verification only


@dataclass(frozen=True)
class ScenePair:
    spec_a: SceneSpec
    spec_b: SceneSpec
    frame_a: np.ndarray
    frame_b: np.ndarray
    annotations_a: list[SubjectAnnotation]
    annotations_b: list[SubjectAnnotation]


def crop_box(image: np.ndarray, box: BoxNorm) -> np.ndarray:
    h, w = image.shape[:2]
    x0 = int(round(box.x0 * w))
    y0 = int(round(box.y0 * h))
    x1 = max(x0 + 1, int(round(box.x1 * w)))
    y1 = max(y0 + 1, int(round(box.y1 * h)))
    return image[y0:min(y1, h), x0:min(x1, w)].copy()


def sample_scene(rng: Rng, canvas: int = 32, max_subjects: int = 4) -> SceneSpec:
    count = int(rng.integers(1, max_subjects + 1))
    combos = [(c, s) for c in COLOR_VALUES for s in SHAPES]
    picks = [combos[i] for i in rng.permutation(len(combos))[:count]]
    subjects = []
    for color, shape in picks:
        for attempt in range(_MAX_PLACE_TRIES):
            scale = float(rng.uniform(0.15, 0.5))
            margin = _EXTENT_SLACK * scale / 2.0
            center = (float(rng.uniform(margin, 1.0 - margin)),
                      float(rng.uniform(margin, 1.0 - margin)))
            rotation = 0.0 if shape == "circle" else float(rng.uniform(0.0, 2 * math.pi))
            cand = SubjectSpec(shape, color, center, scale, rotation)
            if cand.fits_canvas():
                subjects.append(cand)
                break
        else:
            raise RenderError("could not place a subject on the canvas")
    backgrounds = tuple(BACKGROUND_VALUES)
    background = backgrounds[int(rng.integers(0, len(backgrounds)))]
    return SceneSpec(tuple(subjects), background, canvas)


def jitter_subject(subj: SubjectSpec, rng: Rng, jitter: float) -> SubjectSpec:
    if not 0.0 <= jitter <= 1.0:
        raise ContractError(f"jitter must be in [0, 1], got {jitter}")
    for attempt in range(_MAX_PLACE_TRIES):
        dx = float(rng.uniform(-0.15 * jitter, 0.15 * jitter))
        dy = float(rng.uniform(-0.15 * jitter, 0.15 * jitter))
        factor = float(rng.uniform(1.0 - 0.2 * jitter, 1.0 + 0.25 * jitter))
        dtheta = float(rng.uniform(-math.pi / 6 * jitter, math.pi / 6 * jitter))
        cand = replace(subj,
                       center=(subj.center[0] + dx, subj.center[1] + dy),
                       scale=min(0.6, subj.scale * factor),
                       rotation=0.0 if subj.shape == "circle"
                       else subj.rotation + dtheta)
        if cand.fits_canvas():
            return cand
    raise RenderError("jittered subject left the canvas repeatedly")


def _annotate(spec: SceneSpec, frame: np.ndarray, masks: list[np.ndarray],
              order: np.ndarray, vocab: Vocab) -> list[SubjectAnnotation]:
    out = []
    for idx in order.tolist():
        subj = spec.subjects[idx]
        box = tight_box(masks[idx])
        out.append(SubjectAnnotation(entity_id=vocab.id_of(subj.shape),
                                     color=subj.color, shape=subj.shape,
                                     box=box, crop=crop_box(frame, box),
                                     spec_index=idx))
    return out


def synth_scene_pair(rng: Rng, canvas: int = 32, jitter: float = 1.0,
                     vocab: Vocab | None = None) -> ScenePair:
    vocab = vocab or Vocab.default()
    spec_a = sample_scene(rng, canvas)
    spec_b = replace(spec_a, subjects=tuple(
        jitter_subject(s, rng, jitter) for s in spec_a.subjects))
    frame_a, masks_a = render_scene(spec_a)
    frame_b, masks_b = render_scene(spec_b)
    order_a = rng.permutation(len(spec_a.subjects))
    order_b = rng.permutation(len(spec_b.subjects))
    return ScenePair(spec_a, spec_b, frame_a, frame_b,
                     _annotate(spec_a, frame_a, masks_a, order_a, vocab),
                     _annotate(spec_b, frame_b, masks_b, order_b, vocab))


def caption_for(subjects: list[tuple[str, str]], background: str) -> str:
    """"a red circle and a blue square on a gray background"."""
    if not subjects:
        raise ContractError("caption needs at least one subject")
    parts = [f"a {color} {shape}" for color, shape in subjects]
    return " and ".join(parts) + f" on a {background} background"


def render_subject_crop(color: str, shape: str, size: int = 16,
                        background: str = "gray") -> np.ndarray:
    """Canonical centered reference image for a (color, shape) subject."""
    spec = SceneSpec((SubjectSpec(shape, color, (0.5, 0.5), 0.6, 0.0),),
                     background, max(8, size))
    image, _ = render_scene(spec)
    return image
