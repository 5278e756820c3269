"""Forward noising, the training objective, and guided ancestral sampling.

The rng draw order inside training_loss is fixed per sample: timestep,
noise, text-drop coin, image-drop coin, then any per-subject grounding
coins inside the projector.  Sampling draws only the initial latent and
the per-step posterior noise, so skipping the unconditional pass (when the
guidance scale is exactly 1) cannot shift the stream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import (AssembledMask, assemble_masks, attention_map_loss,
                        attribution_heatmap)
from .denoiser import Conditioning
from .embedding import BoxNorm
from .errors import ConfigError, ContractError, ShapeError
from .resampler import ImageCondition, SubjectRef
from .rng import Rng
from .tensor import Tensor, concat, no_grad, power, scale, tmean


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        b = self.betas
        ab = self.alpha_bars
        if b.ndim != 1 or ab.shape != b.shape or b.size < 1:
            raise ContractError(f"schedule arrays must be 1-d and equal length, "
                                f"got {b.shape} and {ab.shape}")
        if not np.all((b > 0.0) & (b < 1.0)):
            raise ContractError("betas must lie strictly inside (0, 1)")
        if np.max(np.abs(ab - np.cumprod(1.0 - b))) > 1e-12:
            raise ContractError("alpha_bars must be the running product of (1 - beta)")
        if not np.all(np.diff(ab) < 0.0):
            raise ContractError("alpha_bars must be strictly decreasing")
        if not np.all((ab > 0.0) & (ab < 1.0)):
            raise ContractError("alpha_bars must lie strictly inside (0, 1)")

    @classmethod
    def linear(cls, steps: int = 200, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        if steps < 1:
            raise ContractError(f"need at least one step, got {steps}")
        betas = np.linspace(beta_start, beta_end, steps)
        return cls(betas=betas, alpha_bars=np.cumprod(1.0 - betas))

    @property
    def steps(self) -> int:
        return int(self.betas.size)


def mix_signal_noise(z0: Tensor, eps: Tensor, alpha_bar: float) -> Tensor:
    """sqrt(alpha_bar) * z0 + sqrt(1 - alpha_bar) * eps."""
    if z0.shape != eps.shape:
        raise ShapeError(f"signal shape {z0.shape} != noise shape {eps.shape}")
    if not 0.0 <= alpha_bar <= 1.0:
        raise ContractError(f"alpha_bar must be in [0, 1], got {alpha_bar}")
    return scale(z0, math.sqrt(alpha_bar)) + scale(eps, math.sqrt(1.0 - alpha_bar))


def q_sample(z0: Tensor, t: int, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    if not 0 <= t < schedule.steps:
        raise ContractError(f"timestep {t} outside [0, {schedule.steps})")
    return mix_signal_noise(z0, eps, float(schedule.alpha_bars[t]))


@dataclass
class TrainingSample:
    image: np.ndarray          # (H, W, 3) in [0, 1]
    prompt: str
    subjects: list[SubjectRef]
    pad_flags: list[bool]

    def __post_init__(self):
        if not 1 <= len(self.subjects) <= 4:
            raise ContractError(f"samples carry 1..4 subjects, got {len(self.subjects)}")
        if len(self.pad_flags) != len(self.subjects):
            raise ContractError("one pad flag per subject required")

    def real_subjects(self) -> list[SubjectRef]:
        return [s for s, pad in zip(self.subjects, self.pad_flags) if not pad]


@dataclass(frozen=True)
class DropoutConfig:
    text_drop: float = 0.05
    image_drop: float = 0.05

    def __post_init__(self):
        for name in ("text_drop", "image_drop"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {v}")


@dataclass
class TrainingStats:
    denoise_loss: float
    attention_loss: float
    zero_mass_flags: int
    text_dropped: int
    image_dropped: int


def training_loss(model, batch: list[TrainingSample], rng: Rng, dropout: DropoutConfig,
                  attention_loss_weight: float = 0.0) -> tuple[Tensor, TrainingStats]:
    """Noise-prediction MSE over a batch, plus the weighted in-box attention term."""
    if not batch:
        raise ContractError("training batch must not be empty")
    if attention_loss_weight < 0.0:
        raise ContractError(f"attention_loss_weight must be >= 0, got {attention_loss_weight}")
    total: Tensor | None = None
    mse_sum = 0.0
    am_sum = 0.0
    am_count = 0
    flags = 0
    text_dropped = 0
    image_dropped = 0
    dummy_count = model.cfg.dummy_count
    for sample in batch:
        z0 = model.encode_image(sample.image)
        t = int(rng.integers(0, model.schedule.steps))
        eps = Tensor(rng.normal(z0.shape))
        zt = q_sample(z0, t, eps, model.schedule)
        drop_text = bool(rng.uniform() < dropout.text_drop)
        drop_image = bool(rng.uniform() < dropout.image_drop)
        text = model.encode_prompt(None if drop_text else sample.prompt)
        real = sample.real_subjects()
        if drop_image or not real:
            image = None
            cond = Conditioning(text=text, gamma=model.cfg.train_gamma)
        else:
            image = model.build_image_condition(real, rng, training=True)
            masks = model.masks_for([s.box for s in real])
            cond = Conditioning(text, image, model.dummy_tokens, masks,
                                model.cfg.train_gamma)
        eps_hat, diag = model.denoise(zt, t, cond)
        sample_loss = tmean(power(eps_hat - eps, 2))
        mse_sum += float(sample_loss.data)
        if attention_loss_weight > 0.0 and image is not None and diag.image_maps:
            boxes = [s.box for s in real]
            sets = [list(range(dummy_count + a, dummy_count + b))
                    for a, b in image.per_subject_spans]
            maps = [m for _, m in diag.image_maps]
            dims = [(side, side) for side, _ in diag.image_maps]
            am, am_flags = attention_map_loss(maps, boxes, sets, dims)
            sample_loss = sample_loss + scale(am, attention_loss_weight)
            am_sum += float(am.data)
            am_count += 1
            flags += len(am_flags)
        text_dropped += drop_text
        image_dropped += drop_image
        total = sample_loss if total is None else total + sample_loss
    loss = scale(total, 1.0 / len(batch))
    stats = TrainingStats(denoise_loss=mse_sum / len(batch),
                          attention_loss=am_sum / am_count if am_count else 0.0,
                          zero_mass_flags=flags, text_dropped=text_dropped,
                          image_dropped=image_dropped)
    return loss, stats


# ---- sampling ----

@dataclass(frozen=True)
class PseudoLayoutConfig:
    threshold: float
    switch_step: int

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.switch_step < 0:
            raise ConfigError(f"switch_step must be >= 0, got {self.switch_step}")


@dataclass(frozen=True)
class SamplerConfig:
    guidance_scale: float = 7.5
    gamma: float = 0.6
    num_steps: int = 50
    pseudo_layout: PseudoLayoutConfig | None = None

    def __post_init__(self):
        if self.guidance_scale < 0.0:
            raise ConfigError(f"guidance_scale must be >= 0, got {self.guidance_scale}")
        if not 0.0 <= self.gamma <= 1.5:
            raise ConfigError(f"gamma must be in [0, 1.5], got {self.gamma}")
        if self.num_steps < 1:
            raise ConfigError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.pseudo_layout is not None and self.pseudo_layout.switch_step > self.num_steps:
            raise ConfigError(f"switch_step {self.pseudo_layout.switch_step} exceeds "
                              f"num_steps {self.num_steps}")


def guided_noise(eps_uncond: np.ndarray, eps_cond: np.ndarray,
                 guidance_scale: float) -> np.ndarray:
    """eps_uncond + scale * (eps_cond - eps_uncond).

    The endpoints return the inputs unchanged so that scale 1 reduces to the
    conditional prediction bit for bit.
    """
    if guidance_scale == 1.0:
        return eps_cond
    if guidance_scale == 0.0:
        return eps_uncond
    return eps_uncond + guidance_scale * (eps_cond - eps_uncond)


def strided_timesteps(total_steps: int, num_steps: int) -> np.ndarray:
    """Evenly spaced decreasing timesteps from total_steps - 1 down to 0."""
    if not 1 <= num_steps <= total_steps:
        raise ContractError(f"num_steps must be in [1, {total_steps}], got {num_steps}")
    if num_steps == 1:
        return np.array([total_steps - 1])
    return np.linspace(0, total_steps - 1, num_steps).round().astype(int)[::-1]


def layout_box_from_heatmap(heat: np.ndarray, threshold: float) -> tuple[BoxNorm, bool]:
    """Tightest box around cells at or above threshold; full frame on miss."""
    if heat.ndim != 2:
        raise ShapeError(f"heatmap must be 2-d, got shape {heat.shape}")
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must be in (0, 1), got {threshold}")
    sel = heat >= threshold
    if not sel.any():
        return BoxNorm.full_frame(), True
    ys, xs = np.nonzero(sel)
    h, w = heat.shape
    return BoxNorm(float(xs.min() / w), float(ys.min() / h),
                   float((xs.max() + 1) / w), float((ys.max() + 1) / h)), False


def pseudo_layout_masks(step_text_maps: list[np.ndarray], entity_token_sets: list[list[int]],
                        threshold: float, switch_step: int, latent_h: int, latent_w: int,
                        n_t: int, dummy_count: int,
                        prior_boxes: list[BoxNorm] | None = None):
    """Per-step assembled masks: prior (or full-frame) boxes before switch_step,
    boxes recovered from text attention afterwards.

    Returns (mask schedule, boxes per step, fallback flags as (step, subject)).
    """
    if not 0 <= switch_step <= len(step_text_maps):
        raise ContractError(f"switch_step {switch_step} outside [0, {len(step_text_maps)}]")
    n = len(entity_token_sets)
    if n < 1:
        raise ContractError("need at least one subject")
    if prior_boxes is not None and len(prior_boxes) != n:
        raise ContractError(f"{len(prior_boxes)} prior boxes for {n} subjects")
    before = prior_boxes if prior_boxes is not None else [BoxNorm.full_frame()] * n
    schedule: list[AssembledMask] = []
    boxes_per_step: list[list[BoxNorm]] = []
    flags: list[tuple[int, int]] = []
    for i, amap in enumerate(step_text_maps):
        if i < switch_step:
            boxes = list(before)
        else:
            boxes = []
            for j, toks in enumerate(entity_token_sets):
                if not toks:
                    flags.append((i, j))
                    boxes.append(BoxNorm.full_frame())
                    continue
                heat = attribution_heatmap(amap, toks, latent_h, latent_w).data
                box, fell_back = layout_box_from_heatmap(heat, threshold)
                if fell_back:
                    flags.append((i, j))
                boxes.append(box)
        boxes_per_step.append(boxes)
        schedule.append(assemble_masks(boxes, latent_h, latent_w, n_t, dummy_count))
    return schedule, boxes_per_step, flags


@dataclass
class SampleResult:
    image: np.ndarray
    text_maps: list[tuple[int, np.ndarray]]
    image_maps: list[tuple[int, np.ndarray]]
    layout_boxes: list[list[BoxNorm]] | None
    layout_fallbacks: list[tuple[int, int]]


def cfg_sample(model, prompt: str, subjects: list[SubjectRef], cfg: SamplerConfig,
               rng: Rng, boxes: list[BoxNorm] | None = None,
               image_override: ImageCondition | None = None) -> SampleResult:
    """Classifier-free-guided ancestral sampling down the strided schedule.

    image_override substitutes a prepared token block (e.g. interpolated
    subject tokens) for the one the projector would produce.
    """
    if len(subjects) > 4:
        raise ContractError(f"at most 4 subjects supported, got {len(subjects)}")
    if boxes is None:
        boxes = [s.box for s in subjects]
    if subjects and len(boxes) != len(subjects):
        raise ContractError(f"{len(boxes)} boxes for {len(subjects)} subjects")
    schedule = model.schedule
    ts = strided_timesteps(schedule.steps, cfg.num_steps)
    side = model.cfg.latent_side
    pseudo = cfg.pseudo_layout if subjects else None

    with no_grad():
        text_c = model.encode_prompt(prompt)
        text_u = model.encode_prompt(None)
        if image_override is not None:
            image = image_override
        else:
            image = model.build_image_condition(subjects, None, training=False) \
                if subjects else None
        static_masks = model.masks_for(boxes) if subjects else None
        entity_sets = model.entity_token_positions(prompt, subjects) if pseudo else None
        extract_side = max(model.denoiser.cfg.attn_resolutions) if pseudo else None

        z = rng.normal((side, side, model.cfg.channels))
        prev_text_maps: list[tuple[int, np.ndarray]] = []
        last_diag_text: list[tuple[int, np.ndarray]] = []
        last_diag_image: list[tuple[int, np.ndarray]] = []
        layout_boxes: list[list[BoxNorm]] | None = [] if pseudo else None
        fallbacks: list[tuple[int, int]] = []

        for i, t in enumerate(ts.tolist()):
            masks_now = static_masks
            if pseudo and subjects:
                if i < pseudo.switch_step or not prev_text_maps:
                    boxes_now = list(boxes)
                else:
                    amap = next(m for s, m in prev_text_maps if s == extract_side)
                    boxes_now = []
                    for j, toks in enumerate(entity_sets):
                        if not toks:
                            fallbacks.append((i, j))
                            boxes_now.append(BoxNorm.full_frame())
                            continue
                        heat = attribution_heatmap(amap, toks, extract_side,
                                                   extract_side).data
                        box, fell_back = layout_box_from_heatmap(heat, pseudo.threshold)
                        if fell_back:
                            fallbacks.append((i, j))
                        boxes_now.append(box)
                layout_boxes.append(boxes_now)
                masks_now = model.masks_for(boxes_now)
            cond = Conditioning(text_c, image, model.dummy_tokens if image else None,
                                masks_now, cfg.gamma)
            eps_c, diag = model.denoise(Tensor(z), t, cond)
            if cfg.guidance_scale == 1.0:
                eps_hat = eps_c.data
            else:
                eps_u, _ = model.denoise(Tensor(z), t, Conditioning(text_u, gamma=cfg.gamma))
                eps_hat = guided_noise(eps_u.data, eps_c.data, cfg.guidance_scale)

            prev_text_maps = [(s, m.data.copy()) for s, m in diag.text_maps]
            last_diag_text = prev_text_maps
            last_diag_image = [(s, m.data.copy()) for s, m in diag.image_maps]

            ab_t = float(schedule.alpha_bars[t])
            z0_hat = (z - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
            z0_hat = np.clip(z0_hat, -1.0, 1.0)
            if i + 1 < len(ts):
                ab_prev = float(schedule.alpha_bars[ts[i + 1]])
                alpha_eff = ab_t / ab_prev
                beta_eff = 1.0 - alpha_eff
                mean = (math.sqrt(ab_prev) * beta_eff / (1.0 - ab_t)) * z0_hat \
                    + (math.sqrt(alpha_eff) * (1.0 - ab_prev) / (1.0 - ab_t)) * z
                var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_t)
                z = mean + math.sqrt(max(var, 0.0)) * rng.normal(z.shape)
            else:
                z = z0_hat

    return SampleResult(image=model.decode_latent(z), text_maps=last_diag_text,
                        image_maps=last_diag_image, layout_boxes=layout_boxes,
                        layout_fallbacks=fallbacks)


# ---- subject interpolation ----

def interpolate_subject_tokens(tokens_a: Tensor, tokens_b: Tensor, lam: float) -> Tensor:
    """(1 - lam) * a + lam * b; the endpoints return the inputs themselves."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"interpolation weight must be in [0, 1], got {lam}")
    if tokens_a.shape != tokens_b.shape:
        raise ShapeError(f"token shapes differ: {tokens_a.shape} vs {tokens_b.shape}")
    if lam == 0.0:
        return tokens_a
    if lam == 1.0:
        return tokens_b
    return scale(tokens_a, 1.0 - lam) + scale(tokens_b, lam)


def with_subject_tokens(cond: ImageCondition, subject_idx: int,
                        tokens: Tensor) -> ImageCondition:
    """Copy of the condition with one subject's token block replaced."""
    if not 0 <= subject_idx < cond.n:
        raise ContractError(f"subject index {subject_idx} outside 0..{cond.n - 1}")
    s, e = cond.per_subject_spans[subject_idx]
    if tokens.shape != (e - s, cond.tokens.shape[1]):
        raise ShapeError(f"replacement block must have shape {(e - s, cond.tokens.shape[1])}, "
                         f"got {tokens.shape}")
    parts = []
    if s > 0:
        parts.append(cond.tokens[:s])
    parts.append(tokens)
    if e < cond.tokens.shape[0]:
        parts.append(cond.tokens[e:])
    merged = parts[0] if len(parts) == 1 else concat(parts, axis=0)
    return ImageCondition(tokens=merged, per_subject_spans=cond.per_subject_spans, n=cond.n)
