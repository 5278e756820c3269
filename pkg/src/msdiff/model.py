"""Full toy generator: encoders, subject projector, denoiser, parameter registry.

Parameter names are grouped into three sets.  "base" covers the text
pathway and the denoiser trunk, "adapter" covers everything that feeds the
image branch (subject projector, grounding fusion, dummy tokens, and the
image key/value projections inside the conditioning blocks), and the patch
encoder stays frozen as a stand-in for a pretrained feature extractor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AssembledMask, assemble_masks
from .denoiser import Conditioning, DenoiseDiagnostics, Denoiser, DenoiserConfig
from .diffusion import NoiseSchedule
from .embedding import BoxNorm, PatchEncoder, TextEncoder, Vocab
from .errors import ConfigError, ContractError
from .optim import ParamStore, gaussian_init
from .resampler import LinearProjector, Resampler, ResamplerConfig, SubjectRef
from .rng import Rng
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    latent_pool: int = 1        # 1: the image is the latent; 2: 2x average pool
    channels: int = 3
    d_t: int = 32
    max_prompt_len: int = 24
    patch: int = 4
    num_freqs: int = 4
    base_width: int = 16
    attn_resolutions: tuple[int, ...] = (16, 8)
    heads: int = 1
    subject_projector: str = "resampler"   # "resampler" or "linear"
    masked_attention: bool = True
    resampler_depth: int = 2
    resampler_heads: int = 2
    n_t: int = 4
    d_q: int = 32
    d_i: int = 32
    d_c: int = 32
    grounding_drop_prob: float = 0.1
    dummy_count: int = 4
    train_gamma: float = 1.0
    schedule_steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.latent_pool not in (1, 2):
            raise ConfigError(f"latent_pool must be 1 or 2, got {self.latent_pool}")
        if self.image_size % (4 * self.latent_pool):
            raise ConfigError(f"image_size {self.image_size} must be divisible by "
                              f"{4 * self.latent_pool}")
        if self.subject_projector not in ("resampler", "linear"):
            raise ConfigError(f"unknown subject_projector {self.subject_projector!r}")
        if not 0.0 < self.train_gamma <= 1.5:
            raise ConfigError(f"train_gamma must be in (0, 1.5], got {self.train_gamma}")

    @property
    def latent_side(self) -> int:
        return self.image_size // self.latent_pool


class Model:
    def __init__(self, cfg: ModelConfig, vocab: Vocab, text: TextEncoder,
                 patches: PatchEncoder, projector, denoiser: Denoiser,
                 dummy_tokens: Tensor, schedule: NoiseSchedule):
        self.cfg = cfg
        self.vocab = vocab
        self.text = text
        self.patches = patches
        self.projector = projector
        self.denoiser = denoiser
        self.dummy_tokens = dummy_tokens
        self.schedule = schedule
        self.store = ParamStore()
        named: dict[str, Tensor] = {}
        named.update(text.params("text"))
        named.update(patches.params("patch"))
        named.update(projector.params("projector"))
        named.update(denoiser.params("denoiser"))
        named["dummy_tokens"] = dummy_tokens
        for name in sorted(named):
            self.store.add(name, named[name])

    @classmethod
    def build(cls, cfg: ModelConfig, rng: Rng) -> "Model":
        vocab = Vocab.default()
        text = TextEncoder(vocab, d_t=cfg.d_t, max_prompt_len=cfg.max_prompt_len,
                           rng=rng.child("text"))
        patches = PatchEncoder(d_i=cfg.d_i, patch=cfg.patch, rng=rng.child("patch"))
        rs_cfg = ResamplerConfig(depth=cfg.resampler_depth, n_t=cfg.n_t, d_q=cfg.d_q,
                                 d_i=cfg.d_i, d_c=cfg.d_c, heads=cfg.resampler_heads,
                                 grounding_drop_prob=cfg.grounding_drop_prob)
        if cfg.subject_projector == "resampler":
            projector = Resampler(rs_cfg, d_t=cfg.d_t, num_freqs=cfg.num_freqs,
                                  rng=rng.child("projector"))
        else:
            projector = LinearProjector(rs_cfg, rng=rng.child("projector"))
        den_cfg = DenoiserConfig(latent_h=cfg.latent_side, latent_w=cfg.latent_side,
                                 channels=cfg.channels, base_width=cfg.base_width,
                                 attn_resolutions=cfg.attn_resolutions, heads=cfg.heads,
                                 n_t=cfg.n_t, dummy_count=cfg.dummy_count, d_t=cfg.d_t,
                                 d_c=cfg.d_c, max_timestep=cfg.schedule_steps)
        denoiser = Denoiser(den_cfg, rng.child("denoiser"))
        dummy_tokens = gaussian_init(rng.child("dummy"), (cfg.dummy_count, cfg.d_c),
                                     fan_in=cfg.d_c)
        schedule = NoiseSchedule.linear(cfg.schedule_steps, cfg.beta_start, cfg.beta_end)
        return cls(cfg, vocab, text, patches, projector, denoiser, dummy_tokens, schedule)

    # ---- parameter groups ----

    def adapter_param_names(self) -> list[str]:
        out = []
        for name in self.store.names():
            if name.startswith("projector.") or name == "dummy_tokens":
                out.append(name)
            elif name.startswith("denoiser.") and (".wk_image." in name or ".wv_image." in name):
                out.append(name)
        return out

    def base_param_names(self) -> list[str]:
        adapters = set(self.adapter_param_names())
        return [n for n in self.store.names()
                if n not in adapters and not n.startswith("patch.")]

    def frozen_param_names(self) -> list[str]:
        return [n for n in self.store.names() if n.startswith("patch.")]

    # ---- pixel <-> latent mapping ----

    def encode_image(self, image: np.ndarray) -> Tensor:
        """[0,1] image (H, W, 3) to a latent in [-1, 1], pooled when configured."""
        s = self.cfg.image_size
        if image.shape != (s, s, self.cfg.channels):
            raise ContractError(f"image shape {image.shape} does not match "
                                f"({s}, {s}, {self.cfg.channels})")
        z = np.asarray(image, dtype=np.float64) * 2.0 - 1.0
        if self.cfg.latent_pool == 2:
            z = z.reshape(s // 2, 2, s // 2, 2, self.cfg.channels).mean(axis=(1, 3))
        return Tensor(z)

    def decode_latent(self, z: np.ndarray) -> np.ndarray:
        img = np.asarray(z, dtype=np.float64)
        if self.cfg.latent_pool == 2:
            img = np.repeat(np.repeat(img, 2, axis=0), 2, axis=1)
        return np.clip((img + 1.0) / 2.0, 0.0, 1.0)

    # ---- conditioning ----

    def encode_prompt(self, prompt: str | None) -> Tensor:
        ids = self.text.null_prompt() if prompt is None else self.vocab.encode(prompt)
        return self.text(ids)

    def build_image_condition(self, subjects: list[SubjectRef], rng: Rng | None,
                              training: bool, use_grounding_override=None):
        return self.projector.project_subjects(
            subjects, rng, training, patch_encoder=self.patches,
            embed_table=self.text.embed, use_grounding_override=use_grounding_override)

    def masks_for(self, boxes: list[BoxNorm]) -> dict[int, AssembledMask]:
        # With masking disabled (ablation) every subject sees the full frame;
        # losses and metrics still score against the true boxes.
        if not self.cfg.masked_attention:
            boxes = [BoxNorm(0.0, 0.0, 1.0, 1.0)] * len(boxes)
        out: dict[int, AssembledMask] = {}
        for side in self.denoiser.cfg.attn_resolutions:
            out[side] = assemble_masks(boxes, side, side, self.cfg.n_t,
                                       dummy_count=self.cfg.dummy_count)
        return out

    def entity_token_positions(self, prompt: str, subjects: list[SubjectRef]) -> list[list[int]]:
        """Positions of each subject's entity word in the padded prompt row."""
        ids = self.text.pad_ids(self.vocab.encode(prompt))
        return [[i for i, tok in enumerate(ids) if tok == s.entity_id] for s in subjects]

    def denoise(self, z: Tensor, t: int, cond: Conditioning) -> tuple[Tensor, DenoiseDiagnostics]:
        return self.denoiser(z, t, cond)
