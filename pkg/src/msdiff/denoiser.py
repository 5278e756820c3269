"""UNet-style noise predictor hosting the dual conditioning blocks.

Two pooling levels below the latent resolution; conditioning attention can
sit at half resolution (one block on the way down, one on the way up) and
at quarter resolution (one block at the bottleneck).  The final residual
convolution, the output head, and every image-value projection start at
zero so a fresh network predicts zero noise and a fresh image branch is an
exact no-op.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AssembledMask, DualCrossAttention
from .errors import ConfigError, ContractError, ShapeError
from .layers import FeedForward, LayerNorm, Linear, sinusoid_table
from .optim import gaussian_init
from .resampler import ImageCondition
from .tensor import Tensor, avg_pool2x2, concat, conv2d, silu, upsample2x2


@dataclass(frozen=True)
class DenoiserConfig:
    latent_h: int = 32
    latent_w: int = 32
    channels: int = 3
    base_width: int = 16
    attn_resolutions: tuple[int, ...] = (16, 8)
    heads: int = 1
    n_t: int = 4
    dummy_count: int = 4
    d_t: int = 32
    d_c: int = 32
    max_timestep: int = 200

    def __post_init__(self):
        for name in ("latent_h", "latent_w", "channels", "base_width", "n_t", "d_t",
                     "d_c", "max_timestep"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dummy_count < 0:
            raise ConfigError(f"dummy_count must be non-negative, got {self.dummy_count}")
        if self.heads != 1:
            raise ConfigError("conditioning blocks are single-headed; heads must be 1")
        if self.latent_h != self.latent_w:
            raise ConfigError(f"latent grid must be square, got {self.latent_h}x{self.latent_w}")
        if self.latent_h % 4:
            raise ConfigError(f"latent side must be divisible by 4, got {self.latent_h}")
        allowed = {self.latent_h // 2, self.latent_h // 4}
        bad = [r for r in self.attn_resolutions if r not in allowed]
        if bad or len(set(self.attn_resolutions)) != len(self.attn_resolutions):
            raise ConfigError(f"attn_resolutions must be distinct members of {sorted(allowed)}, "
                              f"got {self.attn_resolutions}")


@dataclass
class Conditioning:
    """Everything one denoiser call needs besides the latent and timestep."""

    text: Tensor
    image: ImageCondition | None = None
    dummy_tokens: Tensor | None = None
    masks: dict[int, AssembledMask] | None = None  # keyed by latent side length
    gamma: float = 1.0


@dataclass
class DenoiseDiagnostics:
    image_maps: list[tuple[int, Tensor]] = field(default_factory=list)
    text_maps: list[tuple[int, Tensor]] = field(default_factory=list)
    degenerate_cells: int = 0


class Conv:
    def __init__(self, kernel: Tensor, bias: Tensor):
        self.kernel = kernel
        self.bias = bias

    @classmethod
    def init(cls, rng, k: int, cin: int, cout: int, zero: bool = False) -> "Conv":
        if zero:
            kernel = Tensor(np.zeros((k, k, cin, cout)), requires_grad=True)
        else:
            kernel = gaussian_init(rng, (k, k, cin, cout), fan_in=k * k * cin)
        return cls(kernel, Tensor(np.zeros(cout), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.k": self.kernel, f"{prefix}.b": self.bias}


class ResBlock:
    """Pre-norm double convolution with a per-channel timestep shift."""

    def __init__(self, rng, width: int, temb_dim: int, zero_out: bool = False):
        self.ln1 = LayerNorm.init(width)
        self.conv1 = Conv.init(rng, 3, width, width)
        self.temb_proj = Linear.init(rng, temb_dim, width)
        self.ln2 = LayerNorm.init(width)
        self.conv2 = Conv.init(rng, 3, width, width, zero=zero_out)

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(silu(self.ln1(x)))
        hh, ww, c = h.shape
        shifted = h.reshape(hh * ww, c) + self.temb_proj(temb)
        h = self.conv2(silu(self.ln2(shifted.reshape(hh, ww, c))))
        return x + h

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.ln1.params(f"{prefix}.ln1"))
        out.update(self.conv1.params(f"{prefix}.conv1"))
        out.update(self.temb_proj.params(f"{prefix}.temb"))
        out.update(self.ln2.params(f"{prefix}.ln2"))
        out.update(self.conv2.params(f"{prefix}.conv2"))
        return out


class Denoiser:
    def __init__(self, cfg: DenoiserConfig, rng):
        self.cfg = cfg
        w = cfg.base_width
        self.t_table = sinusoid_table(cfg.max_timestep, w)
        self.t_mlp = FeedForward.init(rng.child("tmlp"), w, w)
        self.stem = Conv.init(rng.child("stem"), 3, cfg.channels, w)
        self.rb_down_hi = ResBlock(rng.child("rb_dh"), w, w)
        self.rb_down_mid = ResBlock(rng.child("rb_dm"), w, w)
        self.rb_bottom = ResBlock(rng.child("rb_bo"), w, w)
        self.merge_mid = Conv.init(rng.child("mg_m"), 1, 2 * w, w)
        self.rb_up_mid = ResBlock(rng.child("rb_um"), w, w)
        self.merge_hi = Conv.init(rng.child("mg_h"), 1, 2 * w, w)
        self.rb_up_hi = ResBlock(rng.child("rb_uh"), w, w, zero_out=True)
        self.head_ln = LayerNorm.init(w)
        self.head = Conv.init(rng.child("head"), 3, w, cfg.channels, zero=True)

        def attn_block(key):
            return DualCrossAttention.init(rng.child("attn", key), d_z=w,
                                           d_t=cfg.d_t, d_c=cfg.d_c,
                                           zero_image_values=True)

        mid_res = cfg.latent_h // 2
        low_res = cfg.latent_h // 4
        self.attn_down = attn_block("down") if mid_res in cfg.attn_resolutions else None
        self.attn_mid = attn_block("mid") if low_res in cfg.attn_resolutions else None
        self.attn_up = attn_block("up") if mid_res in cfg.attn_resolutions else None

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.t_mlp.params(f"{prefix}.t_mlp"))
        out.update(self.stem.params(f"{prefix}.stem"))
        out.update(self.rb_down_hi.params(f"{prefix}.rb_down_hi"))
        out.update(self.rb_down_mid.params(f"{prefix}.rb_down_mid"))
        out.update(self.rb_bottom.params(f"{prefix}.rb_bottom"))
        out.update(self.merge_mid.params(f"{prefix}.merge_mid"))
        out.update(self.rb_up_mid.params(f"{prefix}.rb_up_mid"))
        out.update(self.merge_hi.params(f"{prefix}.merge_hi"))
        out.update(self.rb_up_hi.params(f"{prefix}.rb_up_hi"))
        out.update(self.head_ln.params(f"{prefix}.head_ln"))
        out.update(self.head.params(f"{prefix}.head"))
        for name, block in (("attn_down", self.attn_down), ("attn_mid", self.attn_mid),
                            ("attn_up", self.attn_up)):
            if block is not None:
                out.update(block.params(f"{prefix}.{name}"))
        return out

    def _attend(self, block: DualCrossAttention | None, x: Tensor, cond: Conditioning,
                diag: DenoiseDiagnostics) -> Tensor:
        if block is None:
            return x
        h, w, c = x.shape
        masks = None
        if cond.image is not None:
            if cond.masks is None or h not in cond.masks:
                raise ContractError(f"no assembled mask provided for resolution {h}")
            masks = cond.masks[h]
        res = block(x.reshape(h * w, c), cond.text, cond.image, cond.dummy_tokens,
                    masks, cond.gamma)
        diag.text_maps.append((h, res.text_map))
        if res.image_map is not None:
            diag.image_maps.append((h, res.image_map))
            diag.degenerate_cells += int(res.degenerate_cells.sum())
        return res.z_out.reshape(h, w, c)

    def __call__(self, z: Tensor, t: int, cond: Conditioning) -> tuple[Tensor, DenoiseDiagnostics]:
        cfg = self.cfg
        if z.shape != (cfg.latent_h, cfg.latent_w, cfg.channels):
            raise ShapeError(f"latent shape {z.shape} does not match config "
                             f"({cfg.latent_h}, {cfg.latent_w}, {cfg.channels})")
        if not 0 <= t < cfg.max_timestep:
            raise ContractError(f"timestep {t} outside [0, {cfg.max_timestep})")
        diag = DenoiseDiagnostics()
        temb = self.t_mlp(Tensor(self.t_table[t:t + 1]))

        x = self.stem(z)
        x = self.rb_down_hi(x, temb)
        skip_hi = x
        x = avg_pool2x2(x)
        x = self.rb_down_mid(x, temb)
        x = self._attend(self.attn_down, x, cond, diag)
        skip_mid = x
        x = avg_pool2x2(x)
        x = self.rb_bottom(x, temb)
        x = self._attend(self.attn_mid, x, cond, diag)
        x = upsample2x2(x)
        x = self.merge_mid(concat([x, skip_mid], axis=2))
        x = self.rb_up_mid(x, temb)
        x = self._attend(self.attn_up, x, cond, diag)
        x = upsample2x2(x)
        x = self.merge_hi(concat([x, skip_hi], axis=2))
        x = self.rb_up_hi(x, temb)
        out = self.head(silu(self.head_ln(x)))
        return out, diag
