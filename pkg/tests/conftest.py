"""Shared fixtures: a small model that exercises every code path cheaply."""

import dataclasses

import numpy as np
import pytest

from msdiff.embedding import BoxNorm
from msdiff.model import Model, ModelConfig
from msdiff.resampler import SubjectRef
from msdiff.rng import Rng
from msdiff.tensor import Tensor

TINY = ModelConfig(
    image_size=8,
    latent_pool=1,
    d_t=8,
    max_prompt_len=12,
    patch=4,
    num_freqs=2,
    base_width=4,
    attn_resolutions=(4, 2),
    heads=1,
    resampler_depth=1,
    resampler_heads=1,
    n_t=2,
    d_q=4,
    d_i=8,
    d_c=8,
    dummy_count=2,
    schedule_steps=40,
)


def build_tiny(seed: int = 1234, **overrides) -> Model:
    cfg = TINY if not overrides else dataclasses.replace(TINY, **overrides)
    return Model.build(cfg, Rng(seed))


def make_subject(seed: int, box: BoxNorm, entity_id: int = 7,
                 side: int = 8) -> SubjectRef:
    r = np.random.default_rng(seed)
    return SubjectRef(image=Tensor(r.uniform(size=(side, side, 3))),
                      entity_id=entity_id, box=box)


@pytest.fixture()
def tiny_model() -> Model:
    return build_tiny()
