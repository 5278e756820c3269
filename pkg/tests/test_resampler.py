"""Subject-token distillation: attention layers, spans, independence, drop."""
from __future__ import annotations

import numpy as np
import pytest

from msdiff.embedding import BoxNorm, PatchEncoder, TextEncoder, Vocab
from msdiff.errors import ContractError, ShapeError
from msdiff.rng import Rng
from msdiff.resampler import (ImageCondition, LinearProjector, Resampler, ResamplerConfig,
                              ResamplerLayer, SubjectRef)
from msdiff.tensor import Tensor

from oracles import naive_resampler_layer, resampler_layer_weights

CFG = ResamplerConfig(depth=2, n_t=4, d_q=16, d_i=12, d_c=10, heads=2)


def _setup(seed=3, cfg=CFG):
    rng = Rng(seed)
    vocab = Vocab.default()
    text = TextEncoder(vocab, d_t=8, max_prompt_len=8, rng=rng.child("text"))
    patches = PatchEncoder(d_i=cfg.d_i, patch=4, rng=rng.child("patch"))
    rs = Resampler(cfg, d_t=8, num_freqs=4, rng=rng.child("rs"))
    return vocab, text, patches, rs


def _subject(rng, vocab, box=None, entity="circle"):
    img = Tensor(rng.uniform(shape=(8, 8, 3)))
    return SubjectRef(img, vocab.id_of(entity), box or BoxNorm(0.25, 0.25, 0.75, 0.75))


# ---- attention layer ----

def test_layer_with_no_image_features_is_self_attention():
    layer = ResamplerLayer(CFG, Rng(9))
    rng = Rng(10)
    x = rng.normal((CFG.n_t, CFG.d_q))
    empty = Tensor(np.zeros((0, CFG.d_q)))
    out = layer(Tensor(x), empty)
    ref, _ = naive_resampler_layer(x, np.zeros((0, CFG.d_q)), resampler_layer_weights(layer), CFG.heads)
    assert np.max(np.abs(out.data - ref)) <= 1e-12


def test_two_key_attention_mixes_value_rows():
    cfg = ResamplerConfig(depth=1, n_t=1, d_q=6, d_i=6, d_c=6, heads=1)
    layer = ResamplerLayer(cfg, Rng(11))
    rng = Rng(12)
    x = rng.normal((1, 6))
    f = rng.normal((1, 6))
    _, details = naive_resampler_layer(x, f, resampler_layer_weights(layer), heads=1)
    attn = details["attn"][0]
    v = details["values"][0]
    w = attn[0, 0]
    assert attn.shape == (1, 2) and abs(attn[0].sum() - 1.0) <= 1e-12
    expect = w * v[0] + (1.0 - w) * v[1]
    assert np.allclose(details["pre_residual"][0], expect, atol=1e-12)
    out = layer(Tensor(x), Tensor(f))
    full_ref, _ = naive_resampler_layer(x, f, resampler_layer_weights(layer), heads=1)
    assert np.max(np.abs(out.data - full_ref)) <= 1e-12


def test_layer_matches_naive_reference_on_random_cases():
    rng = Rng(13)
    for trial in range(50):
        heads = rng.choice([1, 2])
        d_q = heads * rng.integers(2, 5)
        cfg = ResamplerConfig(depth=1, n_t=rng.integers(1, 5), d_q=d_q, d_i=d_q,
                              d_c=d_q, heads=heads)
        layer = ResamplerLayer(cfg, Rng(100 + trial))
        x = rng.normal((cfg.n_t, d_q))
        f = rng.normal((rng.integers(0, 6), d_q))
        out = layer(Tensor(x), Tensor(f))
        ref, _ = naive_resampler_layer(x, f, resampler_layer_weights(layer), heads)
        assert np.max(np.abs(out.data - ref)) <= 1e-12


def test_layer_rejects_mismatched_feature_dim():
    layer = ResamplerLayer(CFG, Rng(14))
    with pytest.raises(ShapeError):
        layer(Tensor(np.zeros((4, CFG.d_q))), Tensor(np.zeros((3, CFG.d_q + 1))))


# ---- resample_subject ----

def test_resample_subject_is_deterministic():
    vocab, text, patches, rs = _setup()
    s = _subject(Rng(20), vocab)
    g = rs.grounding_for(s, True, text.embed)
    a = rs.resample_subject(s.image, g, patches)
    b = rs.resample_subject(s.image, g, patches)
    assert np.array_equal(a.data, b.data)
    assert a.shape == (CFG.n_t, CFG.d_c)


def test_grounded_and_base_queries_give_different_tokens():
    vocab, text, patches, rs = _setup()
    s = _subject(Rng(21), vocab)
    grounded = rs.resample_subject(s.image, rs.grounding_for(s, True, text.embed), patches)
    plain = rs.resample_subject(s.image, rs.grounding_for(s, False, text.embed), patches)
    assert np.abs(grounded.data - plain.data).max() > 1e-9


def test_subject_tokens_do_not_depend_on_other_subjects():
    vocab, text, patches, rs = _setup()
    rng = Rng(22)
    a, b = _subject(rng, vocab, entity="circle"), _subject(rng, vocab, entity="square")
    b_altered = SubjectRef(Tensor(b.image.data + 0.1), b.entity_id, b.box)
    kw = dict(patch_encoder=patches, embed_table=text.embed,
              use_grounding_override=[True, True])
    before = rs.project_subjects([a, b], Rng(0), False, **kw)
    after = rs.project_subjects([a, b_altered], Rng(0), False, **kw)
    s, e = before.per_subject_spans[0]
    assert np.array_equal(before.tokens.data[s:e], after.tokens.data[s:e])
    s, e = before.per_subject_spans[1]
    assert not np.array_equal(before.tokens.data[s:e], after.tokens.data[s:e])


# ---- project_subjects ----

def test_span_layout_for_one_and_three_subjects():
    vocab, text, patches, rs = _setup()
    rng = Rng(23)
    kw = dict(patch_encoder=patches, embed_table=text.embed)
    one = rs.project_subjects([_subject(rng, vocab)], Rng(0), False, **kw)
    assert one.tokens.shape == (4, CFG.d_c) and one.per_subject_spans == [(0, 4)]
    three = rs.project_subjects([_subject(rng, vocab) for _ in range(3)], Rng(0), False, **kw)
    assert three.tokens.shape == (12, CFG.d_c)
    assert three.per_subject_spans == [(0, 4), (4, 8), (8, 12)]


def test_subject_count_bounds():
    vocab, text, patches, rs = _setup()
    rng = Rng(24)
    kw = dict(patch_encoder=patches, embed_table=text.embed)
    with pytest.raises(ContractError):
        rs.project_subjects([], Rng(0), False, **kw)
    with pytest.raises(ContractError):
        rs.project_subjects([_subject(rng, vocab) for _ in range(5)], Rng(0), False, **kw)


def test_swapping_subjects_swaps_token_blocks_exactly():
    vocab, text, patches, rs = _setup()
    rng = Rng(25)
    a = _subject(rng, vocab, box=BoxNorm(0.0, 0.0, 0.5, 0.5), entity="circle")
    b = _subject(rng, vocab, box=BoxNorm(0.5, 0.5, 1.0, 1.0), entity="star")
    kw = dict(patch_encoder=patches, embed_table=text.embed)
    fwd = rs.project_subjects([a, b], Rng(0), False, use_grounding_override=[True, False], **kw)
    rev = rs.project_subjects([b, a], Rng(0), False, use_grounding_override=[False, True], **kw)
    n_t = CFG.n_t
    assert np.array_equal(fwd.tokens.data[0:n_t], rev.tokens.data[n_t:2 * n_t])
    assert np.array_equal(fwd.tokens.data[n_t:2 * n_t], rev.tokens.data[0:n_t])


def test_full_grounding_drop_ignores_entities_and_boxes():
    cfg = ResamplerConfig(depth=2, n_t=4, d_q=16, d_i=12, d_c=10, heads=2,
                          grounding_drop_prob=1.0)
    vocab, text, patches, rs = _setup(cfg=cfg)
    img = Tensor(Rng(26).uniform(shape=(8, 8, 3)))
    s1 = SubjectRef(img, vocab.id_of("circle"), BoxNorm(0.0, 0.0, 0.4, 0.4))
    s2 = SubjectRef(img, vocab.id_of("star"), BoxNorm(0.6, 0.6, 1.0, 1.0))
    kw = dict(patch_encoder=patches, embed_table=text.embed)
    out1 = rs.project_subjects([s1], Rng(7), True, **kw)
    out2 = rs.project_subjects([s2], Rng(7), True, **kw)
    assert np.array_equal(out1.tokens.data, out2.tokens.data)


def test_grounding_drop_rate_is_respected():
    vocab, text, patches, rs = _setup()
    cfg = ResamplerConfig(depth=1, n_t=2, d_q=8, d_i=12, d_c=8, heads=1,
                          grounding_drop_prob=0.5)
    rs = Resampler(cfg, d_t=8, num_freqs=4, rng=Rng(30))
    rng = Rng(31)
    draw_rng = Rng(32)
    subject = _subject(rng, vocab)
    grounded = rs.resample_subject(subject.image, rs.grounding_for(subject, True, text.embed), patches)
    dropped = rs.resample_subject(subject.image, rs.grounding_for(subject, False, text.embed), patches)
    hits = 0
    trials = 200
    for _ in range(trials):
        out = rs.project_subjects([subject], draw_rng, True,
                                  patch_encoder=patches, embed_table=text.embed)
        if np.array_equal(out.tokens.data, dropped.data):
            hits += 1
        else:
            assert np.array_equal(out.tokens.data, grounded.data)
    assert 60 <= hits <= 140  # ~binomial(200, 0.5)


# ---- ImageCondition and the linear variant ----

def test_image_condition_validates_span_tiling():
    with pytest.raises(ContractError):
        ImageCondition(tokens=Tensor(np.zeros((8, 4))), per_subject_spans=[(0, 4), (5, 8)], n=2)
    with pytest.raises(ContractError):
        ImageCondition(tokens=Tensor(np.zeros((8, 4))), per_subject_spans=[(0, 4)], n=1)


def test_linear_projector_matches_interface_shape_law():
    vocab, text, patches, _ = _setup()
    lin = LinearProjector(CFG, Rng(40))
    rng = Rng(41)
    for n in range(1, 5):
        out = lin.project_subjects([_subject(rng, vocab) for _ in range(n)], Rng(0), True,
                                   patch_encoder=patches, embed_table=text.embed)
        assert out.tokens.shape == (n * CFG.n_t, CFG.d_c)
        assert out.n == n
