"""Metric oracles, fixed bench fixtures, and benchmark-run behavior."""
import json

import numpy as np
import pytest

from msdiff.bench import (
    BENCH_FORMAT_VERSION,
    COMBO_PRESETS,
    SCENE_VARIANTS,
    SINGLE_SUBJECT_BOX,
    BenchCase,
    bench_run,
    case_subjects,
    load_bench,
    load_report,
    make_case,
    mini_bench,
    reference_crop,
    save_bench,
    subject_color,
    write_report,
)
from msdiff.diffusion import SamplerConfig
from msdiff.embedding import BoxNorm, Vocab
from msdiff.errors import ContractError, ParseError
from msdiff.metrics import (
    COLOR_MATCH_TOLERANCE,
    _MATCHABLE_VALUES,
    color_match_mask,
    feature_vector,
    fidelity_product,
    layout_adherence,
    parse_prompt_mentions,
    pixel_box,
    subject_fidelity,
    text_fidelity,
)
from msdiff.rng import Rng
from msdiff.scenes import (
    COLOR_VALUES,
    SceneSpec,
    SubjectSpec,
    render_scene,
    render_subject_crop,
)

from conftest import build_tiny
from oracles import naive_feature_vector, naive_layout_adherence


def _random_crop(seed, h=12, w=10):
    return Rng(seed).uniform(shape=(h, w, 3))


# ---------- feature vector ----------

def test_feature_vector_matches_naive_oracle():
    for seed in range(8):
        crop = _random_crop(seed)
        got = feature_vector(crop)
        want = naive_feature_vector(crop)
        assert np.max(np.abs(got - want)) <= 1e-12


def test_feature_vector_is_unit_norm():
    for seed in range(5):
        vec = feature_vector(_random_crop(seed))
        assert abs(np.linalg.norm(vec) - 1.0) <= 1e-12


def test_feature_vector_rejects_degenerate_input():
    with pytest.raises(ContractError):
        feature_vector(np.zeros((1, 5, 3)))
    with pytest.raises(ContractError):
        feature_vector(np.zeros((5, 5)))


def test_identical_crops_score_one():
    for seed in range(6):
        img = _random_crop(seed, 16, 16)
        score = subject_fidelity(img, img, BoxNorm(0.0, 0.0, 1.0, 1.0))
        assert abs(score - 1.0) <= 1e-12


def test_channel_permuted_crop_similarity_bounded_by_gradient_share():
    # two flat halves whose color bins are disjoint from the channel-rolled copy
    a = np.empty((8, 8, 3))
    a[:, :4] = (0.1, 0.4, 0.6)
    a[:, 4:] = (0.9, 0.6, 0.1)
    b = np.roll(a, 1, axis=2)

    fa, fb = naive_feature_vector(a), naive_feature_vector(b)
    assert float(fa[:64] @ fb[:64]) == 0.0
    grad_share = float(np.linalg.norm(fa[64:]) * np.linalg.norm(fb[64:]))

    score = subject_fidelity(a, b, BoxNorm(0.0, 0.0, 1.0, 1.0))
    assert abs(score - float(fa @ fb)) <= 1e-12
    assert score <= grad_share + 1e-12


def test_flat_crops_of_different_intensity_are_orthogonal():
    a = np.full((6, 6, 3), 0.1)
    b = np.full((6, 6, 3), 0.6)
    oracle = float(naive_feature_vector(a) @ naive_feature_vector(b))
    score = subject_fidelity(a, b, BoxNorm(0.0, 0.0, 1.0, 1.0))
    assert abs(score - oracle) <= 1e-12
    assert score == 0.0


def test_subject_fidelity_rejects_tiny_crop():
    img = _random_crop(3, 32, 32)
    ref = _random_crop(4, 8, 8)
    with pytest.raises(ContractError):
        subject_fidelity(img, ref, BoxNorm(0.0, 0.0, 0.02, 0.02))
    with pytest.raises(ContractError):
        subject_fidelity(img, ref, BoxNorm(0.5, 0.5, 0.53, 0.9))


# ---------- fidelity product ----------

def test_fidelity_product_examples():
    assert abs(fidelity_product([0.8, 0.5]) - 0.4) <= 1e-15
    assert fidelity_product([0.37]) == 0.37
    assert fidelity_product([0.9, 0.0, 0.7]) == 0.0


def test_fidelity_product_clamps_before_multiplying():
    assert fidelity_product([1.7, 0.5]) == 0.5
    assert fidelity_product([-0.3, 0.4]) == 0.0


def test_fidelity_product_empty_rejected():
    with pytest.raises(ContractError):
        fidelity_product([])


def test_fidelity_product_never_exceeds_minimum():
    r = Rng(77)
    for _ in range(50):
        n = int(r.integers(1, 4))
        vals = [float(v) for v in r.uniform(shape=(n,))]
        assert fidelity_product(vals) <= min(vals) + 1e-15


# ---------- prompt parsing and text fidelity ----------

def test_parse_prompt_mentions_reads_color_shape_pairs():
    got = parse_prompt_mentions("a red circle and a blue square in a room")
    assert got == [("red", "circle"), ("blue", "square")]
    assert parse_prompt_mentions("a woman wearing a purple star, a green square, "
                                 "and a yellow triangle on the grass") == [
        ("purple", "star"), ("green", "square"), ("yellow", "triangle")]
    assert parse_prompt_mentions("a woman in a room") == []


def test_parse_prompt_rejects_dangling_halves():
    with pytest.raises(ContractError, match="red"):
        parse_prompt_mentions("a red room")
    with pytest.raises(ContractError, match="circle"):
        parse_prompt_mentions("a circle on the beach")
    with pytest.raises(ContractError, match="green"):
        parse_prompt_mentions("a blue square and a green")


def test_text_fidelity_vacuous_and_blank_cases():
    blank = np.zeros((16, 16, 3))
    assert text_fidelity(blank, "a woman in a room") == 1.0
    assert text_fidelity(blank, "a red circle in the snow") == 0.0


def test_text_fidelity_prefers_true_caption_over_color_swap():
    spec = SceneSpec((SubjectSpec("circle", "red", (0.3, 0.5), 0.35, 0.0),
                      SubjectSpec("square", "blue", (0.75, 0.5), 0.3, 0.0)),
                     "gray", 32)
    image, _ = render_scene(spec)
    own = text_fidelity(image, "a red circle and a blue square on the grass")
    swapped = text_fidelity(image, "a blue circle and a red square on the grass")
    assert own >= swapped
    assert own > 0.9


# ---------- layout adherence ----------

def _gray_canvas(side=32):
    return np.full((side, side, 3), 0.5)


def test_layout_subject_fully_inside_box():
    img = _gray_canvas()
    img[10:20, 4:12] = COLOR_VALUES["red"]
    box = BoxNorm(0.0, 0.25, 0.5, 0.75)
    score = layout_adherence(img, [box], ["red"])
    assert score > 0.999
    oracle = naive_layout_adherence(img, [box], ["red"], _MATCHABLE_VALUES,
                                    COLOR_MATCH_TOLERANCE)
    assert abs(score - oracle) <= 1e-15


def test_layout_subject_fully_outside_box():
    img = _gray_canvas()
    img[0:6, 24:32] = COLOR_VALUES["blue"]
    assert layout_adherence(img, [BoxNorm(0.0, 0.5, 0.5, 1.0)], ["blue"]) == 0.0


def test_layout_half_split_matches_pixel_enumeration():
    img = _gray_canvas()
    img[8:16, 12:20] = COLOR_VALUES["purple"]
    box = BoxNorm(0.0, 0.0, 0.5, 1.0)  # splits the block at column 16
    score = layout_adherence(img, [box], ["purple"])
    oracle = naive_layout_adherence(img, [box], ["purple"], _MATCHABLE_VALUES,
                                    COLOR_MATCH_TOLERANCE)
    assert abs(score - oracle) <= 1e-15
    assert abs(score - 0.5) <= 1e-3


def test_layout_adherence_averages_subjects_and_checks_lengths():
    img = _gray_canvas()
    img[2:10, 2:10] = COLOR_VALUES["red"]
    img[20:30, 20:30] = COLOR_VALUES["blue"]
    score = layout_adherence(img,
                             [BoxNorm(0.0, 0.0, 0.5, 0.5),
                              BoxNorm(0.0, 0.0, 0.5, 0.5)],
                             ["red", "blue"])
    assert abs(score - 0.5) <= 1e-3
    with pytest.raises(ContractError):
        layout_adherence(img, [BoxNorm(0.0, 0.0, 1.0, 1.0)], ["red", "blue"])
    with pytest.raises(ContractError):
        layout_adherence(img, [], [])


def test_color_match_tolerance_covers_shading_not_background():
    shaded_lo = np.asarray(COLOR_VALUES["red"]) * 0.85
    shaded_hi = np.minimum(np.asarray(COLOR_VALUES["red"]) * 1.15, 1.0)
    img = np.stack([np.stack([shaded_lo, shaded_hi, np.full(3, 0.5)])])
    mask = color_match_mask(img, "red")
    assert mask.tolist() == [[True, True, False]]
    with pytest.raises(ContractError):
        color_match_mask(img, "crimson")


def test_pixel_box_convention():
    assert pixel_box(BoxNorm(0.0, 0.25, 0.5, 0.75), 32, 32) == (0, 8, 16, 24)
    assert pixel_box(BoxNorm(0.0, 0.0, 1.0, 1.0), 7, 5) == (0, 0, 5, 7)


# ---------- bench fixtures ----------

EXPECTED_PRESETS = {
    "living+living": [[0.00, 0.25, 0.50, 0.75], [0.50, 0.25, 1.00, 0.75]],
    "living+object": [[0.00, 0.25, 0.50, 0.75], [0.50, 0.25, 1.00, 0.75]],
    "object+object": [[0.00, 0.25, 0.50, 0.75], [0.50, 0.25, 1.00, 0.75]],
    "living+upwearing": [[0.25, 0.25, 0.75, 0.75], [0.25, 0.00, 0.75, 0.25]],
    "living+midwearing": [[0.25, 0.25, 0.75, 0.75], [0.25, 0.25, 0.75, 0.75]],
    "living+wholewearing": [[0.25, 0.25, 0.75, 0.75], [0.25, 0.25, 0.75, 0.75]],
    "midwearing+downwearing": [[0.25, 0.25, 0.75, 0.60], [0.25, 0.60, 0.75, 1.00]],
    "living+scene": [[0.25, 0.25, 0.75, 0.75], [0.00, 0.00, 1.00, 1.00]],
    "object+scene": [[0.25, 0.25, 0.75, 0.75], [0.00, 0.00, 1.00, 1.00]],
    "living+living+living": [[0.00, 0.25, 0.35, 0.75], [0.35, 0.25, 0.65, 0.75],
                             [0.65, 0.25, 1.00, 0.75]],
    "object+object+object": [[0.00, 0.25, 0.35, 0.75], [0.35, 0.25, 0.65, 0.75],
                             [0.65, 0.25, 1.00, 0.75]],
    "living+object+scene": [[0.00, 0.25, 0.50, 0.75], [0.50, 0.25, 1.00, 0.75],
                            [0.00, 0.00, 1.00, 1.00]],
    "upwearing+midwearing+downwearing": [[0.25, 0.00, 0.75, 0.25],
                                         [0.25, 0.25, 0.75, 0.60],
                                         [0.25, 0.60, 0.75, 1.00]],
    "single": [[0.25, 0.25, 0.75, 0.75]],
}


def test_preset_boxes_match_expected_table_exactly():
    assert set(COMBO_PRESETS) == set(EXPECTED_PRESETS)
    for combo, want in EXPECTED_PRESETS.items():
        got = [[b.x0, b.y0, b.x1, b.y1] for b in COMBO_PRESETS[combo][1]]
        assert got == want, combo


def test_mini_bench_composition():
    cases = mini_bench()
    assert len(cases) == 20
    combos = [c.combo_type for c in cases]
    assert combos.count("single") == 2
    multi = [c for c in combos if c != "single"]
    assert len(set(multi)) == 9
    assert all(multi.count(t) == 2 for t in set(multi))
    assert len({c.seed for c in cases}) == 20


def test_mini_bench_cases_use_preset_boxes_and_scene_variants():
    vocab = Vocab.default()
    for case in mini_bench():
        assert case.boxes == COMBO_PRESETS[case.combo_type][1]
        vocab.encode(case.prompt)  # raises on out-of-vocabulary words
        if "{scene}" in COMBO_PRESETS[case.combo_type][0]:
            assert any(case.prompt.endswith(s) for s in SCENE_VARIANTS[:2])
    singles = [c for c in mini_bench() if c.combo_type == "single"]
    assert all(c.boxes == (SINGLE_SUBJECT_BOX,) for c in singles)
    assert SINGLE_SUBJECT_BOX == BoxNorm(0.25, 0.25, 0.75, 0.75)


def test_make_case_and_bench_case_contracts():
    with pytest.raises(ContractError):
        make_case("living+flying", ("red circle", "blue star"), "in a room", 1)
    with pytest.raises(ContractError):
        make_case("living+living", ("red circle",), "in a room", 1)
    with pytest.raises(ContractError):
        BenchCase("living+living", "a prompt", (SINGLE_SUBJECT_BOX,),
                  ("red circle", "blue star"), seed=3)
    with pytest.raises(ContractError):
        BenchCase("living+living", "a prompt", (), (), seed=3)


def test_subject_identities_resolve():
    assert subject_color("red circle") == "red"
    assert subject_color("snow") == "white"
    assert subject_color("street") == "dark"
    with pytest.raises(ContractError, match="plaid walrus"):
        subject_color("plaid walrus")
    ref = reference_crop("green triangle", 16)
    assert np.array_equal(ref, render_subject_crop("green", "triangle", 16))
    flat = reference_crop("grass", 12)
    assert flat.shape == (12, 12, 3)
    assert np.unique(flat.reshape(-1, 3), axis=0).shape[0] == 1


def test_case_subjects_builds_refs_with_entity_ids():
    vocab = Vocab.default()
    case = mini_bench()[0]
    subjects, crops, colors = case_subjects(case, vocab)
    assert len(subjects) == len(case.subject_ids)
    for subj, sid, box in zip(subjects, case.subject_ids, case.boxes):
        assert subj.entity_id == vocab.id_of(sid.split()[-1])
        assert subj.box == box
    assert colors == [subject_color(s) for s in case.subject_ids]
    assert all(c.shape == (16, 16, 3) for c in crops)


# ---------- bench file I/O ----------

def test_bench_file_round_trip(tmp_path):
    cases = mini_bench()
    path = str(tmp_path / "bench.json")
    save_bench(cases, path)
    assert load_bench(path) == cases
    first = open(path, "rb").read()
    save_bench(cases, path)
    assert open(path, "rb").read() == first


def test_bench_file_version_and_shape_errors(tmp_path):
    path = str(tmp_path / "bench.json")
    path2 = str(tmp_path / "bad.json")
    with open(path, "w") as fh:
        json.dump({"format_version": 99, "cases": []}, fh)
    with pytest.raises(ParseError, match="99"):
        load_bench(path)
    with open(path2, "w") as fh:
        fh.write("{not json")
    with pytest.raises(ParseError):
        load_bench(path2)
    with open(path, "w") as fh:
        json.dump({"format_version": BENCH_FORMAT_VERSION,
                   "cases": [{"combo_type": "living+living"}]}, fh)
    with pytest.raises(ParseError, match="case 0"):
        load_bench(path)
    with pytest.raises(ParseError):
        load_bench(str(tmp_path / "absent.json"))


# ---------- bench runs ----------

def _fast_sampler():
    return SamplerConfig(guidance_scale=2.0, gamma=0.6, num_steps=2)


def test_bench_run_scores_every_case():
    model = build_tiny(seed=41)
    cases = mini_bench()[:2]
    report = bench_run(model, cases, _fast_sampler(), samples_per_case=1)
    assert report["num_cases"] == 2
    assert report["num_errors"] == 0
    assert len(report["cases"]) == 2
    for entry, case in zip(report["cases"], cases):
        m = entry["metrics"]
        assert set(m) == {"subject_fidelity", "fidelity_product", "text_fidelity",
                          "layout_adherence", "per_subject_fidelity"}
        assert len(m["per_subject_fidelity"]) == len(case.subject_ids)
        assert all(np.isfinite(v) for v in
                   [m["subject_fidelity"], m["fidelity_product"],
                    m["text_fidelity"], m["layout_adherence"]])
    agg = report["aggregate"]
    for key in ("subject_fidelity", "fidelity_product", "text_fidelity",
                "layout_adherence"):
        want = np.mean([e["metrics"][key] for e in report["cases"]])
        assert abs(agg[key] - want) <= 1e-15


def test_bench_run_is_byte_reproducible():
    model = build_tiny(seed=42)
    cases = mini_bench()[:3]
    a = bench_run(model, cases, _fast_sampler(), samples_per_case=2)
    b = bench_run(model, cases, _fast_sampler(), samples_per_case=2)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_bench_run_records_case_errors_and_continues():
    model = build_tiny(seed=43)
    bad = BenchCase("living+living", "a red circle and a blue star in a room",
                    COMBO_PRESETS["living+living"][1],
                    ("red circle", "plaid walrus"), seed=5)
    good = mini_bench()[-1]
    report = bench_run(model, [bad, good], _fast_sampler(), samples_per_case=1)
    assert report["num_errors"] == 1
    assert "plaid walrus" in report["cases"][0]["error"]
    assert "metrics" not in report["cases"][0]
    assert "metrics" in report["cases"][1]
    assert abs(report["aggregate"]["fidelity_product"]
               - report["cases"][1]["metrics"]["fidelity_product"]) <= 1e-15


def test_bench_run_rejects_bad_sample_count():
    with pytest.raises(ContractError):
        bench_run(build_tiny(seed=44), [], _fast_sampler(), samples_per_case=0)


def test_empty_bench_report(tmp_path):
    report = bench_run(build_tiny(seed=45), [], _fast_sampler())
    assert report["num_cases"] == 0
    assert report["aggregate"] is None
    path = str(tmp_path / "report.json")
    write_report(report, path)
    assert load_report(path) == report


def test_report_version_check(tmp_path):
    path = str(tmp_path / "report.json")
    with open(path, "w") as fh:
        json.dump({"format_version": 12}, fh)
    with pytest.raises(ParseError, match="12"):
        load_report(path)
