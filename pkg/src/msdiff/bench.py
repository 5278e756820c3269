"""Fixed-layout evaluation benchmark: preset prompts and boxes per combination type.

Each combination type ("living+living", "living+scene", ...) pairs a caption
template with per-subject boxes.  The shipped mini benchmark instantiates 9
two- and three-subject types twice each (two scene variants) plus 2
single-subject cases, 20 cases total.  Bench files and reports are versioned
JSON and byte-reproducible under a fixed seed.
"""
from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from .diffusion import SamplerConfig, cfg_sample
from .embedding import BoxNorm
from .errors import ContractError, ParseError, RenderError, VocabError
from .metrics import fidelity_product, layout_adherence, subject_fidelity, text_fidelity
from .ppm import snap_to_byte_grid
from .resampler import SubjectRef
from .rng import Rng
from .scenes import BACKGROUND_VALUES, COLOR_VALUES, SHAPES, render_subject_crop
from .tensor import Tensor

BENCH_FORMAT_VERSION = 1
REPORT_FORMAT_VERSION = 1

SCENE_VARIANTS = (
    "in a room",
    "in the jungle",
    "in the snow",
    "on the beach",
    "on the grass",
    "on a cobblestone street",
)

SINGLE_SUBJECT_BOX = BoxNorm(0.25, 0.25, 0.75, 0.75)

_TWO_SIDE_BY_SIDE = (
    BoxNorm(0.00, 0.25, 0.50, 0.75),
    BoxNorm(0.50, 0.25, 1.00, 0.75),
)
_THREE_SIDE_BY_SIDE = (
    BoxNorm(0.00, 0.25, 0.35, 0.75),
    BoxNorm(0.35, 0.25, 0.65, 0.75),
    BoxNorm(0.65, 0.25, 1.00, 0.75),
)
_WEAR_TOP = BoxNorm(0.25, 0.00, 0.75, 0.25)
_WEAR_MID = BoxNorm(0.25, 0.25, 0.75, 0.60)
_WEAR_LOW = BoxNorm(0.25, 0.60, 0.75, 1.00)
_CENTER = BoxNorm(0.25, 0.25, 0.75, 0.75)
_FULL = BoxNorm(0.00, 0.00, 1.00, 1.00)

# combo type -> (caption template, preset boxes); {scene} is the variant slot
COMBO_PRESETS: dict[str, tuple[str, tuple[BoxNorm, ...]]] = {
    "living+living": ("a {0} and a {1} {scene}", _TWO_SIDE_BY_SIDE),
    "living+object": ("a {0} and a {1} {scene}", _TWO_SIDE_BY_SIDE),
    "object+object": ("a {0} and a {1} {scene}", _TWO_SIDE_BY_SIDE),
    "living+upwearing": ("a {0} wearing a {1} {scene}", (_CENTER, _WEAR_TOP)),
    "living+midwearing": ("a {0} wearing a {1} {scene}", (_CENTER, _CENTER)),
    "living+wholewearing": ("a {0} wearing a {1} {scene}", (_CENTER, _CENTER)),
    "midwearing+downwearing": ("a woman wearing a {0} and a {1} {scene}",
                               (_WEAR_MID, _WEAR_LOW)),
    "living+scene": ("a {0} with a {1} in the background", (_CENTER, _FULL)),
    "object+scene": ("a {0} with a {1} in the background", (_CENTER, _FULL)),
    "living+living+living": ("a {0}, a {1}, and a {2} {scene}", _THREE_SIDE_BY_SIDE),
    "object+object+object": ("a {0}, a {1}, and a {2} {scene}", _THREE_SIDE_BY_SIDE),
    "living+object+scene": ("a {0} and a {1} with a {2} in the background",
                            _TWO_SIDE_BY_SIDE + (_FULL,)),
    "upwearing+midwearing+downwearing": (
        "a woman wearing a {0}, a {1}, and a {2} {scene}",
        (_WEAR_TOP, _WEAR_MID, _WEAR_LOW)),
    "single": ("a {0} {scene}", (SINGLE_SUBJECT_BOX,)),
}

# scene-word subjects render as a flat canvas of the mapped palette color
SCENE_SUBJECT_COLORS = {
    "room": "gray",
    "jungle": "green",
    "snow": "white",
    "beach": "yellow",
    "grass": "green",
    "cobblestone": "gray",
    "street": "dark",
}


@dataclasses.dataclass(frozen=True)
class BenchCase:
    combo_type: str
    prompt: str
    boxes: tuple[BoxNorm, ...]
    subject_ids: tuple[str, ...]
    seed: int

    def __post_init__(self):
        if self.combo_type not in COMBO_PRESETS:
            raise ContractError(f"unknown combination type {self.combo_type!r}")
        n = len(self.subject_ids)
        if not 1 <= n <= 3:
            raise ContractError(f"cases carry 1 to 3 subjects, got {n}")
        if len(self.boxes) != n:
            raise ContractError(
                f"{len(self.boxes)} boxes for {n} subjects in {self.combo_type!r}")


def make_case(combo_type: str, fillers: tuple[str, ...], scene: str,
              seed: int, boxes: tuple[BoxNorm, ...] | None = None) -> BenchCase:
    """Instantiate a combination type's template with subject fillers."""
    if combo_type not in COMBO_PRESETS:
        raise ContractError(f"unknown combination type {combo_type!r}")
    template, preset = COMBO_PRESETS[combo_type]
    if len(fillers) != len(preset):
        raise ContractError(f"{combo_type!r} takes {len(preset)} subjects, "
                            f"got {len(fillers)}")
    prompt = template.format(*fillers, scene=scene)
    return BenchCase(combo_type, prompt, boxes if boxes is not None else preset,
                     fillers, seed)


def mini_bench() -> list[BenchCase]:
    """20 fixed cases: 9 combination types x 2 variants + 2 single-subject."""
    plans = [
        ("living+living", ("red circle", "blue triangle"),
         ("green circle", "purple triangle")),
        ("living+object", ("red circle", "yellow square"),
         ("blue triangle", "green square")),
        ("object+object", ("yellow square", "purple star"),
         ("green square", "red star")),
        ("living+upwearing", ("red circle", "blue star"),
         ("green triangle", "yellow star")),
        ("living+midwearing", ("blue circle", "purple square"),
         ("yellow triangle", "red square")),
        ("midwearing+downwearing", ("red square", "blue square"),
         ("green square", "purple square")),
        ("living+scene", ("red circle", "snow"),
         ("blue triangle", "grass")),
        ("living+living+living", ("red circle", "blue triangle", "yellow star"),
         ("purple circle", "green triangle", "red star")),
        ("upwearing+midwearing+downwearing",
         ("red star", "blue square", "green square"),
         ("yellow star", "purple square", "red square")),
    ]
    cases = []
    for combo, fillers_a, fillers_b in plans:
        for variant, fillers in enumerate((fillers_a, fillers_b)):
            cases.append(make_case(combo, fillers, SCENE_VARIANTS[variant],
                                   seed=1000 + len(cases)))
    for fillers in (("red circle",), ("blue square",)):
        cases.append(make_case("single", fillers, SCENE_VARIANTS[0],
                               seed=1000 + len(cases)))
    return cases


def builtin_bench_path() -> str:
    """Path of the packaged 20-case benchmark file."""
    from importlib.resources import files
    return str(files("msdiff").joinpath("assets", "mini_bench.json"))


def subject_color(subject_id: str) -> str:
    """Palette word used when scoring a subject's pixels."""
    words = subject_id.split()
    if len(words) == 2 and words[0] in COLOR_VALUES and words[1] in SHAPES:
        return words[0]
    if len(words) == 1 and words[0] in SCENE_SUBJECT_COLORS:
        return SCENE_SUBJECT_COLORS[words[0]]
    raise ContractError(f"unknown subject id {subject_id!r}")


def reference_crop(subject_id: str, size: int = 16) -> np.ndarray:
    """Canonical reference image for a bench subject id."""
    words = subject_id.split()
    if len(words) == 2 and words[0] in COLOR_VALUES and words[1] in SHAPES:
        return render_subject_crop(words[0], words[1], size)
    if len(words) == 1 and words[0] in SCENE_SUBJECT_COLORS:
        palette = {**COLOR_VALUES, **BACKGROUND_VALUES}
        value = palette[SCENE_SUBJECT_COLORS[words[0]]]
        return snap_to_byte_grid(np.full((size, size, 3), value))
    raise ContractError(f"unknown subject id {subject_id!r}")


def case_subjects(case: BenchCase, vocab, size: int = 16):
    """SubjectRefs, reference crops, and scoring colors for one case."""
    subjects, crops, colors = [], [], []
    for subject_id, box in zip(case.subject_ids, case.boxes):
        crop = reference_crop(subject_id, size)
        entity_word = subject_id.split()[-1]
        entity_id = vocab.id_of(entity_word)
        subjects.append(SubjectRef(Tensor(crop), entity_id, box))
        crops.append(crop)
        colors.append(subject_color(subject_id))
    return subjects, crops, colors


def _case_entry(case: BenchCase) -> dict:
    return {
        "combo_type": case.combo_type,
        "prompt": case.prompt,
        "subject_ids": list(case.subject_ids),
        "boxes": [[b.x0, b.y0, b.x1, b.y1] for b in case.boxes],
        "seed": case.seed,
    }


def save_bench(cases: list[BenchCase], path: str) -> None:
    payload = {"format_version": BENCH_FORMAT_VERSION,
               "cases": [_case_entry(c) for c in cases]}
    _write_json(payload, path)


def load_bench(path: str) -> list[BenchCase]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(payload, dict):
        raise ParseError(f"{path}: bench file must be a JSON object")
    version = payload.get("format_version")
    if version != BENCH_FORMAT_VERSION:
        raise ParseError(f"{path}: bench format_version {version!r}, "
                         f"this build reads {BENCH_FORMAT_VERSION}")
    raw_cases = payload.get("cases")
    if not isinstance(raw_cases, list):
        raise ParseError(f"{path}: missing 'cases' list")
    cases = []
    for i, raw in enumerate(raw_cases):
        try:
            boxes = tuple(BoxNorm(*map(float, b)) for b in raw["boxes"])
            cases.append(BenchCase(str(raw["combo_type"]), str(raw["prompt"]),
                                   boxes, tuple(map(str, raw["subject_ids"])),
                                   int(raw["seed"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: case {i} is malformed ({exc})") from exc
    return cases


def bench_run(model, cases: list[BenchCase], sampler_cfg: SamplerConfig,
              samples_per_case: int = 5) -> dict:
    """Generate and score every case; per-case failures are recorded, not fatal."""
    if samples_per_case < 1:
        raise ContractError(f"samples_per_case must be >= 1, got {samples_per_case}")
    entries = []
    scored = {"subject_fidelity": [], "fidelity_product": [],
              "text_fidelity": [], "layout_adherence": []}
    for case in cases:
        entry = _case_entry(case)
        try:
            subjects, crops, colors = case_subjects(case, model.vocab)
            per_metric = {k: [] for k in scored}
            per_subject = [[] for _ in subjects]
            for k in range(samples_per_case):
                rng = Rng(case.seed).child("sample", k)
                image = cfg_sample(model, case.prompt, subjects,
                                   sampler_cfg, rng).image
                fids = [subject_fidelity(image, crops[j], case.boxes[j])
                        for j in range(len(subjects))]
                for j, f in enumerate(fids):
                    per_subject[j].append(f)
                per_metric["subject_fidelity"].append(float(np.mean(fids)))
                per_metric["fidelity_product"].append(fidelity_product(fids))
                per_metric["text_fidelity"].append(text_fidelity(image, case.prompt))
                per_metric["layout_adherence"].append(
                    layout_adherence(image, list(case.boxes), colors))
        except (ContractError, RenderError, ParseError, VocabError) as exc:
            entry["error"] = str(exc)
            entries.append(entry)
            continue
        entry["metrics"] = {k: float(np.mean(v)) for k, v in per_metric.items()}
        entry["metrics"]["per_subject_fidelity"] = [float(np.mean(v))
                                                    for v in per_subject]
        for k in scored:
            scored[k].append(entry["metrics"][k])
        entries.append(entry)
    aggregate = ({k: float(np.mean(v)) for k, v in scored.items()}
                 if scored["fidelity_product"] else None)
    return {
        "format_version": REPORT_FORMAT_VERSION,
        "samples_per_case": samples_per_case,
        "sampler": {
            "guidance_scale": sampler_cfg.guidance_scale,
            "gamma": sampler_cfg.gamma,
            "num_steps": sampler_cfg.num_steps,
            "pseudo_layout": (None if sampler_cfg.pseudo_layout is None else {
                "threshold": sampler_cfg.pseudo_layout.threshold,
                "switch_step": sampler_cfg.pseudo_layout.switch_step,
            }),
        },
        "num_cases": len(cases),
        "num_errors": sum(1 for e in entries if "error" in e),
        "cases": entries,
        "aggregate": aggregate,
    }


def write_report(report: dict, path: str) -> None:
    _write_json(report, path)


def load_report(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            report = json.load(fh)
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    version = report.get("format_version") if isinstance(report, dict) else None
    if version != REPORT_FORMAT_VERSION:
        raise ParseError(f"{path}: report format_version {version!r}, "
                         f"this build reads {REPORT_FORMAT_VERSION}")
    return report


def _write_json(payload, path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
