"""Training-set construction: synthesize pairs, match, filter, pad, persist.

Each stored sample is the target frame plus exactly four subject slots.
Non-pad slots carry the matched reference crop (resized to a canonical
square), the entity id of the subject's shape noun, and the tight target-
frame box.  Pad slots have a zero crop, the PAD entity, a full-frame box,
and are skipped by mask assembly and losses downstream.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .diffusion import TrainingSample
from .embedding import BoxNorm, Vocab
from .errors import ContractError, ParseError, RenderError
from .matching import make_patch_embedder, match_subjects
from .ppm import read_ppm, resize_nearest, write_ppm
from .resampler import SubjectRef
from .rng import Rng
from .scenes import caption_for, synth_scene_pair
from .tensor import Tensor

MANIFEST_NAME = "manifest.json"
DATASET_FORMAT_VERSION = 1

MIN_BOX_AREA = 0.02
MAX_BOX_AREA = 0.80
MIN_ASPECT = 0.2
MAX_ASPECT = 5.0

_MAX_SAMPLE_TRIES = 50


@dataclass(frozen=True)
class SubjectSlot:
    crop: np.ndarray
    entity_id: int
    box: BoxNorm
    is_pad: bool


@dataclass(frozen=True)
class DatasetRecord:
    target: np.ndarray
    caption: str
    caption_ids: list[int]
    slots: tuple[SubjectSlot, ...]

    def __post_init__(self):
        if len(self.slots) != 4:
            raise ContractError(f"records carry exactly 4 slots, got {len(self.slots)}")
        pads = [s.is_pad for s in self.slots]
        if any(a and not b for a, b in zip(pads, pads[1:])):
            raise ContractError("pad slots must follow all non-pad slots")
        if pads[0]:
            raise ContractError("records need at least one real subject")


def box_passes_filter(box: BoxNorm) -> bool:
    """Area within [2%, 80%] of the canvas and aspect within [1/5, 5]."""
    w, h = box.x1 - box.x0, box.y1 - box.y0
    if w <= 0.0 or h <= 0.0:
        return False
    area = w * h
    aspect = w / h
    return MIN_BOX_AREA <= area <= MAX_BOX_AREA and MIN_ASPECT <= aspect <= MAX_ASPECT


def filter_and_pad(entities_boxes_crops: list[tuple[int, BoxNorm, np.ndarray]],
                   subject_size: int = 16) -> tuple[SubjectSlot, ...] | None:
    """Apply the box filter rules, then pad the survivors to four slots."""
    kept = [(e, b, c) for e, b, c in entities_boxes_crops if box_passes_filter(b)]
    if not kept:
        return None
    if len(kept) > 4:
        raise ContractError(f"at most 4 subjects per sample, got {len(kept)}")
    slots = [SubjectSlot(crop=resize_nearest(c, subject_size, subject_size),
                         entity_id=e, box=b, is_pad=False)
             for e, b, c in kept]
    pad = SubjectSlot(crop=np.zeros((subject_size, subject_size, 3)),
                      entity_id=Vocab.default().pad_id,
                      box=BoxNorm(0.0, 0.0, 1.0, 1.0), is_pad=True)
    slots.extend([pad] * (4 - len(slots)))
    return tuple(slots)


def build_record(rng: Rng, canvas: int, jitter: float, subject_size: int,
                 vocab: Vocab, embed) -> DatasetRecord | None:
    pair = synth_scene_pair(rng, canvas=canvas, jitter=jitter, vocab=vocab)
    outcome = match_subjects(pair.annotations_a, pair.annotations_b, embed)
    triples = [(ann.entity_id, ann.box, crop)
               for ann, crop in zip(pair.annotations_b, outcome.reference_crops)]
    slots = filter_and_pad(triples, subject_size)
    if slots is None:
        return None
    surviving = [i for i, (_, b, _) in enumerate(triples) if box_passes_filter(b)]
    mentions = [(pair.annotations_b[i].color, pair.annotations_b[i].shape)
                for i in surviving]
    caption = caption_for(mentions, pair.spec_b.background)
    return DatasetRecord(target=pair.frame_b, caption=caption,
                         caption_ids=vocab.encode(caption), slots=slots)


def generate_dataset(rng: Rng, num_samples: int, canvas: int = 32,
                     jitter: float = 1.0, subject_size: int = 16,
                     max_workers: int = 1) -> list[DatasetRecord]:
    """Build num_samples records; each draws only from its index-derived stream,
    so results are identical for any worker count."""
    if num_samples < 0:
        raise ContractError(f"num_samples must be >= 0, got {num_samples}")
    vocab = Vocab.default()
    embed = make_patch_embedder(size=subject_size)

    def one(i: int) -> DatasetRecord:
        sample_rng = rng.child("sample", i)
        for attempt in range(_MAX_SAMPLE_TRIES):
            try:
                record = build_record(sample_rng, canvas, jitter, subject_size,
                                      vocab, embed)
            except RenderError:
                record = None
            if record is not None:
                return record
        raise RenderError(f"sample {i}: no usable scene in "
                          f"{_MAX_SAMPLE_TRIES} attempts")

    if max_workers <= 1 or num_samples == 0:
        return [one(i) for i in range(num_samples)]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(one, range(num_samples)))


def _box_to_json(box: BoxNorm) -> list[float]:
    return [box.x0, box.y0, box.x1, box.y1]


def _box_from_json(vals, path: str) -> BoxNorm:
    if not (isinstance(vals, list) and len(vals) == 4):
        raise ParseError(f"{path}: box must be a 4-element array, got {vals!r}")
    return BoxNorm(*(float(v) for v in vals))


def write_dataset(records: list[DatasetRecord], out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"format_version": DATASET_FORMAT_VERSION, "samples": []}
    for i, rec in enumerate(records):
        stem = f"sample_{i:05d}"
        target_rel = f"{stem}_target.ppm"
        write_ppm(os.path.join(out_dir, target_rel), rec.target)
        subjects = []
        for j, slot in enumerate(rec.slots):
            crop_rel = f"{stem}_subject_{j}.ppm"
            write_ppm(os.path.join(out_dir, crop_rel), slot.crop)
            subjects.append({"crop": crop_rel, "entity_id": slot.entity_id,
                             "box": _box_to_json(slot.box), "is_pad": slot.is_pad})
        manifest["samples"].append({"target": target_rel, "caption": rec.caption,
                                    "caption_ids": rec.caption_ids,
                                    "subjects": subjects})
    tmp = os.path.join(out_dir, MANIFEST_NAME + ".tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    os.replace(tmp, os.path.join(out_dir, MANIFEST_NAME))


def _require(entry: dict, key: str, path: str):
    if key not in entry:
        raise ParseError(f"{path}: missing field {key!r}")
    return entry[key]


def read_dataset(in_dir: str) -> list[DatasetRecord]:
    manifest_path = os.path.join(in_dir, MANIFEST_NAME)
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except OSError as e:
        raise ParseError(f"{manifest_path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"{manifest_path}: line {e.lineno}: {e.msg}") from e
    version = _require(manifest, "format_version", manifest_path)
    if version != DATASET_FORMAT_VERSION:
        raise ParseError(f"{manifest_path}: format_version {version} unsupported, "
                         f"expected {DATASET_FORMAT_VERSION}")
    records = []
    for entry in _require(manifest, "samples", manifest_path):
        target = read_ppm(os.path.join(in_dir, _require(entry, "target", manifest_path)))
        slots = []
        for sub in _require(entry, "subjects", manifest_path):
            crop = read_ppm(os.path.join(in_dir, _require(sub, "crop", manifest_path)))
            slots.append(SubjectSlot(
                crop=crop, entity_id=int(_require(sub, "entity_id", manifest_path)),
                box=_box_from_json(_require(sub, "box", manifest_path), manifest_path),
                is_pad=bool(_require(sub, "is_pad", manifest_path))))
        records.append(DatasetRecord(
            target=target, caption=_require(entry, "caption", manifest_path),
            caption_ids=[int(x) for x in _require(entry, "caption_ids", manifest_path)],
            slots=tuple(slots)))
    return records


def to_training_sample(record: DatasetRecord) -> TrainingSample:
    subjects = [SubjectRef(image=Tensor(slot.crop), entity_id=slot.entity_id,
                           box=slot.box)
                for slot in record.slots]
    return TrainingSample(image=record.target, prompt=record.caption,
                          subjects=subjects,
                          pad_flags=[slot.is_pad for slot in record.slots])
