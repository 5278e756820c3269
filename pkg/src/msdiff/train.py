"""Two-phase training driver.

Phase 1 pretrains the text-conditioned denoiser with the image branch fully
dropped.  Phase 2 freezes those base weights and trains only the adapter set
(subject projector, grounding fusion, dummy tokens, image key/value maps).
With freeze_base false a single joint phase updates both sets at once.

Every step draws its batch, timesteps, and noise from an Rng child keyed by
(phase, step), so runs are reproducible and resumable by construction.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

from .checkpoint import save_checkpoint
from .config import RunConfig, build_model
from .dataset import DatasetRecord, to_training_sample
from .diffusion import DropoutConfig, training_loss
from .errors import ContractError
from .model import Model
from .optim import AdamConfig, adam_step
from .rng import Rng

LOSS_LOG_HEADER = ("step", "denoise_loss", "attention_loss")


@dataclass(frozen=True)
class LossRow:
    step: int
    denoise_loss: float
    attention_loss: float


def _phases(cfg: RunConfig, model: Model):
    train = cfg.train
    shared = DropoutConfig(text_drop=train.text_drop, image_drop=train.image_drop)
    if not train.freeze_base:
        names = sorted(set(model.base_param_names()) | set(model.adapter_param_names()))
        return [("joint", train.steps, names, shared)]
    return [
        ("base", train.base_steps, model.base_param_names(),
         DropoutConfig(text_drop=train.text_drop, image_drop=1.0)),
        ("adapter", train.steps, model.adapter_param_names(), shared),
    ]


def train_model(cfg: RunConfig, records: list[DatasetRecord], on_step=None,
                model: Model | None = None) -> tuple[Model, list[LossRow]]:
    """Train on the given records; returns the trained model and the loss log.

    on_step(step, total_steps, row) fires after each optimizer update.
    """
    if model is None:
        model = build_model(cfg)
    phases = _phases(cfg, model)
    total_steps = sum(n for _, n, _, _ in phases)
    if total_steps > 0 and not records:
        raise ContractError("training requires a non-empty dataset")
    samples = [to_training_sample(r) for r in records]
    root = Rng(cfg.seed)
    rows: list[LossRow] = []
    adam = AdamConfig()
    step = 0
    for phase, num_steps, names, dropout in phases:
        for local in range(num_steps):
            rng = root.child(phase, local)
            batch = [samples[int(i)] for i in
                     rng.integers(0, len(samples), shape=cfg.train.batch)]
            loss, stats = training_loss(model, batch, rng,
                                        dropout, cfg.train.attention_loss_weight)
            model.store.zero_grads()
            loss.backward()
            adam_step(model.store, cfg.train.lr, adam, names)
            rows.append(LossRow(step, stats.denoise_loss, stats.attention_loss))
            step += 1
            if on_step is not None:
                on_step(step, total_steps, rows[-1])
    return model, rows


def write_loss_log(rows: list[LossRow], path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_LOG_HEADER)
        for row in rows:
            writer.writerow([row.step, repr(row.denoise_loss),
                             repr(row.attention_loss)])
    os.replace(tmp, path)


def read_loss_log(path: str) -> list[LossRow]:
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != LOSS_LOG_HEADER:
            raise ContractError(f"{path}: unexpected loss log header {header}")
        return [LossRow(int(s), float(d), float(a)) for s, d, a in reader]


def run_training(cfg: RunConfig, records: list[DatasetRecord], out_path: str,
                 on_step=None) -> tuple[Model, list[LossRow]]:
    """train_model plus artifacts: cadence checkpoints, the final checkpoint,
    and a CSV loss log next to the checkpoint path."""
    model = build_model(cfg)
    cadence = cfg.train.checkpoint_every
    stem, ext = os.path.splitext(out_path)
    rng_state = Rng(cfg.seed).child("resume").state()

    def hook(step, total, row):
        if on_step is not None:
            on_step(step, total, row)
        if step % cadence == 0 and step < total:
            save_checkpoint(f"{stem}.step{step:06d}{ext or '.ckpt'}",
                            model.store, cfg, step, rng_state)

    model, rows = train_model(cfg, records, on_step=hook, model=model)
    save_checkpoint(out_path, model.store, cfg, len(rows), rng_state)
    write_loss_log(rows, f"{stem}.loss.csv")
    return model, rows
