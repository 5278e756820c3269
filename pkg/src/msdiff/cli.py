"""Command line surface: dataset synthesis, training, sampling, evaluation.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Every command that
takes --seed produces byte-identical outputs for identical invocations.  The
MSDIFF_THREADS environment variable caps worker threads for data generation.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .bench import bench_run, load_bench, write_report
from .checkpoint import load_model
from .config import RunConfig, load_config
from .dataset import generate_dataset, read_dataset, write_dataset
from .diffusion import PseudoLayoutConfig, cfg_sample
from .embedding import BoxNorm
from .errors import ConfigError, MsdiffError, ParseError, VocabError
from .ppm import read_ppm, resize_nearest, write_pgm, write_ppm
from .resampler import SubjectRef
from .rng import Rng
from .tensor import Tensor
from .train import run_training

SUBJECT_SPEC_HELP = "IMAGE.ppm:ENTITY:X0,Y0,X1,Y1"


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; this CLI reserves 2 for
    runtime failures, so usage errors exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def worker_count() -> int:
    raw = os.environ.get("MSDIFF_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MSDIFF_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"MSDIFF_THREADS must be a positive integer, got {raw!r}")
    return n


def _parse_subject(raw: str, vocab) -> SubjectRef:
    parts = raw.split(":")
    if len(parts) != 3:
        raise ParseError(f"--subject {raw!r}: expected {SUBJECT_SPEC_HELP}")
    path, entity, coord_blob = parts
    coords = coord_blob.split(",")
    if len(coords) != 4:
        raise ParseError(f"--subject {raw!r}: expected four box coordinates")
    try:
        x0, y0, x1, y1 = (float(c) for c in coords)
    except ValueError:
        raise ParseError(f"--subject {raw!r}: box coordinates must be numbers")
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        raise ParseError(f"--subject {raw!r}: box must satisfy 0 <= min < max <= 1")
    image = read_ppm(path)
    try:
        entity_id = vocab.id_of(entity)
    except VocabError as exc:
        raise ParseError(f"--subject {raw!r}: unknown entity word {entity!r}") from exc
    return SubjectRef(Tensor(image), entity_id, BoxNorm(x0, y0, x1, y1))


def _parse_pseudo_layout(raw: str) -> PseudoLayoutConfig:
    parts = raw.split(",")
    if len(parts) != 2:
        raise ParseError(f"--pseudo-layout {raw!r}: expected THRESHOLD,SWITCH_STEP")
    try:
        threshold, switch = float(parts[0]), int(parts[1])
    except ValueError:
        raise ParseError(f"--pseudo-layout {raw!r}: expected a float threshold "
                         "and an integer switch step")
    return PseudoLayoutConfig(threshold=threshold, switch_step=switch)


def _subject_heatmaps(result, cfg, n_subjects: int) -> list[np.ndarray]:
    """Per-subject attention heat at the finest recorded resolution, upsampled
    to image size and peak-normalized for PGM output."""
    side = max(s for s, _ in result.image_maps)
    acc = [np.zeros((side, side)) for _ in range(n_subjects)]
    layers = 0
    for s, amap in result.image_maps:
        if s != side:
            continue
        for j in range(n_subjects):
            lo = cfg.dummy_count + j * cfg.n_t
            acc[j] += amap[:, lo:lo + cfg.n_t].sum(axis=1).reshape(side, side)
        layers += 1
    out = []
    for heat in acc:
        heat = heat / max(layers, 1)
        peak = heat.max()
        if peak > 0.0:
            heat = heat / peak
        out.append(resize_nearest(heat, cfg.image_size, cfg.image_size))
    return out


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def cmd_gen_data(args) -> int:
    records = generate_dataset(Rng(args.seed), args.num, canvas=args.canvas,
                               jitter=args.jitter, max_workers=worker_count())
    write_dataset(records, args.out)
    print(f"wrote {len(records)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    records = read_dataset(args.data)
    _ensure_parent(args.out)

    def progress(step, total, row):
        if step == total or step % max(1, total // 10) == 0:
            print(f"step {step}/{total} denoise={row.denoise_loss:.6f} "
                  f"attention={row.attention_loss:.6f}", flush=True)

    model, rows = run_training(cfg, records, args.out,
                               on_step=None if args.quiet else progress)
    stem = os.path.splitext(args.out)[0]
    if rows:
        from .figures import loss_curve_figure
        loss_curve_figure(rows, f"{stem}.loss.png")
        print(f"loss curve: {stem}.loss.png")
    print(f"loss log: {stem}.loss.csv")
    print(f"checkpoint: {args.out}")
    return 0


def cmd_sample(args) -> int:
    model, ckpt = load_model(args.ckpt)
    subjects = [_parse_subject(raw, model.vocab) for raw in args.subject]
    sample_cfg = ckpt.config.sample
    updates = {}
    if args.guidance is not None:
        updates["guidance_scale"] = args.guidance
    if args.gamma is not None:
        updates["gamma"] = args.gamma
    if args.pseudo_layout is not None:
        updates["pseudo_layout"] = _parse_pseudo_layout(args.pseudo_layout)
    if updates:
        sample_cfg = dataclasses.replace(sample_cfg, **updates)
    _ensure_parent(args.out)
    for k in range(args.num_samples):
        rng = Rng(args.seed).child("sample", k)
        result = cfg_sample(model, args.prompt, subjects, sample_cfg, rng)
        path = f"{args.out}_{k:02d}.ppm"
        write_ppm(path, result.image)
        print(path)
        if args.dump_attn and result.image_maps:
            for j, heat in enumerate(_subject_heatmaps(result, model.cfg,
                                                       len(subjects))):
                heat_path = f"{args.out}_{k:02d}_attn{j}.pgm"
                write_pgm(heat_path, heat)
                print(heat_path)
    return 0


def cmd_eval(args) -> int:
    model, ckpt = load_model(args.ckpt)
    cases = load_bench(args.bench)
    report = bench_run(model, cases, ckpt.config.sample,
                       samples_per_case=args.samples_per_case)
    _ensure_parent(args.out)
    write_report(report, args.out)
    stem = os.path.splitext(args.out)[0]
    _write_report_csv(report, f"{stem}.csv")
    from .figures import report_figure
    report_figure(report, f"{stem}.png")
    print(f"report: {args.out}")
    print(f"per-case table: {stem}.csv")
    print(f"figure: {stem}.png")
    agg = report["aggregate"]
    if agg is not None:
        print("aggregate: " + "  ".join(f"{k}={v:.4f}" for k, v in sorted(agg.items())))
    if report["num_errors"]:
        print(f"msdiff: {report['num_errors']} case(s) failed", file=sys.stderr)
        return 2
    return 0


def _write_report_csv(report: dict, path: str) -> None:
    import csv
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "combo_type", "prompt", "subjects",
                         "subject_fidelity", "fidelity_product", "text_fidelity",
                         "layout_adherence", "error"])
        for i, entry in enumerate(report.get("cases", [])):
            metrics = entry.get("metrics", {})
            writer.writerow([
                i, entry["combo_type"], entry["prompt"],
                len(entry["subject_ids"]),
                *(repr(metrics[k]) if k in metrics else "" for k in
                  ("subject_fidelity", "fidelity_product", "text_fidelity",
                   "layout_adherence")),
                entry.get("error", ""),
            ])
    os.replace(tmp, path)


def build_parser() -> _Parser:
    parser = _Parser(prog="msdiff",
                     description="layout-guided multi-subject toy diffusion lab")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="synthesize a training dataset")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--num", required=True, type=int, help="number of samples")
    g.add_argument("--seed", required=True, type=int)
    g.add_argument("--jitter", type=float, default=1.0,
                   help="target-frame perturbation strength in [0, 1]")
    g.add_argument("--canvas", type=int, default=32, help="frame side length")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--config", default=None, help="run config JSON (default: built-in)")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="checkpoint output path")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate images from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--subject", action="append", default=[],
                   metavar=SUBJECT_SPEC_HELP,
                   help="subject reference, up to 4 flags")
    s.add_argument("--gamma", type=float, default=None,
                   help="image-branch weight override")
    s.add_argument("--guidance", type=float, default=None,
                   help="guidance scale override")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--num-samples", type=int, default=1)
    s.add_argument("--pseudo-layout", default=None, metavar="THRESHOLD,SWITCH_STEP",
                   help="derive boxes from text attention after the switch step")
    s.add_argument("--dump-attn", action="store_true",
                   help="also write per-subject attention heatmaps as PGM")
    s.add_argument("--out", default="sample", help="output file prefix")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="run a benchmark file against a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--bench", required=True, help="bench JSON file")
    e.add_argument("--out", required=True, help="report JSON output path")
    e.add_argument("--samples-per-case", type=int, default=5)
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MsdiffError as exc:
        print(f"msdiff: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"msdiff: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
