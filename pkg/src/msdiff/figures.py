"""Matplotlib renderings of training logs and benchmark reports.

Figures are written next to their delimited counterparts (the CSV loss log,
the per-case report CSV) so a run directory is self-describing.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def loss_curve_figure(rows, path: str) -> None:
    """Denoise and attention loss per optimizer step."""
    steps = [r.step for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r.denoise_loss for r in rows], lw=0.8, label="denoise loss")
    if any(r.attention_loss for r in rows):
        ax.plot(steps, [r.attention_loss for r in rows], lw=0.8,
                label="attention loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log" if all(r.denoise_loss > 0 for r in rows) else "linear")
    ax.legend(loc="upper right")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def report_figure(report: dict, path: str) -> None:
    """Per-case metric bars for a benchmark report; failed cases are skipped."""
    scored = [e for e in report.get("cases", []) if "metrics" in e]
    fig, axes = plt.subplots(3, 1, figsize=(max(6, 0.6 * max(1, len(scored))), 8),
                             sharex=True)
    keys = ("fidelity_product", "text_fidelity", "layout_adherence")
    xs = range(len(scored))
    for ax, key in zip(axes, keys):
        ax.bar(xs, [e["metrics"][key] for e in scored], color="#4878a8")
        agg = report.get("aggregate") or {}
        if key in agg:
            ax.axhline(agg[key], color="#a84848", lw=1.0, ls="--",
                       label=f"mean {agg[key]:.3f}")
            ax.legend(loc="upper right", fontsize=8)
        ax.set_ylabel(key.replace("_", " "))
        ax.set_ylim(0, 1.05)
    axes[-1].set_xticks(list(xs))
    axes[-1].set_xticklabels([e["combo_type"] for e in scored],
                             rotation=60, ha="right", fontsize=7)
    errors = report.get("num_errors", 0)
    axes[0].set_title(f"benchmark report ({len(scored)} cases scored, "
                      f"{errors} failed)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
