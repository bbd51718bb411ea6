"""Report writers: line-delimited records and TSV tables, each with a rendered figure.

Every report path emits machine-readable output (JSONL or TSV) and a PNG
rendered with the Agg backend next to it.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evaluation import EvalReport  # noqa: E402


def write_jsonl(path: str | Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines()
            if line.strip()]


def write_metrics_log(path: str | Path, records: list[dict]) -> None:
    """Training metrics as one {step, loss, lr} object per line, plus a loss figure."""
    write_jsonl(path, records)
    figure_path = Path(path).with_suffix(".png")
    plot_loss_curve([r["loss"] for r in records], figure_path)


def plot_loss_curve(losses: list[float], path: str | Path, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(range(len(losses)), losses, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_eval_report(reports: list[EvalReport], out_dir: str | Path) -> Path:
    """eval_report.jsonl + human-readable eval_report.txt + score figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "eval_report.jsonl", [r.to_dict() for r in reports])

    lines = [f"{'task':<28s} {'metric':<18s} {'mean':>8s} {'std':>8s} {'n':>5s}  per-seed"]
    for r in reports:
        seeds = ", ".join(f"{v:.4f}" for v in r.per_seed)
        lines.append(
            f"{r.task_tag:<28s} {r.metric:<18s} {r.mean:8.4f} {r.std:8.4f} "
            f"{r.num_examples:>5d}  [{seeds}]"
        )
    (out / "eval_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    primary = [r for r in reports if not r.metric.endswith("critical")]
    if primary:
        fig, ax = plt.subplots(figsize=(max(6, 1.1 * len(primary)), 3.5))
        labels = [f"{r.task_tag}\n({r.metric})" for r in primary]
        ax.bar(range(len(primary)), [r.mean for r in primary],
               yerr=[r.std for r in primary], capsize=3)
        ax.set_xticks(range(len(primary)))
        ax.set_xticklabels(labels, fontsize=7)
        ax.set_ylabel("score")
        ax.set_title("evaluation (mean +/- std over seeds)")
        fig.tight_layout()
        fig.savefig(out / "eval_scores.png", dpi=120)
        plt.close(fig)
    return out / "eval_report.txt"


def write_ablation_table(rows: list[dict], out_dir: str | Path) -> Path:
    """Side-by-side ablation table as TSV plus a grouped bar figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not rows:
        raise ValueError("no ablation rows to write")
    columns = list(rows[0].keys())
    tsv_path = out / "ablation.tsv"
    with open(tsv_path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(str(row[c]) for c in columns) + "\n")

    fig, ax = plt.subplots(figsize=(max(6, 1.4 * len(rows)), 3.5))
    names = [str(r.get("variant", i)) for i, r in enumerate(rows)]
    final_losses = [float(r.get("final_loss", 0.0)) for r in rows]
    ax.bar(range(len(rows)), final_losses)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, fontsize=7)
    ax.set_ylabel("final training loss")
    ax.set_title("ablation grid")
    fig.tight_layout()
    fig.savefig(out / "ablation.png", dpi=120)
    plt.close(fig)
    return tsv_path
