"""Render learning-curve figures from the delimited curve files.

Reads every `curves_seed*.csv` (and `curves_mean.csv` when present) in a
run directory and writes one PNG per domain with the success-rate and
mean-reward curves: thin lines per seed, a bold mean line on top.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = ["load_curves", "render_report"]


def load_curves(run_dir) -> list[dict]:
    """All curve rows from a run directory; seed is 'mean' or an int string."""
    rows = []
    run_dir = Path(run_dir)
    for path in sorted(run_dir.glob("curves_*.csv")):
        with path.open() as fh:
            for record in csv.DictReader(fh):
                record["dialogues"] = int(record["dialogues"])
                record["success_rate"] = float(record["success_rate"])
                record["mean_reward"] = float(record["mean_reward"])
                rows.append(record)
    return rows


def render_report(run_dir, fig_dir=None) -> list[Path]:
    run_dir = Path(run_dir)
    fig_dir = Path(fig_dir) if fig_dir is not None else run_dir
    fig_dir.mkdir(parents=True, exist_ok=True)
    rows = load_curves(run_dir)
    if not rows:
        raise FileNotFoundError(f"no curve files under {run_dir}")

    by_domain: dict[str, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for row in rows:
        by_domain[row["domain"]][row["seed"]].append(row)

    written: list[Path] = []
    for domain, by_seed in sorted(by_domain.items()):
        fig, (ax_succ, ax_rew) = plt.subplots(1, 2, figsize=(10, 3.6))
        for seed, seed_rows in sorted(by_seed.items()):
            seed_rows.sort(key=lambda r: r["dialogues"])
            xs = [r["dialogues"] for r in seed_rows]
            succ = [r["success_rate"] for r in seed_rows]
            rew = [r["mean_reward"] for r in seed_rows]
            if seed == "mean":
                ax_succ.plot(xs, succ, color="C3", linewidth=2.2, label="mean")
                ax_rew.plot(xs, rew, color="C3", linewidth=2.2, label="mean")
            else:
                ax_succ.plot(xs, succ, color="C0", alpha=0.35, linewidth=0.9)
                ax_rew.plot(xs, rew, color="C0", alpha=0.35, linewidth=0.9)
        ax_succ.set_xlabel("training dialogues")
        ax_succ.set_ylabel("success rate")
        ax_succ.set_ylim(-0.02, 1.02)
        ax_rew.set_xlabel("training dialogues")
        ax_rew.set_ylabel("mean reward")
        for ax in (ax_succ, ax_rew):
            ax.grid(alpha=0.3)
            if any(s == "mean" for s in by_seed):
                ax.legend(loc="lower right", fontsize=8)
        fig.suptitle(f"{domain}")
        fig.tight_layout()
        out = fig_dir / f"curves_{domain}.png"
        fig.savefig(out, dpi=130)
        plt.close(fig)
        written.append(out)
    return written
