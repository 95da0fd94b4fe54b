"""SVG report figures rendered with matplotlib (Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["loss_curves", "map_curves", "pr_curves"]

LOSS_KEYS = ("total", "inter", "intra", "score", "cls", "reg")


def loss_curves(history_rows: list[dict], path) -> None:
    """Per-epoch loss components on one axis, learning rate on a twin axis."""
    fig, ax = plt.subplots(figsize=(7, 4.2))
    epochs = [r["epoch"] for r in history_rows]
    for key in LOSS_KEYS:
        ax.plot(epochs, [r[key] for r in history_rows], label=key, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8, ncol=2)
    ax.grid(alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(epochs, [r["lr"] for r in history_rows], color="gray", linestyle="--",
             linewidth=0.9, alpha=0.7)
    ax2.set_ylabel("lr", color="gray")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def map_curves(history_rows: list[dict], path) -> None:
    """Evaluation mAP trajectory for every threshold column present."""
    keys = sorted({k for r in history_rows for k in r if k.startswith("map@")})
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for key in keys:
        pts = [(r["epoch"], r[key]) for r in history_rows if r.get(key) is not None]
        if pts:
            ax.plot(*zip(*pts), marker="o", markersize=3, linewidth=1.2, label=key)
    pts = [(r["epoch"], r["average_map"]) for r in history_rows
           if r.get("average_map") is not None]
    if pts:
        ax.plot(*zip(*pts), color="black", linewidth=1.8, label="average mAP")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mAP")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    if keys or pts:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def pr_curves(report, path) -> None:
    """Precision-recall envelopes, one panel per tIoU threshold."""
    thresholds = report.thresholds
    cols = min(3, len(thresholds))
    rows = -(-len(thresholds) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 3.0 * rows), squeeze=False)
    for i, t in enumerate(thresholds):
        ax = axes[i // cols][i % cols]
        for c in report.classes:
            rec, prec = report.curves.get(t, {}).get(c, ([], []))
            if rec:
                env = list(prec)
                for k in range(len(env) - 2, -1, -1):
                    env[k] = max(env[k], env[k + 1])
                ax.step([0.0] + list(rec), [env[0] if env else 0.0] + env,
                        where="post", linewidth=1.0, label=f"class {c}")
        ax.set_title(f"tIoU {t} (mAP {report.map_at[t]:.3f})", fontsize=9)
        ax.set_xlim(0, 1.0)
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
        if i == 0 and len(report.classes) <= 8:
            ax.legend(fontsize=7)
    for j in range(len(thresholds), rows * cols):
        axes[j // cols][j % cols].axis("off")
    fig.suptitle(f"average mAP {report.average_map:.3f}", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
