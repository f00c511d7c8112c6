"""Report rendering: delimited metric tables plus matplotlib figures.

Every command that scores predictions can emit a report bundle:

  metrics.json    the MetricsReport payload (or an aggregate of them)
  metrics.csv     one row per (arm, seed, volume) with the three rates
  figures/*.png   training curves, metric bars, and a slice montage
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

METRIC_COLUMNS = ["length_rate", "branch_rate", "dsc"]


def write_metrics_csv(path: str, rows: list[dict]) -> None:
    """One row per evaluation; extra keys become extra columns."""
    if not rows:
        raise ValueError("no rows to write")
    keys = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def write_metrics_json(path: str, payload: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def read_training_log(path: str) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def plot_training_curves(log_path: str, out_png: str) -> None:
    records = read_training_log(log_path)
    if not records:
        raise ValueError(f"empty training log: {log_path}")
    steps = [r["step"] for r in records]
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("l_total", "l_seg", "l_reg"):
        ax.plot(steps, [r[key] for r in records], label=key, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    ax.set_title("training losses")
    ax2.plot(steps, [r["dice_term"] for r in records], color="tab:green",
             linewidth=1.0, label="dice term")
    ax2.plot(steps, [r["lr"] for r in records], color="tab:gray",
             linewidth=1.0, label="lr")
    ax2.set_xlabel("step")
    ax2.legend(frameon=False)
    ax2.set_title("dice term / learning rate")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def plot_metric_bars(arm_means: dict[str, dict], out_png: str) -> None:
    """Grouped bars of length/branch/DSC per arm (e.g. full vs ablation)."""
    arms = list(arm_means)
    width = 0.8 / max(1, len(arms))
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, arm in enumerate(arms):
        vals = [arm_means[arm].get(m, 0.0) for m in METRIC_COLUMNS]
        xs = [j + i * width for j in range(len(METRIC_COLUMNS))]
        ax.bar(xs, vals, width=width, label=arm)
    ax.set_xticks([j + width * (len(arms) - 1) / 2 for j in range(len(METRIC_COLUMNS))])
    ax.set_xticklabels(METRIC_COLUMNS)
    ax.set_ylabel("%")
    ax.set_ylim(0, 105)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def plot_slice_montage(image, gt_mask, pred_mask, out_png: str) -> None:
    """Center slices along each axis with ground truth / prediction overlays."""
    img = image.data if hasattr(image, "data") else image
    gt = gt_mask.data if hasattr(gt_mask, "data") else gt_mask
    pred = pred_mask.data if hasattr(pred_mask, "data") else pred_mask
    centers = [s // 2 for s in img.shape]
    fig, axes = plt.subplots(1, 3, figsize=(11, 4))
    for axis, ax in enumerate(axes):
        sl = [slice(None)] * 3
        sl[axis] = centers[axis]
        sl = tuple(sl)
        ax.imshow(img[sl], cmap="gray", interpolation="nearest")
        ax.contour(gt[sl], levels=[0.5], colors="lime", linewidths=1.0)
        ax.contour(pred[sl], levels=[0.5], colors="red", linewidths=1.0)
        ax.set_title(f"axis {axis} @ {centers[axis]}")
        ax.axis("off")
    fig.suptitle("green: ground truth, red: prediction")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def write_report_bundle(out_dir: str, payload: dict, rows: list[dict],
                        log_paths: list[str] | None = None,
                        montage=None) -> dict:
    """Write metrics.json + metrics.csv + figures/; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    fig_dir = os.path.join(out_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    paths = {
        "metrics_json": os.path.join(out_dir, "metrics.json"),
        "metrics_csv": os.path.join(out_dir, "metrics.csv"),
        "figures": [],
    }
    write_metrics_json(paths["metrics_json"], payload)
    write_metrics_csv(paths["metrics_csv"], rows)

    arm_means = payload.get("arm_means")
    if arm_means is None and METRIC_COLUMNS[0] in payload:
        arm_means = {"result": {m: payload[m] for m in METRIC_COLUMNS}}
    if arm_means:
        p = os.path.join(fig_dir, "metrics_bars.png")
        plot_metric_bars(arm_means, p)
        paths["figures"].append(p)
    for i, log in enumerate(log_paths or []):
        p = os.path.join(fig_dir, f"training_curves_{i}.png")
        plot_training_curves(log, p)
        paths["figures"].append(p)
    if montage is not None:
        p = os.path.join(fig_dir, "slices.png")
        plot_slice_montage(*montage, out_png=p)
        paths["figures"].append(p)
    return paths
