"""Figure rendering from the emitted CSV reports.

The only module that touches matplotlib. Every function reads a CSV that
some command already wrote and renders a PNG next to it, so figures can
always be regenerated (or skipped) without rerunning the computation.
"""

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _read_rows(csv_path) -> list:
    with open(csv_path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_loss_curves(csv_path, out_path):
    rows = _read_rows(csv_path)
    if not rows:
        raise ValueError(f"{csv_path}: no loss rows to plot")
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for col in ("L_cls_s", "L_lov_s", "L_obj_d", "L_cls_d", "L_center_d",
                "L_size_d", "L_yaw_d"):
        vals = [r[col] for r in rows]
        if any(v != "" for v in vals):
            ax.plot(steps, [float(v) if v != "" else float("nan") for v in vals],
                    label=col, linewidth=1)
    ax.plot(steps, [float(r["total"]) for r in rows], label="total",
            color="black", linewidth=2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def _plot_class_bars(csv_path, value_col, out_path, title):
    rows = _read_rows(csv_path)
    names = [r["class"] for r in rows if r["class"] != "mean" and r[value_col] != ""]
    vals = [float(r[value_col]) for r in rows if r["class"] != "mean" and r[value_col] != ""]
    mean = next((float(r[value_col]) for r in rows if r["class"] == "mean"), None)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(names)), vals, color="tab:blue")
    if mean is not None:
        ax.axhline(mean, color="tab:red", linestyle="--", linewidth=1,
                   label=f"mean = {mean:.3f}")
        ax.legend(fontsize=8)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel(value_col)
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_class_iou(csv_path, out_path):
    return _plot_class_bars(csv_path, "iou", out_path, "per-class IoU")


def plot_class_ap(csv_path, out_path):
    return _plot_class_bars(csv_path, "ap", out_path, "per-class AP")


def plot_connectivity(csv_path, out_path):
    rows = [r for r in _read_rows(csv_path) if r["kind"] == "sample"]
    hops = [float(r["hops"]) for r in rows]
    finite = [h for h in hops if h != float("inf")]
    unreachable = len(hops) - len(finite)
    fig, ax = plt.subplots(figsize=(6, 4))
    if finite:
        bins = range(int(min(finite)), int(max(finite)) + 2)
        ax.hist(finite, bins=bins, align="left", rwidth=0.85, color="tab:green")
    ax.set_xlabel("hops to reach the whole scan")
    ax.set_ylabel("sampled points")
    title = "window-graph connectivity"
    if unreachable:
        title += f" ({unreachable} unreachable)"
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_bench(csv_path, out_path):
    rows = _read_rows(csv_path)
    labels = [f"{r['method']}\nN={r['N']} M={r['M']}" for r in rows]
    vals = [float(r["median_us"]) for r in rows]
    colors = ["tab:blue" if r["method"] == "vq" else "tab:orange" for r in rows]
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(rows)), 4))
    ax.bar(range(len(rows)), vals, color=colors)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_yscale("log")
    ax.set_ylabel("median per-query time (us)")
    ax.set_title("neighbor search timing")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
