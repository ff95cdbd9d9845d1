"""Collate a run directory into report/: metric CSVs, curve plots, image grids and a summary."""
from __future__ import annotations

import csv
import shutil
from pathlib import Path

import numpy as np

from .errors import PrerequisiteError

CURVE_METRICS = (("accuracy", "Accuracy"), ("recall", "Recall"), ("f1", "F1"))
CURVE_SPLITS = ("val", "test")


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _read_metrics(path: Path):
    with open(path, newline="") as fh:
        return [r for r in csv.DictReader(fh)]


def plot_curves(rows, path: Path, title: str):
    """2 x 3 grid: accuracy / recall / F1 per epoch, validation on top, test below."""
    plt = _plt()
    fig, axes = plt.subplots(2, 3, figsize=(9, 5), dpi=100, sharex=True)
    for i, split in enumerate(CURVE_SPLITS):
        pts = [r for r in rows if r["split"] == split and r["epoch"].isdigit()]
        for j, (key, label) in enumerate(CURVE_METRICS):
            ax = axes[i, j]
            ax.plot([int(r["epoch"]) for r in pts], [float(r[key]) for r in pts], marker="o", ms=3)
            ax.set_ylim(0, 1.02)
            ax.set_title(f"{label} ({'validation' if split == 'val' else split})", fontsize=9)
            if i == 1:
                ax.set_xlabel("epoch")
    fig.suptitle(title)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def inpainting_grid(run_root: Path, arch: str, path: Path, n: int = 4):
    """Rows: masked input, composited output, original, for the first ``n`` validation pairs."""
    from .data import apply_mask
    from .inpainting.models import forward_inpaint, load_checkpoint
    from .pipeline import RunDirectory, load_splits

    run = RunDirectory(run_root)
    model, meta = load_checkpoint(run.inpaint_ckpt(arch))
    samples = (load_splits(run, "inpainting").val or [])[:n]
    if not samples:
        return False
    plt = _plt()
    fig, axes = plt.subplots(3, len(samples), figsize=(2 * len(samples), 6), dpi=100, squeeze=False)
    for j, s in enumerate(samples):
        out = forward_inpaint(model, s.image, s.mask)
        for i, (img, label) in enumerate(((apply_mask(s.image, s.mask), "input"), (out, "inpainted"), (s.image, "target"))):
            axes[i, j].imshow(np.clip(img, 0, 1))
            axes[i, j].axis("off")
            if j == 0:
                axes[i, j].set_title(label, fontsize=8, loc="left")
    fig.suptitle(f"{arch} (iteration {meta['iteration']})")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return True


def build_report(run_root) -> Path:
    """Write ``report/`` for a run. Missing stages are listed as gaps in ``summary.md``."""
    run_root = Path(run_root)
    if not run_root.is_dir() or not any(run_root.iterdir()):
        raise PrerequisiteError(str(run_root), "prepare-data")
    out = run_root / "report"
    out.mkdir(exist_ok=True)
    lines, gaps = ["# Run report", ""], []

    metric_files = sorted((run_root / "classifier").glob("*/*/metrics.csv"))
    if metric_files:
        with open(out / "classification_metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["arch", "mode", "epoch", "split", "accuracy", "recall", "f1", "cross_entropy"])
            for f in metric_files:
                arch, mode = f.parent.parent.name, f.parent.name
                rows = _read_metrics(f)
                for r in rows:
                    w.writerow([arch, mode, r["epoch"], r["split"], r["accuracy"], r["recall"], r["f1"], r["cross_entropy"]])
                plot_curves(rows, out / f"curves_{arch}_{mode}.png", f"{arch}, {mode} fine-tuning")
        lines += ["## Classification", ""]
        for f in metric_files:
            best = [r for r in _read_metrics(f) if r["epoch"] == "best"]
            if best:
                b = best[0]
                lines.append(f"- {f.parent.parent.name}/{f.parent.name}: test accuracy {float(b['accuracy']):.3f}, "
                             f"recall {float(b['recall']):.3f}, F1 {float(b['f1']):.3f}")
        lines.append("")
    else:
        gaps.append("classification metrics (run `patternid train-classifier`)")

    ckpts = sorted((run_root / "inpainting").glob("*/best.npz"))
    if ckpts:
        lines += ["## Inpainting", ""]
        for c in ckpts:
            arch = c.parent.name
            if (c.parent / "log.csv").exists():
                shutil.copyfile(c.parent / "log.csv", out / f"inpainting_log_{arch}.csv")
            if inpainting_grid(run_root, arch, out / f"inpainting_{arch}.png"):
                lines.append(f"- {arch}: samples in inpainting_{arch}.png")
        lines.append("")
    else:
        gaps.append("inpainting checkpoints (run `patternid train-inpaint`)")

    for src, name, producer in ((run_root / "clustering" / "clustering.csv", "clustering.csv", "cluster-eval"),
                                (run_root / "ablation" / "ablation.csv", "ablation.csv", "ablate"),
                                (run_root / "ablation" / "ablation.txt", "ablation.txt", "ablate")):
        if src.exists():
            shutil.copyfile(src, out / name)
        elif f"`patternid {producer}`" not in " ".join(gaps):
            gaps.append(f"{src.parent.name} results (run `patternid {producer}`)")
    if (out / "clustering.csv").exists():
        lines += ["## Clustering", "", "see clustering.csv", ""]
    if (out / "ablation.txt").exists():
        lines += ["## Region ablation", "", (out / "ablation.txt").read_text(encoding="utf-8"), ""]

    overlays = sorted((run_root / "gradcam").glob("*/*/*.png"))
    if overlays:
        lines += ["## GradCAM", "", f"{len(overlays)} overlays under gradcam/", ""]
    else:
        gaps.append("GradCAM overlays (run `patternid gradcam`)")

    if gaps:
        lines += ["## Gaps", ""] + [f"- missing {g}" for g in gaps] + [""]
    (out / "summary.md").write_text("\n".join(lines), encoding="utf-8")
    return out
