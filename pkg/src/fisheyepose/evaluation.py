"""Evaluation metrics, radial error analysis, ablations, and report output.

Reports come in matching pairs: machine-readable delimited files (CSV and
JSON) plus rendered figures saved next to them.  All output is
byte-deterministic for identical inputs: floats are formatted explicitly,
JSON keys are sorted, and figures are rendered with a pinned hash salt and
no date metadata.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from scipy import stats

from . import autodiff as ad
from .network import Model
from .training import TrainConfig, normalize_image, run_training, split_dataset

matplotlib.rcParams["svg.hashsalt"] = "fisheyepose"


@dataclass
class EvalRecord:
    """Ground truth and decoded predictions for one sample."""

    source_id: str
    gt_pose: tuple
    pred_pose: tuple
    gt_theta: float
    gt_rho: float
    pred_theta: float
    pred_rho: float


class RadialBin(NamedTuple):
    center: float
    mean_mae: float
    count: int


def evaluate_model(model: Model, samples, batch_size: int = 32) -> list:
    """Run inference over samples and pair predictions with ground truth."""
    records = []
    with ad.no_grad():
        for start in range(0, len(samples), batch_size):
            batch = samples[start : start + batch_size]
            images = np.stack([normalize_image(s.image) for s in batch])
            bundle = model.forward(images)
            poses = bundle.pose_degrees()
            thetas = bundle.theta.decoded.values
            rhos = bundle.rho.decoded.values
            for i, s in enumerate(batch):
                records.append(
                    EvalRecord(
                        source_id=s.source_id,
                        gt_pose=(s.pose.pitch, s.pose.yaw, s.pose.roll),
                        pred_pose=tuple(float(v) for v in poses[i]),
                        gt_theta=s.location.theta_deg,
                        gt_rho=s.location.rho,
                        pred_theta=float(thetas[i]),
                        pred_rho=float(rhos[i]),
                    )
                )
    return records


def mae(records) -> dict:
    """Mean absolute error per pose axis plus their average."""
    if not records:
        raise ValueError("mae needs at least one record")
    gt = np.array([r.gt_pose for r in records])
    pred = np.array([r.pred_pose for r in records])
    per_axis = np.abs(pred - gt).mean(axis=0)
    return {
        "pitch": float(per_axis[0]),
        "yaw": float(per_axis[1]),
        "roll": float(per_axis[2]),
        "mae": float(per_axis.mean()),
    }


def sample_mae(record: EvalRecord) -> float:
    gt = np.asarray(record.gt_pose)
    pred = np.asarray(record.pred_pose)
    return float(np.abs(pred - gt).mean())


def radial_error_curve(records, n_bins: int = 8, rho_range=(0.0, 0.8)) -> list:
    """Mean pose MAE per ground-truth radial bin; empty bins are omitted."""
    lo, hi = rho_range
    width = (hi - lo) / n_bins
    sums = np.zeros(n_bins)
    counts = np.zeros(n_bins, dtype=int)
    for r in records:
        k = int((r.gt_rho - lo) / width)
        k = min(max(k, 0), n_bins - 1)
        sums[k] += sample_mae(r)
        counts[k] += 1
    curve = []
    for k in range(n_bins):
        if counts[k] > 0:
            curve.append(RadialBin(lo + (k + 0.5) * width, float(sums[k] / counts[k]), int(counts[k])))
    return curve


def radial_trend_spearman(curve) -> float:
    """Spearman rank correlation of mean MAE against bin order."""
    if len(curve) < 2:
        raise ValueError("radial trend needs at least two occupied bins")
    rho, _ = stats.spearmanr(np.arange(len(curve)), [b.mean_mae for b in curve])
    return float(rho)


# ---------------------------------------------------------------------------
# ablation


@dataclass(frozen=True)
class AblationVariant:
    """One training configuration in the location-guidance grid."""

    name: str
    location_module: bool
    lambda1: float
    lambda2: float


def ablation_pair(lambda1: float = 10.0, lambda2: float = 0.001) -> list:
    """The headline comparison: full model vs location-free baseline."""
    return [
        AblationVariant("full", True, lambda1, lambda2),
        AblationVariant("baseline", False, 0.0, 0.0),
    ]


def full_variant_grid(lambda1: float = 10.0, lambda2: float = 0.001) -> list:
    """All eight combinations of attention module and location losses."""
    out = []
    for module in (True, False):
        for use_l1 in (True, False):
            for use_l2 in (True, False):
                name = "att{}-rho{}-theta{}".format(*(int(v) for v in (module, use_l1, use_l2)))
                out.append(
                    AblationVariant(
                        name, module, lambda1 if use_l1 else 0.0, lambda2 if use_l2 else 0.0
                    )
                )
    return out


@dataclass
class AblationReport:
    rows: list  # one dict per (variant, seed)
    summary: list  # one dict per variant, averaged over seeds
    records: dict  # (variant name, seed) -> list[EvalRecord]


def _variant_config(base: TrainConfig, variant: AblationVariant, seed: int) -> TrainConfig:
    import dataclasses

    model = dataclasses.replace(base.model, location_module=variant.location_module)
    weights = dataclasses.replace(
        base.weights, lambda1=variant.lambda1, lambda2=variant.lambda2
    )
    return dataclasses.replace(base, model=model, weights=weights, seed=seed)


def ablation_run(
    samples,
    base_cfg: TrainConfig,
    variants,
    seeds,
    split_fraction: float = 0.7,
    progress=None,
) -> AblationReport:
    """Train and evaluate every (variant, seed) pair on shared splits.

    The train/test split depends only on the seed, so variants trained under
    the same seed see identical data and differ only in configuration.
    """
    rows = []
    records = {}
    for seed in seeds:
        train_set, test_set = split_dataset(samples, split_fraction, seed)
        for variant in variants:
            cfg = _variant_config(base_cfg, variant, seed)
            result = run_training(train_set, cfg)
            recs = evaluate_model(result.model, test_set, batch_size=base_cfg.batch_size)
            row = {"variant": variant.name, "seed": seed, **mae(recs)}
            row["final_train_loss"] = result.records[-1]["loss"]
            rows.append(row)
            records[(variant.name, seed)] = recs
            if progress is not None:
                progress(row)
    summary = []
    for variant in variants:
        vrows = [r for r in rows if r["variant"] == variant.name]
        summary.append(
            {
                "variant": variant.name,
                "seeds": len(vrows),
                "pitch": float(np.mean([r["pitch"] for r in vrows])),
                "yaw": float(np.mean([r["yaw"] for r in vrows])),
                "roll": float(np.mean([r["roll"] for r in vrows])),
                "mae": float(np.mean([r["mae"] for r in vrows])),
            }
        )
    return AblationReport(rows=rows, summary=summary, records=records)


# ---------------------------------------------------------------------------
# report emission


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_csv(path, rows, columns) -> None:
    """Write dict rows with fixed column order and 6-decimal floats."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def save_figure(fig, path) -> None:
    """Render a figure deterministically (pinned salt, no date metadata)."""
    path = Path(path)
    if path.suffix == ".svg":
        fig.savefig(path, format="svg", metadata={"Date": None})
    elif path.suffix == ".png":
        fig.savefig(path, format="png", metadata={"Software": None})
    else:
        raise ValueError(f"unsupported figure format {path.suffix!r}")
    plt.close(fig)


def plot_radial_curve(curve, path, title="Pose error vs radial position") -> None:
    fig, ax = plt.subplots(figsize=(8, 5), dpi=100)
    if curve:
        ax.plot([b.center for b in curve], [b.mean_mae for b in curve], marker="o")
    ax.set_xlabel("location rho (bin center)")
    ax.set_ylabel("mean MAE (degrees)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    save_figure(fig, path)


def plot_training_curves(records, path) -> None:
    fig, ax = plt.subplots(figsize=(8, 5), dpi=100)
    epochs = [r["epoch"] for r in records]
    ax.plot(epochs, [r["loss"] for r in records], marker="o", label="total loss")
    ax2 = ax.twinx()
    ax2.plot(
        epochs, [r["train_mae"] for r in records], marker="s", color="tab:orange", label="train MAE"
    )
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2.set_ylabel("train MAE (degrees)")
    ax.set_title("Training progress")
    ax.grid(True, alpha=0.3)
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines + lines2, labels + labels2, loc="upper right")
    save_figure(fig, path)


def plot_ablation_summary(summary, path) -> None:
    fig, ax = plt.subplots(figsize=(8, 5), dpi=100)
    names = [row["variant"] for row in summary]
    ax.bar(names, [row["mae"] for row in summary], color="tab:blue")
    ax.set_ylabel("seed-averaged MAE (degrees)")
    ax.set_title("Ablation: pose error by configuration")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    save_figure(fig, path)


def plot_sweep_heatmap(grid, lambda1_values, lambda2_values, path) -> None:
    fig, ax = plt.subplots(figsize=(8, 5), dpi=100)
    im = ax.imshow(np.asarray(grid), origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(lambda2_values)), [f"{v:g}" for v in lambda2_values])
    ax.set_yticks(range(len(lambda1_values)), [f"{v:g}" for v in lambda1_values])
    ax.set_xlabel("lambda2 (theta weight)")
    ax.set_ylabel("lambda1 (rho weight)")
    ax.set_title("MAE over location-loss weights")
    fig.colorbar(im, ax=ax, label="MAE (degrees)")
    fig.tight_layout()
    save_figure(fig, path)


EVAL_CSV_COLUMNS = ("pitch", "yaw", "roll", "mae")
ABLATION_CSV_COLUMNS = ("variant", "seed", "pitch", "yaw", "roll", "mae", "final_train_loss")
ABLATION_SUMMARY_COLUMNS = ("variant", "seeds", "pitch", "yaw", "roll", "mae")
RADIAL_CSV_COLUMNS = ("center", "mean_mae", "count")


def emit_eval_report(out_dir, metrics: dict, curve, predictions=None) -> None:
    """Write metrics + radial curve as CSV/JSON with figures alongside."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "metrics.json", metrics)
    write_csv(out_dir / "metrics.csv", [metrics], EVAL_CSV_COLUMNS)
    write_csv(out_dir / "radial_curve.csv", [b._asdict() for b in curve], RADIAL_CSV_COLUMNS)
    plot_radial_curve(curve, out_dir / "radial_curve.svg")
    if predictions is not None:
        cols = ("source_id", "gt_pitch", "gt_yaw", "gt_roll", "pred_pitch", "pred_yaw",
                "pred_roll", "gt_theta", "gt_rho", "pred_theta", "pred_rho")
        rows = [
            {
                "source_id": r.source_id,
                "gt_pitch": r.gt_pose[0],
                "gt_yaw": r.gt_pose[1],
                "gt_roll": r.gt_pose[2],
                "pred_pitch": r.pred_pose[0],
                "pred_yaw": r.pred_pose[1],
                "pred_roll": r.pred_pose[2],
                "gt_theta": r.gt_theta,
                "gt_rho": r.gt_rho,
                "pred_theta": r.pred_theta,
                "pred_rho": r.pred_rho,
            }
            for r in predictions
        ]
        write_csv(out_dir / "predictions.csv", rows, cols)


def emit_ablation_report(out_dir, report: AblationReport) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "ablation.csv", report.rows, ABLATION_CSV_COLUMNS)
    write_csv(out_dir / "ablation_summary.csv", report.summary, ABLATION_SUMMARY_COLUMNS)
    write_json(out_dir / "ablation.json", {"rows": report.rows, "summary": report.summary})
    plot_ablation_summary(report.summary, out_dir / "ablation.svg")
