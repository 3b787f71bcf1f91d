"""Target binning, image normalization, losses, Adam, and the training loop.

Every head is supervised twice: a cross-entropy term on the binned target
and a squared-error term on the expectation-decoded continuous estimate,
weighted by a per-head balance factor.  The five head losses combine as

    total = L_pitch + L_yaw + L_roll + lambda1 * L_rho + lambda2 * L_theta

Training is deterministic for a fixed config and seed: parameter init,
per-epoch shuffles, and the Adam sweep order are all derived from the seed.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .network import HeadOutput, Model, ModelConfig, PredictionBundle

log = logging.getLogger(__name__)

IMAGE_MEAN = np.array([0.485, 0.456, 0.406])
IMAGE_STD = np.array([0.229, 0.224, 0.225])


class NonFiniteLossError(RuntimeError):
    """Loss left the reals; carries the epoch and batch where it happened."""


@dataclass(frozen=True)
class BinningSpec:
    """Uniform binning of a scalar target: n bins of a fixed width."""

    n_bins: int
    bin_width: float
    range_min: float

    @classmethod
    def pose(cls) -> "BinningSpec":
        return cls(66, 3.0, -99.0)

    @classmethod
    def theta(cls) -> "BinningSpec":
        return cls(72, 5.0, -180.0)

    @classmethod
    def rho(cls) -> "BinningSpec":
        return cls(66, 0.015, 0.0)

    @property
    def range_max(self) -> float:
        return self.range_min + self.n_bins * self.bin_width

    def bin_label(self, value: float) -> int:
        """0-indexed bin of a value; the closed top edge joins the last bin."""
        if not (self.range_min <= value <= self.range_max) or not math.isfinite(value):
            raise ValueError(
                f"value {value!r} outside binning range [{self.range_min}, {self.range_max}]"
            )
        k = int((value - self.range_min) // self.bin_width)
        return min(k, self.n_bins - 1)

    def midpoint(self, k: int) -> float:
        return self.range_min + (k + 0.5) * self.bin_width

    def midpoints(self) -> np.ndarray:
        return self.range_min + (np.arange(self.n_bins) + 0.5) * self.bin_width


def normalize_image(raster: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) raster to channel-standardized float64 (3, H, W)."""
    if raster.ndim != 3 or raster.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) raster, got shape {raster.shape}")
    x = raster.astype(np.float64) / 255.0
    x = (x - IMAGE_MEAN) / IMAGE_STD
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def denormalize_image(chw: np.ndarray) -> np.ndarray:
    """Inverse of normalize_image, back to uint8 (H, W, 3)."""
    x = chw.transpose(1, 2, 0) * IMAGE_STD + IMAGE_MEAN
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class LossWeights:
    """Per-head regression balances plus the location loss weights."""

    alpha_pose: float = 1.0
    alpha_theta: float = 1.0
    alpha_rho: float = 100.0
    lambda1: float = 10.0
    lambda2: float = 0.001


def task_loss(head: HeadOutput, targets: np.ndarray, spec: BinningSpec, alpha: float) -> Tensor:
    """Cross-entropy on binned targets plus alpha-weighted MSE on the decode."""
    targets = np.atleast_1d(np.asarray(targets, dtype=np.float64))
    labels = np.array([spec.bin_label(v) for v in targets], dtype=np.int64)
    ce = ad.cross_entropy(head.logits, labels)
    reg = ad.mse(head.decoded, Tensor(targets if head.decoded.values.ndim else targets[0]))
    return ad.add(ce, ad.mul(reg, alpha))


def total_loss(
    bundle: PredictionBundle,
    poses: np.ndarray,
    thetas: np.ndarray,
    rhos: np.ndarray,
    weights: LossWeights = LossWeights(),
):
    """Combined multi-task loss; returns (scalar Tensor, per-term floats).

    Location terms with a zero weight are skipped outright, so a
    lambda1 = lambda2 = 0 run never routes gradient into the location heads.
    """
    poses = np.asarray(poses, dtype=np.float64)
    pose_spec = BinningSpec.pose()
    parts = {
        "loss_pitch": task_loss(bundle.pitch, poses[..., 0], pose_spec, weights.alpha_pose),
        "loss_yaw": task_loss(bundle.yaw, poses[..., 1], pose_spec, weights.alpha_pose),
        "loss_roll": task_loss(bundle.roll, poses[..., 2], pose_spec, weights.alpha_pose),
    }
    total = ad.add(ad.add(parts["loss_pitch"], parts["loss_yaw"]), parts["loss_roll"])
    components = {k: float(v.values) for k, v in parts.items()}
    components["loss_rho"] = 0.0
    components["loss_theta"] = 0.0
    if weights.lambda1 != 0.0:
        l_rho = task_loss(bundle.rho, rhos, BinningSpec.rho(), weights.alpha_rho)
        components["loss_rho"] = float(l_rho.values)
        total = ad.add(total, ad.mul(l_rho, weights.lambda1))
    if weights.lambda2 != 0.0:
        l_theta = task_loss(bundle.theta, thetas, BinningSpec.theta(), weights.alpha_theta)
        components["loss_theta"] = float(l_theta.values)
        total = ad.add(total, ad.mul(l_theta, weights.lambda2))
    components["loss"] = float(total.values)
    return total, components


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.9
    adam_eps: float = 1e-8
    lr_decay_epochs: tuple = (10, 20)
    lr_decay: float = 0.5
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["lr_decay_epochs"] = tuple(int(e) for e in d.get("lr_decay_epochs", (10, 20)))
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.step = 0


def adam_step(params: dict, state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in float64, deterministic name order."""
    state.step += 1
    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.adam_eps
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name in sorted(params):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for a 1-indexed epoch under the step-decay schedule."""
    drops = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return cfg.lr * cfg.lr_decay**drops


def filter_by_pose_range(samples, spec: BinningSpec = None):
    """Drop samples whose pose falls outside the binnable range."""
    spec = spec or BinningSpec.pose()
    kept = []
    dropped = 0
    for s in samples:
        if all(
            spec.range_min <= v <= spec.range_max for v in (s.pose.pitch, s.pose.yaw, s.pose.roll)
        ):
            kept.append(s)
        else:
            dropped += 1
    if dropped:
        log.warning("filtered %d samples with poses outside %s", dropped, spec)
    return kept


def split_dataset(samples, fraction: float, seed: int):
    """Deterministic shuffled split; returns (first, second) partitions."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    # fixed tag keeps the split stream independent of the epoch streams
    order = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x5B11D))).permutation(
        len(samples)
    )
    cut = int(round(fraction * len(samples)))
    return [samples[i] for i in order[:cut]], [samples[i] for i in order[cut:]]


@dataclass
class TrainResult:
    model: Model
    records: list


def _batch_arrays(samples, idx):
    images = np.stack([normalize_image(samples[i].image) for i in idx])
    poses = np.array(
        [(samples[i].pose.pitch, samples[i].pose.yaw, samples[i].pose.roll) for i in idx]
    )
    thetas = np.array([samples[i].location.theta_deg for i in idx])
    rhos = np.array([samples[i].location.rho for i in idx])
    return images, poses, thetas, rhos


def run_training(samples, cfg: TrainConfig, log_path=None, progress=None) -> TrainResult:
    """Train a model on synthesized samples; returns the model and epoch log.

    The epoch log is also appended to log_path as JSON lines when given.
    Raises NonFiniteLossError the moment any batch loss leaves the reals.
    """
    samples = filter_by_pose_range(samples)
    if not samples:
        raise ValueError("no trainable samples after pose-range filtering")
    model = Model(cfg.model, seed=cfg.seed)
    state = AdamState(model.params)
    records = []
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            lr = epoch_lr(cfg, epoch)
            perm = np.random.default_rng(
                np.random.SeedSequence(entropy=(cfg.seed, epoch))
            ).permutation(len(samples))
            sums: dict = {}
            abs_err = 0.0
            count = 0
            n_batches = 0
            for start in range(0, len(perm), cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                images, poses, thetas, rhos = _batch_arrays(samples, idx)
                bundle = model.forward(images)
                loss, comps = total_loss(bundle, poses, thetas, rhos, cfg.weights)
                if not math.isfinite(comps["loss"]):
                    raise NonFiniteLossError(
                        f"non-finite loss at epoch {epoch}, batch {n_batches}: "
                        f"{comps['loss']!r}"
                    )
                model.zero_grad()
                loss.backward()
                adam_step(model.params, state, lr, cfg)
                for k, val in comps.items():
                    sums[k] = sums.get(k, 0.0) + val * len(idx)
                abs_err += float(np.abs(bundle.pose_degrees() - poses).sum())
                count += len(idx)
                n_batches += 1
            record = {k: val / count for k, val in sums.items()}
            record["epoch"] = epoch
            record["lr"] = lr
            record["train_mae"] = abs_err / (3.0 * count)
            records.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record, sort_keys=True))
                log_file.write("\n")
                log_file.flush()
            if progress is not None:
                progress(record)
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(model=model, records=records)
