"""Pre-training, linear-probe, fine-tune and single-point-baseline loops.

All loops are deterministic: dataset order, per-plot-per-epoch mask plans
and head initialization derive from explicit seeds, so reruns with one
seed produce bit-identical loss curves and reports. Pre-training never
reads labels.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .data import DatasetManifest, WaterfallPlot, load_waterfall, standardize
from .errors import ContractError
from .model import (Checkpoint, ModelConfig, cls_features_batch,
                    forward_mae_batch, head_logits, init_params,
                    make_classifier_head, pooled_logits_batch)
from .optim import AdamW, ScheduleConfig, lr_at
from .patches import patchify, sample_mask
from .tensor import Tensor, backward, cross_entropy, no_grad, reset_tape

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("run_id", "phase", "epoch", "split", "loss", "error_rate")
ABLATION_COLUMNS = ("axis", "value", "pretrain_loss", "probe_error_rate",
                    "finetune_error_rate")


@dataclass
class TrainConfig:
    """One training phase: schedule plus loop knobs."""

    schedule: ScheduleConfig
    batch_size: int = 16
    weight_decay: float = 0.05
    seed: int = 0
    mask_strategy: str = "random"
    mask_ratio: float = 0.5
    labeled_subset: Optional[int] = None
    max_epochs: Optional[int] = None  # run fewer epochs than the schedule spans
    betas: tuple = (0.9, 0.999)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.labeled_subset is not None and self.labeled_subset < 1:
            raise ContractError(f"labeled_subset must be >= 1, got {self.labeled_subset}")
        if self.max_epochs is not None and self.max_epochs < 1:
            raise ContractError(f"max_epochs must be >= 1, got {self.max_epochs}")

    @property
    def epochs(self) -> int:
        if self.max_epochs is None:
            return self.schedule.total_epochs
        return min(self.schedule.total_epochs, self.max_epochs)


def pretrain_defaults(**overrides) -> TrainConfig:
    cfg = TrainConfig(schedule=ScheduleConfig(1e-3, 3, 30), batch_size=16,
                      weight_decay=0.05, seed=0)
    return replace(cfg, **overrides) if overrides else cfg


def probe_defaults(**overrides) -> TrainConfig:
    cfg = TrainConfig(schedule=ScheduleConfig(1e-2, 0, 100), batch_size=64,
                      weight_decay=0.0, seed=0)
    return replace(cfg, **overrides) if overrides else cfg


def finetune_defaults(**overrides) -> TrainConfig:
    cfg = TrainConfig(schedule=ScheduleConfig(5e-4, 4, 40), batch_size=16,
                      weight_decay=0.05, seed=0)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class EvalReport:
    """Test-set error plus the training trace that produced it."""

    error_rate: float
    confusion: np.ndarray
    per_class_counts: np.ndarray
    loss_curve: List[float] = field(default_factory=list)
    predictions: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def error_rate(preds: np.ndarray, labels: np.ndarray) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ContractError(f"prediction/label lengths differ: {preds.shape} vs "
                            f"{labels.shape}")
    return float(np.mean(preds != labels))


def confusion(preds: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    """counts[i, j] = elements of true class i predicted as class j."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ContractError(f"prediction/label lengths differ: {preds.shape} vs "
                            f"{labels.shape}")
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (labels, preds), 1)
    return out


def relative_improvement(er_base: float, er_ours: float) -> float:
    """(base - ours) / base * 100; may be negative."""
    if er_base <= 0:
        raise ContractError(f"baseline error rate must be positive, got {er_base}")
    return (er_base - er_ours) / er_base * 100.0


def format_improvement(ri_percent: float) -> str:
    """One-decimal display, truncated toward zero (39.39... -> "39.3%")."""
    truncated = int(ri_percent * 10) / 10.0
    return f"{truncated:.1f}%"


def _report(preds: np.ndarray, labels: np.ndarray, n_classes: int,
            loss_curve: List[float]) -> EvalReport:
    conf = confusion(preds, labels, n_classes)
    return EvalReport(error_rate=error_rate(preds, labels), confusion=conf,
                      per_class_counts=conf.sum(axis=1), loss_curve=loss_curve,
                      predictions=np.asarray(preds), labels=np.asarray(labels))


# ---------------------------------------------------------------------------
# Dataset preparation
# ---------------------------------------------------------------------------

def load_plots(manifest: DatasetManifest) -> List[WaterfallPlot]:
    return [load_waterfall(manifest.plot_path(i)) for i in range(len(manifest))]


def prepare_patches(plots: List[WaterfallPlot], cfg: ModelConfig) -> np.ndarray:
    """Standardize plots and patchify into one (n, max_patches, width) array."""
    if not plots:
        raise ContractError("empty dataset")
    out = np.empty((len(plots), cfg.max_patches, cfg.patch_width), dtype=np.float32)
    for i, plot in enumerate(plots):
        patches, grid = patchify(standardize(plot).data, cfg.patch_channels,
                                 cfg.patch_samples)
        if grid.n_patches != cfg.max_patches:
            raise ContractError(
                f"plot {plot.source_id!r} yields {grid.n_patches} patches, model "
                f"expects {cfg.max_patches}")
        out[i] = patches
    return out


def _grid_for(plots: List[WaterfallPlot], cfg: ModelConfig):
    _, grid = patchify(plots[0].data, cfg.patch_channels, cfg.patch_samples)
    return grid


def _mask_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence((seed, 2, epoch, index)).generate_state(1)[0])


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1, epoch)))
    return rng.permutation(n)


def few_shot_subset(manifest: DatasetManifest, per_class: int,
                    seed: int) -> DatasetManifest:
    """Stratified subsample: ``per_class`` entries per class, ascending order."""
    labels = manifest.labels
    rng = np.random.default_rng(np.random.SeedSequence((seed, 4)))
    keep: List[int] = []
    for k in range(len(manifest.class_names)):
        idx = np.flatnonzero(labels == k)
        if idx.size < per_class:
            raise ContractError(
                f"class {k} has {idx.size} entries, cannot sample {per_class}")
        keep.extend(rng.choice(idx, size=per_class, replace=False).tolist())
    keep.sort()
    return DatasetManifest(class_names=list(manifest.class_names),
                           split=manifest.split,
                           entries=[manifest.entries[i] for i in keep],
                           root=manifest.root)


# ---------------------------------------------------------------------------
# Pre-training
# ---------------------------------------------------------------------------

def pretrain(train_manifest: DatasetManifest, model_cfg: ModelConfig,
             train_cfg: TrainConfig,
             epoch_hook: Optional[Callable[[int, float], None]] = None
             ) -> Tuple[Checkpoint, List[float]]:
    """Masked-reconstruction pre-training over raw, unlabeled plots.

    Labels are never read. Each plot gets a fresh seeded mask plan every
    epoch. Returns the final checkpoint and the per-epoch mean loss curve.
    """
    plots = load_plots(train_manifest)
    patches = prepare_patches(plots, model_cfg)
    grid = _grid_for(plots, model_cfg)
    n = patches.shape[0]
    params = init_params(model_cfg, seed=train_cfg.seed)
    optimizer = AdamW(params, betas=train_cfg.betas,
                      weight_decay=train_cfg.weight_decay)
    loop_rng = np.random.default_rng(np.random.SeedSequence((train_cfg.seed, 0)))

    curve: List[float] = []
    for epoch in range(train_cfg.epochs):
        lr = lr_at(epoch, train_cfg.schedule)
        order = _epoch_order(train_cfg.seed, epoch, n)
        total = 0.0
        for lo in range(0, n, train_cfg.batch_size):
            batch_idx = order[lo:lo + train_cfg.batch_size]
            plans = [sample_mask(grid, train_cfg.mask_ratio, train_cfg.mask_strategy,
                                 _mask_seed(train_cfg.seed, epoch, int(i)))
                     for i in batch_idx]
            _, loss = forward_mae_batch(patches[batch_idx], plans, model_cfg, params)
            backward(loss)
            optimizer.step(lr)
            optimizer.zero_grad()
            reset_tape()
            total += float(loss.data) * len(batch_idx)
        curve.append(total / n)
        logger.info("pretrain epoch %d/%d lr %.2e loss %.4f",
                    epoch + 1, train_cfg.epochs, lr, curve[-1])
        if epoch_hook is not None:
            epoch_hook(epoch, curve[-1])
    state = {"bit_generator": "PCG64", **loop_rng.bit_generator.state}
    return Checkpoint(config=model_cfg, params=params, epoch=train_cfg.epochs,
                      rng_state=state), curve


# ---------------------------------------------------------------------------
# Linear probing (frozen encoder) and fine-tuning
# ---------------------------------------------------------------------------

def _features_in_batches(patches: np.ndarray, cfg: ModelConfig,
                         params: Dict[str, Tensor], batch: int = 64) -> np.ndarray:
    feats = [cls_features_batch(patches[lo:lo + batch], cfg, params)
             for lo in range(0, patches.shape[0], batch)]
    return np.concatenate(feats, axis=0)


def linear_probe(checkpoint: Checkpoint, train_manifest: DatasetManifest,
                 test_manifest: DatasetManifest, train_cfg: TrainConfig
                 ) -> EvalReport:
    """Train only a zero-initialized affine head on frozen CLS features."""
    cfg = checkpoint.config
    train_feats = _features_in_batches(
        prepare_patches(load_plots(train_manifest), cfg), cfg, checkpoint.params)
    test_feats = _features_in_batches(
        prepare_patches(load_plots(test_manifest), cfg), cfg, checkpoint.params)
    train_labels = train_manifest.labels
    test_labels = test_manifest.labels

    head = make_classifier_head(cfg)
    optimizer = AdamW(head, betas=train_cfg.betas,
                      weight_decay=train_cfg.weight_decay)
    n = train_feats.shape[0]
    curve: List[float] = []
    for epoch in range(train_cfg.epochs):
        lr = lr_at(epoch, train_cfg.schedule)
        order = _epoch_order(train_cfg.seed, epoch, n)
        total = 0.0
        for lo in range(0, n, train_cfg.batch_size):
            idx = order[lo:lo + train_cfg.batch_size]
            loss = cross_entropy(head_logits(train_feats[idx], head),
                                 train_labels[idx])
            backward(loss)
            optimizer.step(lr)
            optimizer.zero_grad()
            reset_tape()
            total += float(loss.data) * len(idx)
        curve.append(total / n)
    with no_grad():
        preds = np.argmax(head_logits(test_feats, head).data, axis=1)
    reset_tape()
    return _report(preds, test_labels, cfg.num_classes, curve)


def _predict_pooled(patches: np.ndarray, cfg: ModelConfig,
                    params: Dict[str, Tensor], head: Dict[str, Tensor],
                    batch: int = 64) -> np.ndarray:
    preds = []
    with no_grad():
        for lo in range(0, patches.shape[0], batch):
            logits = pooled_logits_batch(patches[lo:lo + batch], cfg, params, head)
            preds.append(np.argmax(logits.data, axis=1))
    reset_tape()
    return np.concatenate(preds)


def finetune(checkpoint: Checkpoint, train_manifest: DatasetManifest,
             test_manifest: DatasetManifest, train_cfg: TrainConfig
             ) -> EvalReport:
    """Train encoder plus head on mean-pooled tokens.

    ``train_cfg.labeled_subset`` restricts the labeled training set to a
    stratified per-class sample. The checkpoint itself is not mutated.
    """
    cfg = checkpoint.config
    if train_cfg.labeled_subset is not None:
        train_manifest = few_shot_subset(train_manifest, train_cfg.labeled_subset,
                                         train_cfg.seed)
    train_patches = prepare_patches(load_plots(train_manifest), cfg)
    test_patches = prepare_patches(load_plots(test_manifest), cfg)
    train_labels = train_manifest.labels
    test_labels = test_manifest.labels

    params = {k: Tensor(v.data.copy(), requires_grad=True)
              for k, v in checkpoint.params.items()
              if k.startswith("enc.")}
    head = make_classifier_head(cfg)
    trainable = {**params, **head}
    optimizer = AdamW(trainable, betas=train_cfg.betas,
                      weight_decay=train_cfg.weight_decay)

    n = train_patches.shape[0]
    curve: List[float] = []
    for epoch in range(train_cfg.epochs):
        lr = lr_at(epoch, train_cfg.schedule)
        order = _epoch_order(train_cfg.seed, epoch, n)
        total = 0.0
        for lo in range(0, n, train_cfg.batch_size):
            idx = order[lo:lo + train_cfg.batch_size]
            logits = pooled_logits_batch(train_patches[idx], cfg, params, head)
            loss = cross_entropy(logits, train_labels[idx])
            backward(loss)
            optimizer.step(lr)
            optimizer.zero_grad()
            reset_tape()
            total += float(loss.data) * len(idx)
        curve.append(total / n)
        logger.info("finetune epoch %d/%d loss %.4f", epoch + 1, train_cfg.epochs,
                    curve[-1])
    preds = _predict_pooled(test_patches, cfg, params, head)
    return _report(preds, test_labels, cfg.num_classes, curve)


# ---------------------------------------------------------------------------
# Single-point (C = 1) baseline
# ---------------------------------------------------------------------------

def _max_energy_channel(plot: WaterfallPlot) -> int:
    return int(np.argmax(np.sum(plot.data.astype(np.float64) ** 2, axis=1)))


def split_sequences(plots: List[WaterfallPlot]) -> List[WaterfallPlot]:
    """Every channel of every plot as an unlabeled 1 x S sequence."""
    out = []
    for plot in plots:
        for c in range(plot.channels):
            out.append(WaterfallPlot(data=plot.data[c:c + 1], sample_rate=plot.sample_rate,
                                     label=None, source_id=f"{plot.source_id}:ch{c}"))
    return out


def max_energy_sequences(plots: List[WaterfallPlot]) -> List[WaterfallPlot]:
    """One labeled 1 x S sequence per plot: its maximum-energy channel."""
    out = []
    for plot in plots:
        c = _max_energy_channel(plot)
        out.append(WaterfallPlot(data=plot.data[c:c + 1], sample_rate=plot.sample_rate,
                                 label=plot.label, source_id=f"{plot.source_id}:ch{c}"))
    return out


def single_point_experiment(train_manifest: DatasetManifest,
                            test_manifest: DatasetManifest,
                            model_cfg: ModelConfig,
                            pretrain_cfg: TrainConfig,
                            finetune_cfg: TrainConfig,
                            distributed_checkpoint: Optional[Checkpoint] = None
                            ) -> Tuple[EvalReport, EvalReport]:
    """Paired evaluation: C = 1 max-energy baseline vs the distributed model.

    The baseline pre-trains an architecturally identical model on every
    temporal sequence of the training plots and fine-tunes on the
    maximum-energy sequence per plot. The distributed side fine-tunes
    ``distributed_checkpoint`` (pre-trained here when not supplied) on the
    full plots. Hyperparameters and seeds are shared.
    """
    train_plots = load_plots(train_manifest)
    test_plots = load_plots(test_manifest)
    cols = train_plots[0].samples // model_cfg.patch_samples
    sp_cfg = replace(model_cfg, patch_channels=1, max_patches=cols)

    sp_pre = split_sequences(train_plots)
    logger.info("single-point pre-training on %d sequences", len(sp_pre))
    sp_ckpt, _ = _pretrain_plots(sp_pre, sp_cfg, pretrain_cfg)

    sp_train = max_energy_sequences(train_plots)
    sp_test = max_energy_sequences(test_plots)
    sp_report = _finetune_plots(sp_ckpt, sp_train, sp_test,
                                list(train_manifest.class_names), finetune_cfg)

    if distributed_checkpoint is None:
        distributed_checkpoint, _ = pretrain(train_manifest, model_cfg, pretrain_cfg)
    dist_report = finetune(distributed_checkpoint, train_manifest, test_manifest,
                           finetune_cfg)
    return sp_report, dist_report


def _pretrain_plots(plots: List[WaterfallPlot], model_cfg: ModelConfig,
                    train_cfg: TrainConfig) -> Tuple[Checkpoint, List[float]]:
    """Pre-training loop over in-memory plots (no manifest)."""
    patches = prepare_patches(plots, model_cfg)
    grid = _grid_for(plots, model_cfg)
    n = patches.shape[0]
    params = init_params(model_cfg, seed=train_cfg.seed)
    optimizer = AdamW(params, betas=train_cfg.betas,
                      weight_decay=train_cfg.weight_decay)
    curve: List[float] = []
    for epoch in range(train_cfg.epochs):
        lr = lr_at(epoch, train_cfg.schedule)
        order = _epoch_order(train_cfg.seed, epoch, n)
        total = 0.0
        for lo in range(0, n, train_cfg.batch_size):
            idx = order[lo:lo + train_cfg.batch_size]
            plans = [sample_mask(grid, train_cfg.mask_ratio, train_cfg.mask_strategy,
                                 _mask_seed(train_cfg.seed, epoch, int(i)))
                     for i in idx]
            _, loss = forward_mae_batch(patches[idx], plans, model_cfg, params)
            backward(loss)
            optimizer.step(lr)
            optimizer.zero_grad()
            reset_tape()
            total += float(loss.data) * len(idx)
        curve.append(total / n)
        logger.info("pretrain epoch %d/%d loss %.4f", epoch + 1, train_cfg.epochs,
                    curve[-1])
    return Checkpoint(config=model_cfg, params=params, epoch=train_cfg.epochs), curve


def _finetune_plots(checkpoint: Checkpoint, train_plots: List[WaterfallPlot],
                    test_plots: List[WaterfallPlot], class_names: List[str],
                    train_cfg: TrainConfig) -> EvalReport:
    """Fine-tuning loop over in-memory labeled plots."""
    cfg = checkpoint.config
    train_patches = prepare_patches(train_plots, cfg)
    test_patches = prepare_patches(test_plots, cfg)
    train_labels = np.array([p.label for p in train_plots], dtype=np.int64)
    test_labels = np.array([p.label for p in test_plots], dtype=np.int64)

    params = {k: Tensor(v.data.copy(), requires_grad=True)
              for k, v in checkpoint.params.items() if k.startswith("enc.")}
    head = make_classifier_head(cfg)
    optimizer = AdamW({**params, **head}, betas=train_cfg.betas,
                      weight_decay=train_cfg.weight_decay)
    n = train_patches.shape[0]
    curve: List[float] = []
    for epoch in range(train_cfg.epochs):
        lr = lr_at(epoch, train_cfg.schedule)
        order = _epoch_order(train_cfg.seed, epoch, n)
        total = 0.0
        for lo in range(0, n, train_cfg.batch_size):
            idx = order[lo:lo + train_cfg.batch_size]
            logits = pooled_logits_batch(train_patches[idx], cfg, params, head)
            loss = cross_entropy(logits, train_labels[idx])
            backward(loss)
            optimizer.step(lr)
            optimizer.zero_grad()
            reset_tape()
            total += float(loss.data) * len(idx)
        curve.append(total / n)
    preds = _predict_pooled(test_patches, cfg, params, head)
    return _report(preds, test_labels, cfg.num_classes, curve)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

ABLATION_AXES = ("patch_shape", "mask_ratio", "mask_strategy", "decoder_shape")


def run_ablation(axis: str, values, model_cfg: ModelConfig,
                 pretrain_cfg: TrainConfig, probe_cfg: TrainConfig,
                 finetune_cfg: TrainConfig, train_manifest: DatasetManifest,
                 test_manifest: DatasetManifest) -> List[dict]:
    """Pre-train one model per axis value (shared seeds/schedules), then
    probe and fine-tune each; returns one row dict per value."""
    if axis not in ABLATION_AXES:
        raise ContractError(f"unknown ablation axis {axis!r}")
    first = load_waterfall(train_manifest.plot_path(0))
    rows = []
    for value in values:
        cfg, pre_cfg = _ablation_configs(axis, value, model_cfg, pretrain_cfg,
                                         first.channels, first.samples)
        logger.info("ablation %s=%r", axis, value)
        ckpt, curve = pretrain(train_manifest, cfg, pre_cfg)
        probe_report = linear_probe(ckpt, train_manifest, test_manifest, probe_cfg)
        ft_report = finetune(ckpt, train_manifest, test_manifest, finetune_cfg)
        rows.append({
            "axis": axis,
            "value": _format_value(value),
            "pretrain_loss": curve[-1],
            "probe_error_rate": probe_report.error_rate,
            "finetune_error_rate": ft_report.error_rate,
        })
    return rows


def _ablation_configs(axis: str, value, model_cfg: ModelConfig,
                      pretrain_cfg: TrainConfig, channels: int,
                      samples: int) -> Tuple[ModelConfig, TrainConfig]:
    if axis == "patch_shape":
        pc, ps = int(value[0]), int(value[1])
        if pc * ps != model_cfg.patch_width:
            raise ContractError(
                f"patch shape {pc}x{ps} changes the patch volume "
                f"({pc * ps} != {model_cfg.patch_width})")
        n = (channels // pc) * (samples // ps)
        return (replace(model_cfg, patch_channels=pc, patch_samples=ps,
                        max_patches=n), pretrain_cfg)
    if axis == "mask_ratio":
        ratio = float(value)
        if not 0.0 < ratio < 1.0:
            raise ContractError(f"mask ratio must lie in (0, 1), got {ratio}")
        return (replace(model_cfg, mask_ratio=ratio),
                replace(pretrain_cfg, mask_ratio=ratio))
    if axis == "mask_strategy":
        if value not in ("random", "temporal", "spatial"):
            raise ContractError(f"unknown mask strategy {value!r}")
        return model_cfg, replace(pretrain_cfg, mask_strategy=value)
    depth, width = int(value[0]), int(value[1])
    return replace(model_cfg, dec_depth=depth, dec_dim=width), pretrain_cfg


def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return "x".join(str(v) for v in value)
    return str(value)


# ---------------------------------------------------------------------------
# CSV artifacts
# ---------------------------------------------------------------------------

def write_metrics_csv(path, rows: List[dict]) -> None:
    """Rows with run_id/phase/epoch/split/loss/error_rate columns."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in METRICS_COLUMNS})


def write_ablation_csv(path, rows: List[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in ABLATION_COLUMNS})


def metrics_rows(run_id: str, phase: str, loss_curve: List[float],
                 test_error: Optional[float] = None) -> List[dict]:
    rows = [{"run_id": run_id, "phase": phase, "epoch": e, "split": "train",
             "loss": loss} for e, loss in enumerate(loss_curve)]
    if test_error is not None:
        rows.append({"run_id": run_id, "phase": phase,
                     "epoch": max(len(loss_curve) - 1, 0), "split": "test",
                     "error_rate": test_error})
    return rows
