"""Command-line surface: dataset generation, training, evaluation,
ablations, analysis, and the single-point comparison.

Configuration comes from defaults, overridden by a JSON config file,
overridden by flags. The effective configuration is echoed to
``<out>/config.json``; artifacts are staged under ``<out>/partial/`` and
promoted on success, so failed runs leave their partial outputs there.
Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from .analysis import Embedding2D, cluster_quality, tsne
from .data import (DatasetManifest, SyntheticConfig, build_dataset,
                   load_manifest)
from .errors import DasMaeError
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .optim import ScheduleConfig
from .training import (ABLATION_AXES, TrainConfig, few_shot_subset, finetune,
                       linear_probe, load_plots, metrics_rows, prepare_patches,
                       pretrain, relative_improvement, run_ablation,
                       single_point_experiment, write_ablation_csv,
                       write_metrics_csv)
from .model import cls_features_batch
from .tensor import no_grad, reset_tape

logger = logging.getLogger(__name__)

COMMANDS = ("gen-data", "pretrain", "probe", "finetune", "ablate", "analyze",
            "compare-single-point")


class ValidationFailure(DasMaeError):
    """Aggregated configuration problems (one per line)."""

    def __init__(self, problems: List[str]):
        super().__init__("\n".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class Option:
    name: str                      # config key (snake_case)
    type: Callable
    default: object
    help: str
    check: Optional[Callable] = None   # value -> error string or None
    required: bool = False

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


def _positive(name):
    return lambda v: None if v > 0 else f"{name} must be positive, got {v}"


def _nonneg(name):
    return lambda v: None if v >= 0 else f"{name} must be non-negative, got {v}"


def _ratio_check(v):
    return None if 0.0 < v < 1.0 else f"mask_ratio must lie in (0, 1), got {v}"


def _choice(name, values):
    return lambda v: None if v in values else (
        f"{name} must be one of {', '.join(values)}; got {v!r}")


_MODEL_OPTIONS = [
    Option("model", str, "tiny", "model size preset", _choice("model", ("tiny", "paper"))),
    Option("mask_ratio", float, 0.5, "fraction of patches masked", _ratio_check),
]

_PRETRAIN_OPTIONS = _MODEL_OPTIONS + [
    Option("data", str, None, "dataset directory (from gen-data)", required=True),
    Option("epochs", int, 30, "pre-training epochs", _positive("epochs")),
    Option("batch_size", int, 16, "plots per step", _positive("batch_size")),
    Option("base_lr", float, 2e-3, "peak learning rate", _positive("base_lr")),
    Option("warmup_epochs", int, 3, "linear warmup epochs", _nonneg("warmup_epochs")),
    Option("min_lr", float, 0.0, "cosine floor", _nonneg("min_lr")),
    Option("weight_decay", float, 0.05, "decoupled decay", _nonneg("weight_decay")),
    Option("mask_strategy", str, "random", "random | temporal | spatial",
           _choice("mask_strategy", ("random", "temporal", "spatial"))),
    Option("seed", int, 0, "training seed"),
]

_HEAD_TRAIN_OPTIONS = [
    Option("checkpoint", str, None, "pre-trained checkpoint path", required=True),
    Option("data", str, None, "dataset directory", required=True),
    Option("seed", int, 0, "training seed"),
]

SCHEMAS = {
    "gen-data": [
        Option("classes", int, 6, "number of event classes",
               lambda v: None if 1 <= v <= 6 else f"classes must lie in [1, 6], got {v}"),
        Option("per_class", int, 100, "plots per class", _positive("per_class")),
        Option("channels", int, 12, "spatial channels", _positive("channels")),
        Option("samples", int, 10000, "temporal samples", _positive("samples")),
        Option("sample_rate", float, 1000.0, "Hz", _positive("sample_rate")),
        Option("rho", float, 2.0, "spatial coherence radius (channels)",
               lambda v: None if v >= 1 else f"rho must be >= 1, got {v}"),
        Option("drift", float, 3.0, "channels per 10^4 samples"),
        Option("noise", float, 1.0, "noise floor sigma", _positive("noise")),
        Option("seed", int, 0, "dataset seed"),
    ],
    "pretrain": _PRETRAIN_OPTIONS,
    "probe": _HEAD_TRAIN_OPTIONS + [
        Option("epochs", int, 100, "head-training epochs", _positive("epochs")),
        Option("batch_size", int, 64, "features per step", _positive("batch_size")),
        Option("base_lr", float, 1e-2, "peak learning rate", _positive("base_lr")),
        Option("warmup_epochs", int, 0, "linear warmup epochs", _nonneg("warmup_epochs")),
        Option("weight_decay", float, 0.0, "decoupled decay", _nonneg("weight_decay")),
    ],
    "finetune": _HEAD_TRAIN_OPTIONS + [
        Option("epochs", int, 40, "fine-tuning epochs", _positive("epochs")),
        Option("batch_size", int, 16, "plots per step", _positive("batch_size")),
        Option("base_lr", float, 5e-4, "peak learning rate", _positive("base_lr")),
        Option("warmup_epochs", int, 4, "linear warmup epochs", _nonneg("warmup_epochs")),
        Option("weight_decay", float, 0.05, "decoupled decay", _nonneg("weight_decay")),
        Option("labeled_per_class", int, 0, "labels per class (0 = all)",
               _nonneg("labeled_per_class")),
    ],
    "ablate": _PRETRAIN_OPTIONS + [
        Option("axis", str, None, "patch_shape | mask_ratio | mask_strategy | decoder_shape",
               _choice("axis", ABLATION_AXES), required=True),
        Option("values", str, None, "comma-separated axis values "
               "(e.g. 1x624,4x156 or 0.3,0.5,0.8)", required=True),
    ],
    "analyze": _HEAD_TRAIN_OPTIONS + [
        Option("source", str, "cls", "representation to embed",
               _choice("source", ("cls", "mean"))),
        Option("max_points", int, 600, "stratified subsample size", _positive("max_points")),
        Option("perplexity", float, 40.0, "t-SNE perplexity", _positive("perplexity")),
        Option("tsne_lr", float, 2000.0, "t-SNE learning rate", _positive("tsne_lr")),
        Option("iterations", int, 500, "t-SNE iterations", _positive("iterations")),
    ],
    "compare-single-point": _PRETRAIN_OPTIONS + [
        Option("finetune_epochs", int, 40, "fine-tuning epochs", _positive("finetune_epochs")),
        Option("finetune_lr", float, 5e-4, "fine-tuning peak lr", _positive("finetune_lr")),
    ],
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def parse_config(command: str, config_file: Optional[str],
                 flag_values: dict) -> dict:
    """Merge defaults <- config file <- flags, validating everything.

    Raises ValidationFailure listing every problem at once.
    """
    schema = {opt.name: opt for opt in SCHEMAS[command]}
    problems: List[str] = []
    effective = {name: opt.default for name, opt in schema.items()}

    if config_file is not None:
        try:
            doc = json.loads(Path(config_file).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValidationFailure([f"config file not found: {config_file}"])
        except json.JSONDecodeError as exc:
            raise ValidationFailure([f"config file is not valid JSON: {exc}"])
        if not isinstance(doc, dict):
            raise ValidationFailure(["config file must hold a JSON object"])
        for key, value in doc.items():
            if key not in schema:
                problems.append(f"unknown config key {key!r}")
                continue
            try:
                effective[key] = schema[key].type(value)
            except (TypeError, ValueError):
                problems.append(f"config key {key!r}: cannot convert {value!r} "
                                f"to {schema[key].type.__name__}")

    for key, value in flag_values.items():
        if value is not None and key in schema:
            effective[key] = value

    for name, opt in schema.items():
        value = effective[name]
        if value is None:
            if opt.required:
                problems.append(f"missing required option {opt.flag}")
            continue
        if opt.check is not None:
            msg = opt.check(value)
            if msg:
                problems.append(msg)
    if problems:
        raise ValidationFailure(problems)
    return effective


def _model_config(cfg: dict, data_dir: Optional[str] = None) -> ModelConfig:
    preset = ModelConfig.tiny if cfg.get("model", "tiny") == "tiny" else ModelConfig.paper_scale
    model = preset(mask_ratio=cfg.get("mask_ratio", 0.5))
    if data_dir is not None:
        # patch-grid size follows the dataset geometry
        from .data import load_waterfall
        manifest = _load_split(data_dir, "train")
        first = load_waterfall(manifest.plot_path(0))
        n = ((first.channels // model.patch_channels)
             * (first.samples // model.patch_samples))
        if n != model.max_patches:
            from dataclasses import replace
            model = replace(model, max_patches=n)
    return model


def _train_config(cfg: dict, **extra) -> TrainConfig:
    return TrainConfig(
        schedule=ScheduleConfig(cfg["base_lr"], cfg["warmup_epochs"],
                                cfg["epochs"], cfg.get("min_lr", 0.0)),
        batch_size=cfg["batch_size"],
        weight_decay=cfg["weight_decay"],
        seed=cfg["seed"],
        **extra,
    )


def _load_split(data_dir: str, split: str) -> DatasetManifest:
    return load_manifest(Path(data_dir) / f"{split}_manifest.json")


# ---------------------------------------------------------------------------
# Command bodies (write artifacts into the staging directory)
# ---------------------------------------------------------------------------

def _run_gen_data(cfg: dict, run_id: str, stage: Path) -> None:
    synth = SyntheticConfig(
        classes=cfg["classes"], plots_per_class=cfg["per_class"],
        channels=cfg["channels"], samples=cfg["samples"],
        sample_rate=cfg["sample_rate"], coherence_radius=cfg["rho"],
        drift_rate=cfg["drift"], noise_floor=cfg["noise"], seed=cfg["seed"])
    train, test = build_dataset(synth, stage)
    logger.info("wrote %d train / %d test plots", len(train), len(test))


def _run_pretrain(cfg: dict, run_id: str, stage: Path) -> None:
    model_cfg = _model_config(cfg, cfg["data"])
    train_cfg = _train_config(cfg, mask_strategy=cfg["mask_strategy"],
                              mask_ratio=cfg["mask_ratio"])
    manifest = _load_split(cfg["data"], "train")
    checkpoint, curve = pretrain(manifest, model_cfg, train_cfg)
    save_checkpoint(stage / "checkpoint.ckpt", checkpoint.config,
                    checkpoint.params, epoch=checkpoint.epoch,
                    rng_state=checkpoint.rng_state)
    write_metrics_csv(stage / "metrics.csv", metrics_rows(run_id, "pretrain", curve))


def _write_report(stage: Path, report, extra: Optional[dict] = None) -> None:
    doc = {
        "error_rate": report.error_rate,
        "confusion": report.confusion.tolist(),
        "per_class_counts": report.per_class_counts.tolist(),
    }
    if extra:
        doc.update(extra)
    (stage / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True),
                                       encoding="utf-8")


def _run_probe(cfg: dict, run_id: str, stage: Path) -> None:
    checkpoint = load_checkpoint(cfg["checkpoint"])
    report = linear_probe(checkpoint, _load_split(cfg["data"], "train"),
                          _load_split(cfg["data"], "test"), _train_config(cfg))
    write_metrics_csv(stage / "metrics.csv",
                      metrics_rows(run_id, "probe", report.loss_curve,
                                   report.error_rate))
    _write_report(stage, report)
    logger.info("probe test error %.4f", report.error_rate)


def _run_finetune(cfg: dict, run_id: str, stage: Path) -> None:
    checkpoint = load_checkpoint(cfg["checkpoint"])
    subset = cfg["labeled_per_class"] or None
    report = finetune(checkpoint, _load_split(cfg["data"], "train"),
                      _load_split(cfg["data"], "test"),
                      _train_config(cfg, labeled_subset=subset))
    write_metrics_csv(stage / "metrics.csv",
                      metrics_rows(run_id, "finetune", report.loss_curve,
                                   report.error_rate))
    _write_report(stage, report)
    logger.info("finetune test error %.4f", report.error_rate)


def _parse_axis_values(axis: str, text: str):
    values = []
    for part in text.split(","):
        part = part.strip()
        if axis in ("patch_shape", "decoder_shape"):
            a, _, b = part.partition("x")
            values.append((int(a), int(b)))
        elif axis == "mask_ratio":
            values.append(float(part))
        else:
            values.append(part)
    return values


def _run_ablate(cfg: dict, run_id: str, stage: Path) -> None:
    from .training import finetune_defaults, probe_defaults
    model_cfg = _model_config(cfg, cfg["data"])
    pre_cfg = _train_config(cfg, mask_strategy=cfg["mask_strategy"],
                            mask_ratio=cfg["mask_ratio"])
    values = _parse_axis_values(cfg["axis"], cfg["values"])
    rows = run_ablation(cfg["axis"], values, model_cfg, pre_cfg,
                        probe_defaults(seed=cfg["seed"]),
                        finetune_defaults(seed=cfg["seed"]),
                        _load_split(cfg["data"], "train"),
                        _load_split(cfg["data"], "test"))
    write_ablation_csv(stage / "ablation.csv", rows)


def _stratified_subsample(labels: np.ndarray, max_points: int, seed: int) -> np.ndarray:
    n = labels.shape[0]
    if n <= max_points:
        return np.arange(n)
    classes = np.unique(labels)
    per = max(1, max_points // classes.size)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 31)))
    keep = []
    for k in classes:
        idx = np.flatnonzero(labels == k)
        keep.extend(rng.choice(idx, size=min(per, idx.size), replace=False).tolist())
    return np.sort(np.array(keep, dtype=np.int64))


def _run_analyze(cfg: dict, run_id: str, stage: Path) -> None:
    checkpoint = load_checkpoint(cfg["checkpoint"])
    manifest = _load_split(cfg["data"], "train")
    labels = manifest.labels
    keep = _stratified_subsample(labels, cfg["max_points"], cfg["seed"])
    plots = [p for i, p in enumerate(load_plots(manifest)) if i in set(keep.tolist())]
    labels = labels[keep]
    patches = prepare_patches(plots, checkpoint.config)

    if cfg["source"] == "cls":
        reps = _batched_cls(patches, checkpoint)
    else:
        reps = _batched_mean_tokens(patches, checkpoint)
    points, kl_trace = tsne(reps, perplexity=cfg["perplexity"], lr=cfg["tsne_lr"],
                            iters=cfg["iterations"], seed=cfg["seed"])
    embedding = Embedding2D(points=points, method="tsne", source_kind=cfg["source"])
    _write_embedding_csv(stage / "embedding.csv", embedding, labels)
    with open(stage / "kl_trace.csv", "w", encoding="utf-8") as fh:
        fh.write("iteration,kl\n")
        for i, kl in enumerate(kl_trace):
            fh.write(f"{i},{kl}\n")
    (stage / "scatter.svg").write_text(
        render_scatter_svg(embedding.points, labels, list(manifest.class_names)),
        encoding="utf-8")
    quality = cluster_quality(reps, labels)
    (stage / "report.json").write_text(
        json.dumps({"cluster_quality_knn": quality, "source": cfg["source"],
                    "points": int(labels.shape[0])}, indent=1, sort_keys=True),
        encoding="utf-8")
    logger.info("cluster quality (10-NN accuracy) %.4f", quality)


def _batched_cls(patches: np.ndarray, checkpoint) -> np.ndarray:
    out = [cls_features_batch(patches[lo:lo + 64], checkpoint.config, checkpoint.params)
           for lo in range(0, patches.shape[0], 64)]
    return np.concatenate(out)


def _batched_mean_tokens(patches: np.ndarray, checkpoint) -> np.ndarray:
    from .model import encode_patch_batch
    cfg = checkpoint.config
    chunks = []
    with no_grad():
        for lo in range(0, patches.shape[0], 64):
            block = patches[lo:lo + 64]
            positions = np.broadcast_to(
                np.arange(cfg.max_patches, dtype=np.int64),
                (block.shape[0], cfg.max_patches))
            enc = encode_patch_batch(block, positions, cfg, checkpoint.params)
            chunks.append(enc.data[:, 1:, :].mean(axis=1))
    reset_tape()
    return np.concatenate(chunks)


def _run_compare_single_point(cfg: dict, run_id: str, stage: Path) -> None:
    model_cfg = _model_config(cfg, cfg["data"])
    pre_cfg = _train_config(cfg, mask_strategy=cfg["mask_strategy"],
                            mask_ratio=cfg["mask_ratio"])
    ft_cfg = TrainConfig(
        schedule=ScheduleConfig(cfg["finetune_lr"], 4, cfg["finetune_epochs"]),
        batch_size=cfg["batch_size"], weight_decay=0.05, seed=cfg["seed"])
    sp_report, dist_report = single_point_experiment(
        _load_split(cfg["data"], "train"), _load_split(cfg["data"], "test"),
        model_cfg, pre_cfg, ft_cfg)
    doc = {
        "single_point_error_rate": sp_report.error_rate,
        "distributed_error_rate": dist_report.error_rate,
        "error_gap_points": (sp_report.error_rate - dist_report.error_rate) * 100.0,
        "single_point_confusion": sp_report.confusion.tolist(),
        "distributed_confusion": dist_report.confusion.tolist(),
    }
    if dist_report.error_rate > 0:
        doc["relative_improvement_percent"] = relative_improvement(
            sp_report.error_rate, dist_report.error_rate)
    (stage / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True),
                                       encoding="utf-8")
    logger.info("single-point %.4f vs distributed %.4f",
                sp_report.error_rate, dist_report.error_rate)


# ---------------------------------------------------------------------------
# Artifact helpers
# ---------------------------------------------------------------------------

def _write_embedding_csv(path: Path, embedding: Embedding2D,
                         labels: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("point_id,x,y,label,source_kind\n")
        for i, ((px, py), label) in enumerate(zip(embedding.points, labels)):
            fh.write(f"{i},{px},{py},{int(label)},{embedding.source_kind}\n")


_PALETTE = ("#4269d0", "#efb118", "#ff725c", "#6cc5b0", "#3ca951", "#ff8ab7",
            "#a463f2", "#97bbf5")


def render_scatter_svg(points: np.ndarray, labels: np.ndarray,
                       class_names: List[str], size: int = 640) -> str:
    """Minimal hand-rolled scatter: axis box, per-class colors, legend."""
    points = np.asarray(points, dtype=np.float64)
    margin, legend_w = 40, 150
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    inner = size - 2 * margin

    def sx(v):
        return margin + (v - lo[0]) / span[0] * inner

    def sy(v):
        return size - margin - (v - lo[1]) / span[1] * inner

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + legend_w}" '
        f'height="{size}" viewBox="0 0 {size + legend_w} {size}">',
        f'<rect x="{margin}" y="{margin}" width="{inner}" height="{inner}" '
        f'fill="none" stroke="#444" stroke-width="1"/>',
    ]
    for (px, py), label in zip(points, labels):
        color = _PALETTE[int(label) % len(_PALETTE)]
        parts.append(f'<circle cx="{sx(px):.2f}" cy="{sy(py):.2f}" r="3" '
                     f'fill="{color}" fill-opacity="0.75"/>')
    for k, name in enumerate(class_names):
        y = margin + 18 * k
        color = _PALETTE[k % len(_PALETTE)]
        parts.append(f'<circle cx="{size + 12}" cy="{y}" r="5" fill="{color}"/>')
        parts.append(f'<text x="{size + 24}" y="{y + 4}" font-family="sans-serif" '
                     f'font-size="12">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_RUNNERS = {
    "gen-data": _run_gen_data,
    "pretrain": _run_pretrain,
    "probe": _run_probe,
    "finetune": _run_finetune,
    "ablate": _run_ablate,
    "analyze": _run_analyze,
    "compare-single-point": _run_compare_single_point,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dasmae",
        description="Masked-autoencoder pre-training for DAS waterfall plots")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in SCHEMAS.items():
        p = sub.add_parser(command)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--run-id", dest="run_id", default=None)
        for opt in options:
            p.add_argument(opt.flag, dest=opt.name, type=opt.type, default=None,
                           help=opt.help)
    return parser


def dispatch(command: str, cfg: dict, out_dir: str, run_id: str) -> int:
    """Run one validated command; stage artifacts, promote on success."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = dict(cfg)
    echo["command"] = command
    echo["run_id"] = run_id
    (out / "config.json").write_text(json.dumps(echo, indent=1, sort_keys=True),
                                     encoding="utf-8")
    stage = out / "partial"
    if stage.exists():
        shutil.rmtree(stage)
    stage.mkdir()
    try:
        _RUNNERS[command](cfg, run_id, stage)
    except Exception:
        traceback.print_exc()
        logger.error("run failed; partial outputs left under %s", stage)
        return 2
    for child in sorted(stage.iterdir()):
        target = out / child.name
        if target.exists():
            if target.is_dir():
                shutil.rmtree(target)
            else:
                target.unlink()
        child.rename(target)
    stage.rmdir()
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    flags = {opt.name: getattr(args, opt.name) for opt in SCHEMAS[args.command]}
    try:
        cfg = parse_config(args.command, args.config, flags)
    except ValidationFailure as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 1
    run_id = args.run_id or f"{args.command}-{cfg.get('seed', 0)}"
    return dispatch(args.command, cfg, args.out, run_id)


if __name__ == "__main__":
    sys.exit(main())
