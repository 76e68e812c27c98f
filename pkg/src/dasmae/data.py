"""Waterfall-plot data model, bit-exact file I/O, and the synthetic generator.

The generator follows a hierarchical scheme: a class index selects a
waveform template (with per-instance parameter jitter), a motion state
places the source on a start channel with an optional constant drift, and
each channel receives the template attenuated by ``exp(-d^2/rho^2)`` and
delayed proportionally to its distance ``d`` from the moving center, plus
white noise. Adjacent channels therefore share waveforms while distant
channels decorrelate, and the energy centroid drifts at the configured
rate.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractError, DegenerateInputError, FormatError, InputError
from .kernels import render_moving_source

CLASS_NAMES = ("background_noise", "digging", "knocking", "watering", "shaking", "walking")

_MAGIC = b"DASW"
_VERSION = 1
_HEADER = struct.Struct("<4sHIIfi")  # magic, version, channels, samples, rate, label
HEADER_SIZE = _HEADER.size  # 22 bytes

# Samples of delay per unit channel distance in generated plots.
_DELAY_PER_CHANNEL = 1.0
# Spatial footprint multiplier applied to coherence_radius, per class.
_FOOTPRINT = {"knocking": 0.8}


@dataclass
class WaterfallPlot:
    """A channels x samples strain matrix with sampling metadata."""

    data: np.ndarray
    sample_rate: float
    label: Optional[int] = None
    source_id: str = ""

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 2 or arr.size == 0:
            raise InputError(f"plot data must be a non-empty (C, S) matrix, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InputError("plot data contains non-finite values")
        self.data = np.ascontiguousarray(arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def samples(self) -> int:
        return self.data.shape[1]


@dataclass
class DatasetManifest:
    """Class names plus (relative path, label) entries for one split."""

    class_names: list
    split: str
    entries: list  # (path, label) tuples
    root: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self):
        n_classes = len(self.class_names)
        paths = [p for p, _ in self.entries]
        if len(set(paths)) != len(paths):
            raise ContractError("manifest paths must be unique")
        for p, label in self.entries:
            if not 0 <= label < n_classes:
                raise InputError(f"label {label} out of range for {n_classes} classes ({p})")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.entries], dtype=np.int64)

    def plot_path(self, i: int) -> Path:
        p = Path(self.entries[i][0])
        return p if self.root is None else self.root / p


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    doc = {
        "class_names": list(manifest.class_names),
        "split": manifest.split,
        "entries": [{"path": str(p), "label": int(label)} for p, label in manifest.entries],
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    return DatasetManifest(
        class_names=list(doc["class_names"]),
        split=doc["split"],
        entries=[(e["path"], int(e["label"])) for e in doc["entries"]],
        root=path.parent,
    )


# ---------------------------------------------------------------------------
# Waterfall file format (little-endian):
#   magic "DASW" | version u16 | channels u32 | samples u32 | rate f32 |
#   label i32 (-1 = unlabeled) | channels*samples float32, channel-major
# ---------------------------------------------------------------------------

def save_waterfall(plot: WaterfallPlot, path) -> None:
    path = Path(path)
    label = -1 if plot.label is None else int(plot.label)
    header = _HEADER.pack(_MAGIC, _VERSION, plot.channels, plot.samples,
                          plot.sample_rate, label)
    payload = np.ascontiguousarray(plot.data, dtype="<f4").tobytes()
    path.write_bytes(header + payload)


def load_waterfall(path) -> WaterfallPlot:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header, file ends at offset {len(raw)} "
                          f"(need {HEADER_SIZE})")
    magic, version, channels, samples, rate, label = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    expected = HEADER_SIZE + channels * samples * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: data section ends at offset {len(raw)}, "
                          f"expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", count=channels * samples,
                         offset=HEADER_SIZE).reshape(channels, samples)
    return WaterfallPlot(data=data.copy(), sample_rate=rate,
                         label=None if label < 0 else label,
                         source_id=path.stem)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    """Knobs for the hierarchical synthetic waterfall generator."""

    classes: int = 6
    plots_per_class: int = 100
    channels: int = 12
    samples: int = 10000
    sample_rate: float = 1000.0
    coherence_radius: float = 2.5   # channels
    drift_rate: float = 3.0         # channels per 10^4 samples
    noise_floor: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.classes <= len(CLASS_NAMES):
            raise ContractError(f"classes must lie in [1, {len(CLASS_NAMES)}], "
                                f"got {self.classes}")
        if self.coherence_radius < 1.0:
            raise ContractError(f"coherence_radius must be >= 1, got {self.coherence_radius}")
        if self.noise_floor <= 0:
            raise ContractError(f"noise_floor must be positive, got {self.noise_floor}")
        if self.channels < 1 or self.samples < 1:
            raise ContractError("channels and samples must be positive")

    @property
    def class_names(self) -> list:
        return list(CLASS_NAMES[:self.classes])


# Each class has one fixed base waveform; an instance is that waveform
# time-shifted by a single random offset (plus center, gain and noise
# randomness). Keeping the per-class family one-dimensional is what makes
# the reconstruction task solvable within desk-scale training budgets:
# with independently phased carrier and envelope the task defeats the
# tiny model outright.
# Carriers complete a whole number of cycles per 0.624 s patch window, so
# all patches of a plot share one waveform up to envelope and attenuation;
# that keeps the reconstruction family learnable at desk scale.
_PATCH_SECONDS = 0.624
_CARRIER_HZ = {
    "digging": 5 / _PATCH_SECONDS,    # ~8.01 Hz
    "knocking": 7 / _PATCH_SECONDS,   # ~11.22 Hz
    "shaking": 3 / _PATCH_SECONDS,    # ~4.81 Hz
    "walking": 5 / _PATCH_SECONDS,    # shares the digging band by design
}


def _periodic_bumps(u, period, width, offsets_amps):
    """Periodic Gaussian-bump envelope evaluated at shifted time u (s)."""
    env = np.zeros_like(u)
    phase = np.mod(u, period)
    for offset, amp in offsets_amps:
        # wrap-around so bumps near the period edge stay smooth
        for shift in (-period, 0.0, period):
            seg = (phase - offset + shift) / width
            env += amp * np.exp(-seg * seg)
    return env


def _base_digging(u):
    # periodic impact swells over a sustained rumble floor, one impact per
    # patch-aligned period
    env = 0.45 + 0.55 * _periodic_bumps(u, _PATCH_SECONDS, 0.10, [(0.0, 1.0)])
    wander = 1.0 + 0.2 * np.sin(2 * np.pi * 0.1 * u)
    return env * wander * np.sin(2 * np.pi * _CARRIER_HZ["digging"] * u)


def _base_knocking(u):
    # four knocks at fixed sparse offsets (patch-aligned spacing) within a
    # ~10 s cycle; the sharpest envelope in the family
    cycle = 16 * _PATCH_SECONDS
    offsets = [(1 * _PATCH_SECONDS, 1.0), (5 * _PATCH_SECONDS, 0.9),
               (9 * _PATCH_SECONDS, 1.0), (13 * _PATCH_SECONDS, 0.85)]
    env = 0.25 + 0.75 * _periodic_bumps(u, cycle, 0.2, offsets)
    return env * np.sin(2 * np.pi * _CARRIER_HZ["knocking"] * u)


def _base_shaking(u):
    env = 1.0 + 0.5 * np.sin(2 * np.pi * 0.4 * u)
    return env * np.sin(2 * np.pi * _CARRIER_HZ["shaking"] * u)


def _base_walking(u):
    # double-pulse gait swells; the source center drifts across channels
    env = 0.45 + 0.55 * _periodic_bumps(u, _PATCH_SECONDS, 0.07,
                                        [(0.0, 1.0), (0.1, 0.8)])
    return env * np.sin(2 * np.pi * _CARRIER_HZ["walking"] * u)


_WATERING_SEED = 7777


def _watering_partials():
    """Fixed broadband multi-tone complex (~3-21 Hz): harmonics of the
    patch window with pseudo-random but fixed amplitudes and phases."""
    rng = np.random.default_rng(np.random.SeedSequence(_WATERING_SEED))
    harmonics = np.arange(2, 14)
    freqs = harmonics / _PATCH_SECONDS
    amps = rng.uniform(0.4, 1.0, size=freqs.size) / np.sqrt(harmonics)
    phases = rng.uniform(0.0, 2 * np.pi, size=freqs.size)
    amps /= np.sqrt(0.5 * np.sum(amps ** 2))  # unit rms
    return freqs, amps, phases


_WATERING_PARTIALS = _watering_partials()


def _base_watering(u):
    freqs, amps, phases = _WATERING_PARTIALS
    wave = np.zeros_like(u)
    for f, a, ph in zip(freqs, amps, phases):
        wave += a * np.sin(2 * np.pi * f * u + ph)
    env = 1.0 + 0.5 * np.sin(2 * np.pi * 0.3 * u)
    return wave * env


def _template(name, rng, n, fs, sigma):
    """One labeled source waveform: fixed class shape, random time shift."""
    tau = rng.uniform(0.0, n / fs)
    gain = rng.uniform(0.9, 1.1)
    u = np.arange(n, dtype=np.float64) / fs - tau
    if name == "digging":
        return 16.0 * sigma * gain * _base_digging(u)
    if name == "knocking":
        return 16.0 * sigma * gain * _base_knocking(u)
    if name == "shaking":
        return 14.0 * sigma * gain * _base_shaking(u)
    if name == "walking":
        return 16.0 * sigma * gain * _base_walking(u)
    return 12.0 * sigma * gain * _base_watering(u)


def generate_synthetic(class_index: int, cfg: SyntheticConfig,
                       instance_seed: int) -> WaterfallPlot:
    """Generate one labeled plot; deterministic given (cfg, class, seed)."""
    if not 0 <= class_index < cfg.classes:
        raise ContractError(f"class index {class_index} outside [0, {cfg.classes})")
    rng = np.random.default_rng(np.random.SeedSequence(int(instance_seed)))
    name = CLASS_NAMES[class_index]
    n, fs, sigma = cfg.samples, cfg.sample_rate, cfg.noise_floor

    if name == "background_noise":
        data = rng.normal(0.0, sigma, size=(cfg.channels, n))
        return WaterfallPlot(data=data, sample_rate=fs, label=class_index,
                             source_id=f"{name}-{instance_seed}")

    template = _template(name, rng, n, fs, sigma)
    if cfg.channels >= 5:
        start = rng.uniform(1.5, cfg.channels - 2.5)
    else:
        start = rng.uniform(0.0, cfg.channels - 1.0)
    if name == "walking":
        direction = 1.0 if start < (cfg.channels - 1) / 2.0 else -1.0
        rate = cfg.drift_rate * direction
    else:
        rate = 0.0
    centers = start + rate * np.arange(n, dtype=np.float64) / 1e4
    rho = cfg.coherence_radius * _FOOTPRINT.get(name, 1.0)
    field = render_moving_source(template, centers, rho, _DELAY_PER_CHANNEL,
                                 cfg.channels)
    noise = rng.normal(0.0, sigma, size=(cfg.channels, n))
    return WaterfallPlot(data=field + noise, sample_rate=fs, label=class_index,
                         source_id=f"{name}-{instance_seed}")


def build_dataset(cfg: SyntheticConfig, out_dir) -> tuple:
    """Write plots plus train/test manifests (4:1 per class, seeded).

    Every fifth instance of each class goes to the test split. Returns
    ``(train_manifest, test_manifest)``.
    """
    out_dir = Path(out_dir)
    plots_dir = out_dir / "plots"
    plots_dir.mkdir(parents=True, exist_ok=True)
    train_entries, test_entries = [], []
    for k in range(cfg.classes):
        name = CLASS_NAMES[k]
        for i in range(cfg.plots_per_class):
            seed = int(np.random.SeedSequence((cfg.seed, k, i)).generate_state(1)[0])
            plot = generate_synthetic(k, cfg, seed)
            rel = f"plots/{name}_{i:04d}.dasw"
            save_waterfall(plot, out_dir / rel)
            (test_entries if i % 5 == 4 else train_entries).append((rel, k))
    train = DatasetManifest(cfg.class_names, "train", train_entries, root=out_dir)
    test = DatasetManifest(cfg.class_names, "test", test_entries, root=out_dir)
    save_manifest(train, out_dir / "train_manifest.json")
    save_manifest(test, out_dir / "test_manifest.json")
    return train, test


# ---------------------------------------------------------------------------
# Plot-level helpers
# ---------------------------------------------------------------------------

def standardize(plot: WaterfallPlot) -> WaterfallPlot:
    """Whole-plot zero mean, unit variance (preserves inter-channel ratios)."""
    std = float(plot.data.std(dtype=np.float64))
    if std < 1e-12:
        raise DegenerateInputError("plot has zero variance; cannot standardize")
    mean = float(plot.data.mean(dtype=np.float64))
    data = (plot.data.astype(np.float64) - mean) / std
    return WaterfallPlot(data=data, sample_rate=plot.sample_rate,
                         label=plot.label, source_id=plot.source_id)


def coherence_profile(plot: WaterfallPlot) -> np.ndarray:
    """Mean Pearson correlation between channel pairs at each offset d."""
    if plot.channels < 2:
        raise ContractError("coherence profile needs at least two channels")
    corr = np.corrcoef(plot.data.astype(np.float64))
    c = plot.channels
    return np.array([np.mean(np.diagonal(corr, offset=d)) for d in range(c)])
