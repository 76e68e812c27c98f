"""Patch-grid construction and mask sampling for waterfall plots.

The grid is channel-major: patch index ``i`` covers grid row ``i // cols``
(a block of channels) and grid column ``i % cols`` (a block of samples).
Remainder channels/samples that do not fill a whole patch are discarded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError, StrategyInapplicableError

MASK_STRATEGIES = ("random", "temporal", "spatial")


@dataclass(frozen=True)
class PatchGrid:
    """Geometry of the non-overlapping patch partition of one plot."""

    patch_channels: int
    patch_samples: int
    rows: int
    cols: int

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    @property
    def patch_width(self) -> int:
        return self.patch_channels * self.patch_samples

    def position(self, index: int) -> tuple[int, int]:
        return index // self.cols, index % self.cols


@dataclass(frozen=True)
class MaskPlan:
    """A partition of the patch grid into masked and visible index sets."""

    grid: PatchGrid
    masked: np.ndarray  # sorted unique indices
    strategy: str
    seed: int
    ratio: float
    visible: np.ndarray = field(init=False)

    def __post_init__(self):
        masked = np.asarray(self.masked, dtype=np.int64)
        if masked.size and (masked.min() < 0 or masked.max() >= self.grid.n_patches):
            raise ContractError("masked indices outside the patch grid")
        visible = np.setdiff1d(np.arange(self.grid.n_patches, dtype=np.int64), masked)
        object.__setattr__(self, "masked", masked)
        object.__setattr__(self, "visible", visible)

    @property
    def n_masked(self) -> int:
        return int(self.masked.size)

    @property
    def n_visible(self) -> int:
        return int(self.visible.size)


def patchify(data: np.ndarray, patch_channels: int, patch_samples: int):
    """Split a (C, S) matrix into flattened patches.

    Returns ``(patches, grid)`` where patches has shape
    ``(n_patches, patch_channels * patch_samples)`` in channel-major grid
    order, each patch flattened row-major.
    """
    data = np.asarray(data)
    if data.ndim != 2:
        raise ShapeError(f"expected a (C, S) matrix, got shape {data.shape}")
    if patch_channels <= 0 or patch_samples <= 0:
        raise ContractError(
            f"patch extents must be positive, got {patch_channels}x{patch_samples}")
    n_channels, n_samples = data.shape
    if patch_channels > n_channels or patch_samples > n_samples:
        raise ContractError(
            f"patch {patch_channels}x{patch_samples} exceeds plot {n_channels}x{n_samples}")
    rows = n_channels // patch_channels
    cols = n_samples // patch_samples
    grid = PatchGrid(patch_channels, patch_samples, rows, cols)
    kept = data[:rows * patch_channels, :cols * patch_samples]
    patches = (kept
               .reshape(rows, patch_channels, cols, patch_samples)
               .transpose(0, 2, 1, 3)
               .reshape(grid.n_patches, grid.patch_width))
    return np.ascontiguousarray(patches), grid


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Exact inverse of ``patchify`` on the kept region."""
    patches = np.asarray(patches)
    if patches.shape != (grid.n_patches, grid.patch_width):
        raise ContractError(
            f"expected {grid.n_patches} patches of width {grid.patch_width}, "
            f"got shape {patches.shape}")
    return np.ascontiguousarray(
        patches
        .reshape(grid.rows, grid.cols, grid.patch_channels, grid.patch_samples)
        .transpose(0, 2, 1, 3)
        .reshape(grid.rows * grid.patch_channels, grid.cols * grid.patch_samples))


def sample_mask(grid: PatchGrid, ratio: float, strategy: str, seed: int) -> MaskPlan:
    """Draw a mask plan.

    random   -- ``floor(ratio * N)`` patch indices, uniform without replacement
    temporal -- ``floor(ratio * rows)`` whole grid rows (channel blocks)
    spatial  -- ``floor(ratio * cols)`` whole grid columns (time windows)
    """
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"mask ratio must lie in (0, 1), got {ratio}")
    if strategy not in MASK_STRATEGIES:
        raise ContractError(f"unknown mask strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    if strategy == "random":
        n_masked = int(ratio * grid.n_patches)
        if n_masked == 0:
            raise ContractError(f"ratio {ratio} masks zero of {grid.n_patches} patches")
        masked = rng.choice(grid.n_patches, size=n_masked, replace=False)
    elif strategy == "temporal":
        if grid.rows == 1:
            raise StrategyInapplicableError(
                "temporal sampling needs at least two grid rows")
        n_rows = int(ratio * grid.rows)
        if n_rows == 0:
            raise ContractError(f"ratio {ratio} masks zero of {grid.rows} rows")
        rows = rng.choice(grid.rows, size=n_rows, replace=False)
        masked = (rows[:, None] * grid.cols + np.arange(grid.cols)).ravel()
    else:
        if grid.cols == 1:
            raise StrategyInapplicableError(
                "spatial sampling needs at least two grid columns")
        n_cols = int(ratio * grid.cols)
        if n_cols == 0:
            raise ContractError(f"ratio {ratio} masks zero of {grid.cols} columns")
        cols = rng.choice(grid.cols, size=n_cols, replace=False)
        masked = (np.arange(grid.rows)[:, None] * grid.cols + cols).ravel()
    return MaskPlan(grid=grid, masked=np.sort(masked), strategy=strategy,
                    seed=seed, ratio=ratio)


def gather_visible(patches: np.ndarray, plan: MaskPlan) -> np.ndarray:
    """Visible patches in ascending index order."""
    patches = np.asarray(patches)
    if patches.shape[0] != plan.grid.n_patches:
        raise ContractError(
            f"plan covers {plan.grid.n_patches} patches, got {patches.shape[0]}")
    return patches[plan.visible]


def scatter_full(visible_tokens: np.ndarray, mask_token: np.ndarray,
                 plan: MaskPlan) -> np.ndarray:
    """Replace masked positions with the shared mask token.

    ``visible_tokens`` are in ascending visible-index order; the output has
    one token per grid position.
    """
    visible_tokens = np.asarray(visible_tokens)
    mask_token = np.asarray(mask_token).reshape(-1)
    if visible_tokens.shape[0] != plan.n_visible:
        raise ContractError(
            f"expected {plan.n_visible} visible tokens, got {visible_tokens.shape[0]}")
    if visible_tokens.ndim != 2 or visible_tokens.shape[1] != mask_token.shape[0]:
        raise ContractError(
            f"token width {visible_tokens.shape[1:]} does not match mask token "
            f"{mask_token.shape}")
    out = np.empty((plan.grid.n_patches, mask_token.shape[0]), dtype=visible_tokens.dtype)
    out[plan.masked] = mask_token
    out[plan.visible] = visible_tokens
    return out


def restore_order(plan: MaskPlan) -> np.ndarray:
    """Index map from [visible block; masked block] back to grid order.

    ``concat(visible, masked)[restore_order(plan)]`` puts every token at its
    original grid position (the differentiable counterpart of
    ``scatter_full``).
    """
    order = np.empty(plan.grid.n_patches, dtype=np.int64)
    order[plan.visible] = np.arange(plan.n_visible)
    order[plan.masked] = plan.n_visible + np.arange(plan.n_masked)
    return order
