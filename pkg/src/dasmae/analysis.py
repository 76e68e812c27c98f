"""Representation-quality analysis: PCA via a linear autoencoder, exact
t-SNE, and a leave-one-out kNN cluster-quality score."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import ContractError, NumericalDegeneracyError
from .kernels import perplexity_search, tsne_kl_grad
from .optim import AdamW, ScheduleConfig, lr_at
from .tensor import Tensor, add, backward, matmul, mean, mul, reset_tape

logger = logging.getLogger(__name__)

EARLY_EXAGGERATION = 12.0
EXAGGERATION_ITERS = 100
MOMENTUM_SWITCH_ITER = 250
BANDWIDTH_TOL = 1e-5
BANDWIDTH_MAX_ITER = 50


@dataclass
class Embedding2D:
    """2-D embedding of n representation vectors."""

    points: np.ndarray           # (n, 2)
    method: str                  # "tsne" | "pca"
    source_kind: str             # "cls" | "mean" | other provenance tag

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ContractError(f"embedding must be (n, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ContractError("embedding contains non-finite coordinates")
        self.points = pts


def pca_linear_autoencoder(x: np.ndarray, k: int, epochs: int = 1500,
                           lr: float = 3e-2, seed: int = 0
                           ) -> Tuple[np.ndarray, np.ndarray, float]:
    """Rank-k PCA trained as a linear autoencoder with the usual optimizer.

    Affine encoder (D -> k) and decoder (k -> D) minimize reconstruction
    MSE by full-batch AdamW with cosine decay; the optimum equals the
    truncated-SVD reconstruction of the centered data. Returns
    ``(representations (n, k), reconstruction (n, D), final mse)``.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ContractError(f"expected an (n, D) matrix, got shape {x.shape}")
    n, dim = x.shape
    if not 1 <= k <= min(n, dim):
        raise ContractError(f"k must lie in [1, min(n, D)] = [1, {min(n, dim)}], got {k}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
    scale = 1.0 / np.sqrt(dim)
    params = {
        "enc.w": Tensor(rng.normal(0, scale, (dim, k)).astype(np.float32),
                        requires_grad=True),
        "enc.b": Tensor(np.zeros(k, np.float32), requires_grad=True),
        "dec.w": Tensor(rng.normal(0, scale, (k, dim)).astype(np.float32),
                        requires_grad=True),
        "dec.b": Tensor(np.zeros(dim, np.float32), requires_grad=True),
    }
    optimizer = AdamW(params, weight_decay=0.0)
    schedule = ScheduleConfig(lr, 0, epochs)
    data = Tensor(x)
    final = float("nan")
    for epoch in range(epochs):
        z = add(matmul(data, params["enc.w"]), params["enc.b"])
        recon = add(matmul(z, params["dec.w"]), params["dec.b"])
        diff = add(recon, Tensor(-x))
        loss = mean(mul(diff, diff))
        backward(loss)
        optimizer.step(lr_at(epoch, schedule))
        optimizer.zero_grad()
        reset_tape()
        final = float(loss.data)
    reps = x @ params["enc.w"].data + params["enc.b"].data
    recon = reps @ params["dec.w"].data + params["dec.b"].data
    return reps, recon, final


def tsne(x: np.ndarray, perplexity: float = 40.0, lr: float = 2000.0,
         iters: int = 500, seed: int = 0
         ) -> Tuple[np.ndarray, List[float]]:
    """Exact (O(n^2)) t-SNE to 2-D.

    Per-point Gaussian bandwidths come from a binary search matching
    ``log(perplexity)`` entropy; optimization uses momentum 0.5 (0.8 after
    iteration 250), per-coordinate adaptive gains, and 12x early
    exaggeration for the first 100 iterations. After the exaggeration
    phase a monotone safeguard rejects KL-increasing steps, so the
    returned per-iteration trace of the true (unexaggerated) KL is
    non-increasing from there on.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 5:
        raise ContractError(f"t-SNE needs at least 5 points, got {n}")
    max_perp = (n - 1) / 3.0
    if perplexity > max_perp:
        clamped = np.floor(max_perp)
        warnings.warn(f"perplexity {perplexity} too large for n={n}; "
                      f"clamped to {clamped}", stacklevel=2)
        perplexity = float(clamped)

    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    cond_p, _, errors = perplexity_search(d2, float(np.log(perplexity)),
                                          BANDWIDTH_TOL, BANDWIDTH_MAX_ITER)
    if np.any(errors > BANDWIDTH_TOL):
        bad = int(np.argmax(errors))
        raise NumericalDegeneracyError(
            f"bandwidth search failed for point {bad} "
            f"(entropy error {errors[bad]:.2e}); input may be duplicate-heavy")
    p = (cond_p + cond_p.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)

    rng = np.random.default_rng(np.random.SeedSequence((seed, 23)))
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    kl_trace: List[float] = []
    p_run = p * EARLY_EXAGGERATION
    trust = 1.0
    kl_prev = None
    for it in range(iters):
        if it == EXAGGERATION_ITERS:
            # descent restarts on the true objective: carrying velocity
            # built under exaggerated affinities overshoots badly
            p_run = p
            update[...] = 0.0
        momentum = 0.5 if it < MOMENTUM_SWITCH_ITER else 0.8
        grad, _ = tsne_kl_grad(p_run, y)
        # reference-code step convention: the KL gradient's constant
        # factor 4 is folded into the learning rate
        grad = grad / 4.0
        inc = (update * grad) < 0.0
        gains[inc] += 0.2
        gains[~inc] *= 0.8
        np.clip(gains, 0.01, None, out=gains)
        if it < EXAGGERATION_ITERS:
            update = momentum * update - lr * gains * grad
            y = y + update
            y = y - y.mean(axis=0)
            _, kl = tsne_kl_grad(p, y)
        else:
            # monotone safeguard: a candidate step that raises the true
            # KL is rejected and the trust factor halved, so the trace is
            # non-increasing after the exaggeration phase
            cand_update = momentum * update - lr * trust * gains * grad
            cand = y + cand_update
            cand = cand - cand.mean(axis=0)
            _, kl = tsne_kl_grad(p, cand)
            if kl_prev is not None and kl > kl_prev:
                update[...] = 0.0
                trust *= 0.5
                kl = kl_prev
            else:
                y, update = cand, cand_update
                trust = min(trust * 1.1, 1.0)
        kl_prev = kl
        kl_trace.append(float(kl))
    return y, kl_trace


def cluster_quality(reps: np.ndarray, labels: np.ndarray, k: int = 10) -> float:
    """Leave-one-out k-nearest-neighbor accuracy in representation space."""
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = reps.shape[0]
    if labels.shape != (n,):
        raise ContractError(f"labels shape {labels.shape} does not match {n} points")
    counts = np.bincount(labels)
    if np.any(counts[np.unique(labels)] < 2):
        raise ContractError("every class needs at least 2 members")
    sq = np.sum(reps * reps, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (reps @ reps.T)
    np.fill_diagonal(d2, np.inf)
    neighbors = np.argsort(d2, axis=1, kind="stable")[:, :k]
    n_classes = int(labels.max()) + 1
    votes = np.zeros((n, n_classes), dtype=np.int64)
    for j in range(neighbors.shape[1]):
        np.add.at(votes, (np.arange(n), labels[neighbors[:, j]]), 1)
    preds = np.argmax(votes, axis=1)
    return float(np.mean(preds == labels))
