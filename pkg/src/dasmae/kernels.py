"""Loop-heavy numeric kernels with numba-JIT and pure-numpy implementations.

Every kernel here exists twice: a tight-loop version compiled with
``numba.njit`` and a vectorized numpy fallback. The active path is chosen
once at import time from the ``DAS_MAE_NUMBA`` environment variable:

    DAS_MAE_NUMBA=1     require numba (ImportError if missing)
    DAS_MAE_NUMBA=0     force the numpy fallback
    unset / "auto"      use numba when importable, numpy otherwise

The fused optimizer update is bit-identical across both paths (pure
float32 elementwise arithmetic); kernels containing reductions or ``exp``
agree only to floating-point tolerance. Within one path all kernels are
deterministic. ``benchmarks/bench_kernels.py`` times the two paths against
each other.
"""

from __future__ import annotations

import math
import os

import numpy as np

_ENV_FLAG = os.environ.get("DAS_MAE_NUMBA", "auto").strip().lower()

if _ENV_FLAG in ("0", "false", "no", "off"):
    _WANT_NUMBA = False
    _REQUIRE_NUMBA = False
elif _ENV_FLAG in ("1", "true", "yes", "on"):
    _WANT_NUMBA = True
    _REQUIRE_NUMBA = True
else:
    _WANT_NUMBA = True
    _REQUIRE_NUMBA = False

NUMBA_AVAILABLE = False
if _WANT_NUMBA:
    try:
        from numba import njit

        NUMBA_AVAILABLE = True
    except ImportError:
        if _REQUIRE_NUMBA:
            raise


def active_backend() -> str:
    """Name of the kernel path selected at import: "numba" or "numpy"."""
    return "numba" if NUMBA_AVAILABLE else "numpy"


# ---------------------------------------------------------------------------
# AdamW fused parameter update (float32, in place)
# ---------------------------------------------------------------------------

def _adamw_update_numpy(p, g, m, v, decay, one_minus_b1, one_minus_b2,
                        beta1, beta2, inv_bc1, inv_bc2, lr, eps):
    p *= decay
    m *= beta1
    m += one_minus_b1 * g
    v *= beta2
    v += one_minus_b2 * (g * g)
    p -= lr * (m * inv_bc1) / (np.sqrt(v * inv_bc2) + eps)


def _adamw_update_loop(p, g, m, v, decay, one_minus_b1, one_minus_b2,
                       beta1, beta2, inv_bc1, inv_bc2, lr, eps):
    for i in range(p.shape[0]):
        p[i] = p[i] * decay
        m[i] = beta1 * m[i] + one_minus_b1 * g[i]
        v[i] = beta2 * v[i] + one_minus_b2 * (g[i] * g[i])
        p[i] = p[i] - lr * (m[i] * inv_bc1) / (np.sqrt(v[i] * inv_bc2) + eps)


# ---------------------------------------------------------------------------
# Synthetic waterfall rendering: one source template spread across channels
# with Gaussian attenuation and per-channel-distance delay
# ---------------------------------------------------------------------------

def _render_moving_source_numpy(template, centers, rho, delay, n_channels):
    n_samples = template.shape[0]
    chan = np.arange(n_channels, dtype=np.float64)[:, None]
    dist = np.abs(chan - centers[None, :])
    atten = np.exp(-(dist * dist) / (rho * rho))
    shift = np.rint(delay * dist).astype(np.int64)
    src = np.arange(n_samples, dtype=np.int64)[None, :] - shift
    valid = src >= 0
    out = np.where(valid, template[np.clip(src, 0, n_samples - 1)], 0.0)
    out *= atten
    return out


def _render_moving_source_loop(template, centers, rho, delay, n_channels):
    n_samples = template.shape[0]
    out = np.zeros((n_channels, n_samples), dtype=np.float64)
    for c in range(n_channels):
        for t in range(n_samples):
            dist = abs(c - centers[t])
            src = t - int(round(delay * dist))
            if src >= 0:
                atten = np.exp(-(dist * dist) / (rho * rho))
                out[c, t] = atten * template[src]
    return out


# ---------------------------------------------------------------------------
# t-SNE: per-point Gaussian bandwidth search matching a target entropy
# ---------------------------------------------------------------------------

def _perplexity_search_numpy(d2, target_entropy, tol, max_iter):
    n = d2.shape[0]
    cond_p = np.zeros((n, n), dtype=np.float64)
    betas = np.ones(n, dtype=np.float64)
    errors = np.zeros(n, dtype=np.float64)
    for i in range(n):
        row = np.delete(d2[i], i)
        beta = 1.0
        beta_min = -np.inf
        beta_max = np.inf
        diff = np.inf
        for _ in range(max_iter):
            p = np.exp(-row * beta)
            sum_p = p.sum()
            if sum_p <= 0.0:
                sum_p = 1e-300
            entropy = math.log(sum_p) + beta * float(np.dot(row, p)) / sum_p
            diff = entropy - target_entropy
            if abs(diff) <= tol:
                break
            if diff > 0.0:
                beta_min = beta
                beta = beta * 2.0 if beta_max == np.inf else (beta + beta_max) / 2.0
            else:
                beta_max = beta
                beta = beta / 2.0 if beta_min == -np.inf else (beta + beta_min) / 2.0
        p = np.exp(-row * beta)
        sum_p = p.sum()
        if sum_p <= 0.0:
            sum_p = 1e-300
        p /= sum_p
        cond_p[i, :i] = p[:i]
        cond_p[i, i + 1:] = p[i:]
        betas[i] = beta
        errors[i] = abs(diff)
    return cond_p, betas, errors


def _perplexity_search_loop(d2, target_entropy, tol, max_iter):
    n = d2.shape[0]
    cond_p = np.zeros((n, n), dtype=np.float64)
    betas = np.ones(n, dtype=np.float64)
    errors = np.zeros(n, dtype=np.float64)
    for i in range(n):
        beta = 1.0
        beta_min = -np.inf
        beta_max = np.inf
        diff = np.inf
        for _ in range(max_iter):
            sum_p = 0.0
            sum_dp = 0.0
            for j in range(n):
                if j != i:
                    pj = np.exp(-d2[i, j] * beta)
                    sum_p += pj
                    sum_dp += d2[i, j] * pj
            if sum_p <= 0.0:
                sum_p = 1e-300
            entropy = np.log(sum_p) + beta * sum_dp / sum_p
            diff = entropy - target_entropy
            if abs(diff) <= tol:
                break
            if diff > 0.0:
                beta_min = beta
                beta = beta * 2.0 if beta_max == np.inf else (beta + beta_max) / 2.0
            else:
                beta_max = beta
                beta = beta / 2.0 if beta_min == -np.inf else (beta + beta_min) / 2.0
        sum_p = 0.0
        for j in range(n):
            if j != i:
                cond_p[i, j] = np.exp(-d2[i, j] * beta)
                sum_p += cond_p[i, j]
        if sum_p <= 0.0:
            sum_p = 1e-300
        for j in range(n):
            cond_p[i, j] /= sum_p
        betas[i] = beta
        errors[i] = abs(diff)
    return cond_p, betas, errors


# ---------------------------------------------------------------------------
# t-SNE: KL divergence and gradient for the 2-D Student-t embedding
# ---------------------------------------------------------------------------

def _tsne_kl_grad_numpy(p, y):
    n = y.shape[0]
    sq = np.sum(y * y, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (y @ y.T)
    num = 1.0 / (1.0 + d2)
    np.fill_diagonal(num, 0.0)
    z = num.sum()
    if z <= 0.0:
        z = 1e-300
    q = np.maximum(num / z, 1e-12)
    pq_num = (p - q) * num
    grad = 4.0 * (pq_num.sum(axis=1)[:, None] * y - pq_num @ y)
    mask = p > 0.0
    kl = float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
    return grad, kl


def _tsne_kl_grad_loop(p, y):
    n = y.shape[0]
    num = np.zeros((n, n), dtype=np.float64)
    z = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                dx = y[i, 0] - y[j, 0]
                dy = y[i, 1] - y[j, 1]
                num[i, j] = 1.0 / (1.0 + dx * dx + dy * dy)
                z += num[i, j]
    if z <= 0.0:
        z = 1e-300
    grad = np.zeros((n, 2), dtype=np.float64)
    kl = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                q = num[i, j] / z
                if q < 1e-12:
                    q = 1e-12
                coeff = 4.0 * (p[i, j] - q) * num[i, j]
                grad[i, 0] += coeff * (y[i, 0] - y[j, 0])
                grad[i, 1] += coeff * (y[i, 1] - y[j, 1])
                if p[i, j] > 0.0:
                    kl += p[i, j] * np.log(p[i, j] / q)
    return grad, kl


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:
    _adamw_update_numba = njit(cache=True)(_adamw_update_loop)
    _render_moving_source_numba = njit(cache=True)(_render_moving_source_loop)
    _perplexity_search_numba = njit(cache=True)(_perplexity_search_loop)
    _tsne_kl_grad_numba = njit(cache=True)(_tsne_kl_grad_loop)

    _adamw_update_impl = _adamw_update_numba
    _render_moving_source_impl = _render_moving_source_numba
    _perplexity_search_impl = _perplexity_search_numba
    _tsne_kl_grad_impl = _tsne_kl_grad_numba
else:
    # Without JIT the scalar loops are far slower than vectorized numpy,
    # so the fallback path routes everything through the numpy versions.
    _adamw_update_numba = None
    _render_moving_source_numba = None
    _perplexity_search_numba = None
    _tsne_kl_grad_numba = None

    _adamw_update_impl = _adamw_update_numpy
    _render_moving_source_impl = _render_moving_source_numpy
    _perplexity_search_impl = _perplexity_search_numpy
    _tsne_kl_grad_impl = _tsne_kl_grad_numpy


def adamw_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
                 step: int, lr: float, beta1: float, beta2: float,
                 eps: float, weight_decay: float) -> None:
    """One fused AdamW update, in place on flat float32 arrays.

    Decoupled decay multiplies the parameter before the moment update.
    All scalar coefficients are cast to float32 so both kernel paths run
    the identical float32 arithmetic chain.
    """
    f32 = np.float32
    _adamw_update_impl(
        p, g, m, v,
        f32(1.0 - lr * weight_decay),
        f32(1.0 - beta1), f32(1.0 - beta2),
        f32(beta1), f32(beta2),
        f32(1.0 / (1.0 - beta1 ** step)),
        f32(1.0 / (1.0 - beta2 ** step)),
        f32(lr), f32(eps),
    )


def render_moving_source(template: np.ndarray, centers: np.ndarray,
                         rho: float, delay: float, n_channels: int) -> np.ndarray:
    """Spread a source waveform over channels around a moving center.

    Channel ``c`` at time ``t`` receives the template delayed by
    ``round(delay * d)`` samples and attenuated by ``exp(-d^2 / rho^2)``
    where ``d = |c - centers[t]|``. Returns a (channels, samples) array.
    """
    return _render_moving_source_impl(
        np.ascontiguousarray(template, dtype=np.float64),
        np.ascontiguousarray(centers, dtype=np.float64),
        float(rho), float(delay), int(n_channels),
    )


def perplexity_search(d2: np.ndarray, target_entropy: float,
                      tol: float = 1e-5, max_iter: int = 50):
    """Per-point binary search for Gaussian bandwidths hitting an entropy.

    Returns (conditional probabilities with zero diagonal, betas,
    per-point |entropy error| after the search).
    """
    return _perplexity_search_impl(
        np.ascontiguousarray(d2, dtype=np.float64),
        float(target_entropy), float(tol), int(max_iter),
    )


def tsne_kl_grad(p: np.ndarray, y: np.ndarray):
    """KL divergence and its gradient for a 2-D Student-t embedding."""
    return _tsne_kl_grad_impl(
        np.ascontiguousarray(p, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.float64),
    )


# name -> (numpy implementation, numba implementation or None); used by the
# parity tests and the benchmark script.
IMPLEMENTATIONS = {
    "adamw_update": (_adamw_update_numpy, _adamw_update_numba),
    "render_moving_source": (_render_moving_source_numpy, _render_moving_source_numba),
    "perplexity_search": (_perplexity_search_numpy, _perplexity_search_numba),
    "tsne_kl_grad": (_tsne_kl_grad_numpy, _tsne_kl_grad_numba),
}
