"""Spatial-temporal Transformer encoder/decoder for masked waterfall modeling.

The encoder embeds flattened 1-channel x 624-sample patches with a shared
affine map (a stride-equals-kernel 1-D convolution reduces to exactly
this), prepends a learnable classification token, adds learnable position
embeddings indexed by original patch position, and runs pre-norm
Transformer blocks with a final layer norm. The decoder projects encoder
tokens to its own width, fills masked positions with one shared learnable
mask token, adds its own position table, runs its blocks, and projects
back to patch values.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from .data import WaterfallPlot
from .errors import ContractError, FormatError, ShapeError
from .patches import MaskPlan, patchify, restore_order
from .tensor import (Tensor, add, broadcast_to, concat, cross_entropy,
                     gather_tokens, gelu, layer_norm, matmul, mean, mul,
                     narrow, no_grad, reshape, softmax, take_rows, transpose)

LAYER_NORM_EPS = 1e-5
TARGET_NORM_EPS = 1e-6
INIT_STD = 0.02


@dataclass
class ModelConfig:
    """Architecture hyperparameters plus the masking/objective knobs."""

    patch_channels: int = 1
    patch_samples: int = 624
    embed_dim: int = 576
    enc_depth: int = 6
    enc_heads: int = 6
    dec_dim: int = 256
    dec_depth: int = 2
    dec_heads: int = 8
    mask_ratio: float = 0.5
    mlp_ratio: int = 4
    num_classes: int = 6
    max_patches: int = 192
    normalize_targets: bool = True

    def __post_init__(self):
        if self.embed_dim % self.enc_heads != 0:
            raise ContractError(
                f"embed_dim {self.embed_dim} not divisible by enc_heads {self.enc_heads}")
        if self.dec_dim % self.dec_heads != 0:
            raise ContractError(
                f"dec_dim {self.dec_dim} not divisible by dec_heads {self.dec_heads}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ContractError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        for field_name in ("patch_channels", "patch_samples", "enc_depth",
                           "dec_depth", "mlp_ratio", "num_classes", "max_patches"):
            if getattr(self, field_name) < 1:
                raise ContractError(f"{field_name} must be positive")

    @property
    def patch_width(self) -> int:
        return self.patch_channels * self.patch_samples

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        """The full-scale configuration (12 x 10000 plots, 192 patches)."""
        base = dict(patch_channels=1, patch_samples=624, embed_dim=576,
                    enc_depth=6, enc_heads=6, dec_dim=256, dec_depth=2,
                    dec_heads=8, mask_ratio=0.5, max_patches=192)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Desk-scale configuration: minutes on a CPU, same structure.

        Reconstruction targets default to raw patch values here: synthetic
        plots are noise-dominated outside the event footprint, and
        per-patch standardization gives those patches an irreducible unit
        loss that swamps the learnable signal at this scale.
        """
        base = dict(patch_channels=1, patch_samples=624, embed_dim=64,
                    enc_depth=2, enc_heads=4, dec_dim=32, dec_depth=1,
                    dec_heads=4, mask_ratio=0.5, max_patches=192,
                    normalize_targets=False)
        base.update(overrides)
        return cls(**base)


@dataclass
class EncoderOutput:
    """Classification token plus per-patch tokens (CLS excluded)."""

    cls: Tensor     # (1, embed_dim)
    tokens: Tensor  # (n_visible or n_patches, embed_dim)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _param_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    shapes: Dict[str, tuple] = {}
    shapes["enc.embed.w"] = (cfg.patch_width, cfg.embed_dim)
    shapes["enc.embed.b"] = (cfg.embed_dim,)
    shapes["enc.cls"] = (1, cfg.embed_dim)
    shapes["enc.pos"] = (cfg.max_patches + 1, cfg.embed_dim)
    hidden = cfg.mlp_ratio * cfg.embed_dim
    for i in range(cfg.enc_depth):
        shapes.update(_block_shapes(f"enc.b{i}", cfg.embed_dim, hidden))
    shapes["enc.ln.gamma"] = (cfg.embed_dim,)
    shapes["enc.ln.beta"] = (cfg.embed_dim,)

    shapes["dec.embed.w"] = (cfg.embed_dim, cfg.dec_dim)
    shapes["dec.embed.b"] = (cfg.dec_dim,)
    shapes["dec.mask"] = (1, cfg.dec_dim)
    shapes["dec.pos"] = (cfg.max_patches, cfg.dec_dim)
    dec_hidden = cfg.mlp_ratio * cfg.dec_dim
    for i in range(cfg.dec_depth):
        shapes.update(_block_shapes(f"dec.b{i}", cfg.dec_dim, dec_hidden))
    shapes["dec.out.w"] = (cfg.dec_dim, cfg.patch_width)
    shapes["dec.out.b"] = (cfg.patch_width,)
    return shapes


def _block_shapes(prefix: str, dim: int, hidden: int) -> Dict[str, tuple]:
    return {
        f"{prefix}.ln1.gamma": (dim,), f"{prefix}.ln1.beta": (dim,),
        f"{prefix}.attn.wq": (dim, dim), f"{prefix}.attn.bq": (dim,),
        f"{prefix}.attn.wk": (dim, dim), f"{prefix}.attn.bk": (dim,),
        f"{prefix}.attn.wv": (dim, dim), f"{prefix}.attn.bv": (dim,),
        f"{prefix}.attn.wo": (dim, dim), f"{prefix}.attn.bo": (dim,),
        f"{prefix}.ln2.gamma": (dim,), f"{prefix}.ln2.beta": (dim,),
        f"{prefix}.mlp.w1": (dim, hidden), f"{prefix}.mlp.b1": (hidden,),
        f"{prefix}.mlp.w2": (hidden, dim), f"{prefix}.mlp.b2": (dim,),
    }


def _trunc_normal(rng, shape, std):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(np.float32)


def init_params(cfg: ModelConfig, seed: int = 0) -> Dict[str, Tensor]:
    """Fresh parameter dict: truncated-normal weights, zero biases,
    normal(0, 0.02) embeddings/CLS/mask, unit layer-norm gains."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    params: Dict[str, Tensor] = {}
    for name, shape in _param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            data = np.ones(shape, dtype=np.float32)
        elif leaf in ("beta",) or leaf.startswith("b"):
            data = np.zeros(shape, dtype=np.float32)
        elif name in ("enc.cls", "enc.pos", "dec.mask", "dec.pos"):
            data = rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)
        else:
            data = _trunc_normal(rng, shape, INIT_STD)
        params[name] = Tensor(data, requires_grad=True)
    return params


def param_count(cfg: ModelConfig) -> int:
    """Exact trainable-parameter count of encoder plus decoder."""
    return sum(int(np.prod(shape)) for shape in _param_shapes(cfg).values())


def make_classifier_head(cfg: ModelConfig) -> Dict[str, Tensor]:
    """Zero-initialized affine map embed_dim -> num_classes."""
    return {
        "head.w": Tensor(np.zeros((cfg.embed_dim, cfg.num_classes), np.float32),
                         requires_grad=True),
        "head.b": Tensor(np.zeros((cfg.num_classes,), np.float32), requires_grad=True),
    }


# ---------------------------------------------------------------------------
# Forward passes (batched internally; public single-plot wrappers below)
# ---------------------------------------------------------------------------

def _attention(x: Tensor, params: Dict[str, Tensor], prefix: str,
               n_heads: int) -> Tensor:
    batch, n_tok, dim = x.shape
    head_dim = dim // n_heads

    def split_heads(t):
        return transpose(reshape(t, (batch, n_tok, n_heads, head_dim)), (0, 2, 1, 3))

    q = split_heads(add(matmul(x, params[f"{prefix}.wq"]), params[f"{prefix}.bq"]))
    k = split_heads(add(matmul(x, params[f"{prefix}.wk"]), params[f"{prefix}.bk"]))
    v = split_heads(add(matmul(x, params[f"{prefix}.wv"]), params[f"{prefix}.bv"]))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    ctx = matmul(softmax(scores, axis=-1), v)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (batch, n_tok, dim))
    return add(matmul(merged, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _block(x: Tensor, params: Dict[str, Tensor], prefix: str, n_heads: int) -> Tensor:
    h = add(x, _attention(
        layer_norm(x, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"],
                   LAYER_NORM_EPS),
        params, f"{prefix}.attn", n_heads))
    z = layer_norm(h, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"],
                   LAYER_NORM_EPS)
    z = matmul(gelu(add(matmul(z, params[f"{prefix}.mlp.w1"]), params[f"{prefix}.mlp.b1"])),
               params[f"{prefix}.mlp.w2"])
    return add(h, add(z, params[f"{prefix}.mlp.b2"]))


def encode_patch_batch(patches: np.ndarray, positions: np.ndarray,
                       cfg: ModelConfig, params: Dict[str, Tensor],
                       trace: Optional[dict] = None) -> Tensor:
    """Encode flattened patches at explicit grid positions.

    ``patches`` is (B, n, patch_width); ``positions`` is (B, n) original
    patch indices in [0, max_patches). Returns (B, n + 1, embed_dim) with
    the classification token at row 0.
    """
    patches = np.asarray(patches)
    positions = np.asarray(positions, dtype=np.int64)
    if patches.ndim != 3 or patches.shape[-1] != cfg.patch_width:
        raise ShapeError(f"expected (B, n, {cfg.patch_width}) patches, got {patches.shape}")
    if positions.shape != patches.shape[:2]:
        raise ShapeError(f"positions {positions.shape} do not match patches "
                         f"{patches.shape[:2]}")
    if positions.size and (positions.min() < 0 or positions.max() >= cfg.max_patches):
        raise ContractError("patch positions outside [0, max_patches)")
    batch, n_tok = positions.shape
    dtype = params["enc.embed.w"].data.dtype

    x = add(matmul(Tensor(patches.astype(dtype, copy=False)), params["enc.embed.w"]),
            params["enc.embed.b"])
    if trace is not None:
        trace["embedded"] = x.shape
    cls = broadcast_to(params["enc.cls"], (batch, 1, cfg.embed_dim))
    x = concat([cls, x], axis=1)
    pos_idx = np.concatenate(
        [np.zeros((batch, 1), dtype=np.int64), positions + 1], axis=1)
    x = add(x, take_rows(params["enc.pos"], pos_idx))
    if trace is not None:
        trace["with_cls_and_pos"] = x.shape
    for i in range(cfg.enc_depth):
        x = _block(x, params, f"enc.b{i}", cfg.enc_heads)
        if trace is not None:
            trace[f"enc_block_{i}"] = x.shape
    x = layer_norm(x, params["enc.ln.gamma"], params["enc.ln.beta"], LAYER_NORM_EPS)
    if trace is not None:
        trace["encoder_output"] = x.shape
    return x


def decode_token_batch(visible_tokens: Tensor, plans, cfg: ModelConfig,
                       params: Dict[str, Tensor],
                       trace: Optional[dict] = None) -> Tensor:
    """Reconstruct all patch values from encoded visible tokens (no CLS).

    ``visible_tokens`` is (B, n_visible, embed_dim); ``plans`` is one
    MaskPlan per batch element, all with the same visible count.
    """
    batch, n_vis, _ = visible_tokens.shape
    if len(plans) != batch:
        raise ContractError(f"{len(plans)} mask plans for batch of {batch}")
    n_patches = plans[0].grid.n_patches
    for plan in plans:
        if plan.n_visible != n_vis or plan.grid.n_patches != n_patches:
            raise ContractError("mask plans disagree with token batch geometry")
    if n_patches != cfg.max_patches:
        raise ContractError(f"plan covers {n_patches} patches, model expects "
                            f"{cfg.max_patches}")

    z = add(matmul(visible_tokens, params["dec.embed.w"]), params["dec.embed.b"])
    if trace is not None:
        trace["decoder_embedded"] = z.shape
    n_masked = n_patches - n_vis
    if n_masked:
        fill = broadcast_to(params["dec.mask"], (batch, n_masked, cfg.dec_dim))
        z = concat([z, fill], axis=1)
    order = np.stack([restore_order(plan) for plan in plans])
    z = gather_tokens(z, order)
    z = add(z, params["dec.pos"])
    if trace is not None:
        trace["decoder_full"] = z.shape
    for i in range(cfg.dec_depth):
        z = _block(z, params, f"dec.b{i}", cfg.dec_heads)
        if trace is not None:
            trace[f"dec_block_{i}"] = z.shape
    out = add(matmul(z, params["dec.out.w"]), params["dec.out.b"])
    if trace is not None:
        trace["reconstruction"] = out.shape
    return out


def masked_mse(pred: Tensor, targets: np.ndarray, masked_idx: np.ndarray,
               normalize: bool, eps: float = TARGET_NORM_EPS) -> Tensor:
    """Mean squared error per element over masked patches only.

    ``pred`` is (B, N, patch_width); ``targets`` the raw patch values of
    the same shape; ``masked_idx`` (B, n_masked). When ``normalize`` is
    set, each target patch is standardized (mean 0, variance 1) before
    comparison.
    """
    if masked_idx.size == 0:
        raise ContractError("loss needs a non-empty mask")
    batch = np.arange(targets.shape[0])[:, None]
    tgt = targets[batch, masked_idx]
    if normalize:
        mu = tgt.mean(axis=-1, keepdims=True)
        var = tgt.var(axis=-1, keepdims=True)
        tgt = (tgt - mu) / np.sqrt(var + eps)
    pred_masked = gather_tokens(pred, masked_idx)
    diff = add(pred_masked, Tensor(-tgt.astype(pred.data.dtype, copy=False)))
    return mean(mul(diff, diff))


def forward_mae_batch(patches: np.ndarray, plans, cfg: ModelConfig,
                      params: Dict[str, Tensor]) -> tuple:
    """Masked-reconstruction forward over a batch of patchified plots.

    Returns ``(reconstruction Tensor (B, N, patch_width), loss Tensor)``.
    """
    patches = np.asarray(patches)
    batch = patches.shape[0]
    visible_idx = np.stack([plan.visible for plan in plans])
    masked_idx = np.stack([plan.masked for plan in plans])
    vis_patches = patches[np.arange(batch)[:, None], visible_idx]
    enc = encode_patch_batch(vis_patches, visible_idx, cfg, params)
    tokens = narrow(enc, 1, 1, enc.shape[1] - 1)
    pred = decode_token_batch(tokens, plans, cfg, params)
    loss = masked_mse(pred, patches, masked_idx, cfg.normalize_targets)
    return pred, loss


def pooled_logits_batch(patches: np.ndarray, cfg: ModelConfig,
                        params: Dict[str, Tensor], head: Dict[str, Tensor]) -> Tensor:
    """Mean-pooled non-CLS tokens through the classifier head (all grads on)."""
    batch, n_patches, _ = patches.shape
    positions = np.broadcast_to(np.arange(n_patches, dtype=np.int64), (batch, n_patches))
    enc = encode_patch_batch(patches, positions, cfg, params)
    pooled = mean(narrow(enc, 1, 1, n_patches), axis=1)
    return add(matmul(pooled, head["head.w"]), head["head.b"])


def cls_features_batch(patches: np.ndarray, cfg: ModelConfig,
                       params: Dict[str, Tensor]) -> np.ndarray:
    """Frozen-encoder classification-token features, (B, embed_dim)."""
    batch, n_patches, _ = patches.shape
    positions = np.broadcast_to(np.arange(n_patches, dtype=np.int64), (batch, n_patches))
    with no_grad():
        enc = encode_patch_batch(patches, positions, cfg, params)
    return np.ascontiguousarray(enc.data[:, 0, :])


def head_logits(features: np.ndarray, head: Dict[str, Tensor]) -> Tensor:
    """Affine head over precomputed (frozen) features."""
    return add(matmul(Tensor(np.asarray(features, dtype=head["head.w"].data.dtype)),
                      head["head.w"]), head["head.b"])


# ---------------------------------------------------------------------------
# Single-plot public operations
# ---------------------------------------------------------------------------

def _plot_patches(x, cfg: ModelConfig, trace: Optional[dict] = None):
    data = x.data if isinstance(x, WaterfallPlot) else np.asarray(x)
    patches, grid = patchify(data, cfg.patch_channels, cfg.patch_samples)
    if grid.n_patches != cfg.max_patches:
        raise ContractError(
            f"plot geometry yields {grid.n_patches} patches, model expects "
            f"{cfg.max_patches}")
    if trace is not None:
        trace["patches"] = patches.shape
    return patches, grid


def encode(x, plan: Optional[MaskPlan], cfg: ModelConfig,
           params: Dict[str, Tensor], trace: Optional[dict] = None) -> EncoderOutput:
    """Encode one plot; with a plan only visible patches are processed."""
    patches, grid = _plot_patches(x, cfg, trace)
    if plan is None:
        positions = np.arange(grid.n_patches, dtype=np.int64)
        selected = patches
    else:
        if plan.grid.n_patches != grid.n_patches:
            raise ContractError(
                f"mask plan covers {plan.grid.n_patches} patches, plot has "
                f"{grid.n_patches}")
        positions = plan.visible
        selected = patches[positions]
        if trace is not None:
            trace["visible"] = selected.shape
    out = encode_patch_batch(selected[None], positions[None], cfg, params, trace=trace)
    n = out.shape[1] - 1
    return EncoderOutput(
        cls=reshape(narrow(out, 1, 0, 1), (1, cfg.embed_dim)),
        tokens=reshape(narrow(out, 1, 1, n), (n, cfg.embed_dim)))


def decode(visible_tokens, plan: MaskPlan, cfg: ModelConfig,
           params: Dict[str, Tensor], trace: Optional[dict] = None) -> Tensor:
    """Reconstruct all patches of one plot from its visible tokens (no CLS)."""
    t = visible_tokens if isinstance(visible_tokens, Tensor) else Tensor(visible_tokens)
    if t.data.ndim != 2 or t.data.shape[-1] != cfg.embed_dim:
        raise ShapeError(f"expected (n_visible, {cfg.embed_dim}) tokens, got {t.shape}")
    if t.data.shape[0] != plan.n_visible:
        raise ContractError(f"{t.data.shape[0]} tokens for plan with "
                            f"{plan.n_visible} visible patches")
    out = decode_token_batch(reshape(t, (1,) + t.shape), [plan], cfg, params, trace=trace)
    return reshape(out, out.shape[1:])


def forward_mae(x, plan: MaskPlan, cfg: ModelConfig, params: Dict[str, Tensor],
                trace: Optional[dict] = None) -> tuple:
    """Masked reconstruction of one plot: (patch predictions, scalar loss)."""
    if plan.n_masked == 0:
        raise ContractError("forward_mae needs a non-empty mask")
    patches, _ = _plot_patches(x, cfg, trace)
    if plan.grid.n_patches != patches.shape[0]:
        raise ContractError("mask plan does not match plot geometry")
    pred, loss = forward_mae_batch(patches[None], [plan], cfg, params)
    if trace is not None:
        trace["visible"] = (plan.n_visible, cfg.patch_width)
        trace["reconstruction"] = tuple(pred.shape[1:])
    return reshape(pred, pred.shape[1:]), loss


def classify_probe(x, cfg: ModelConfig, params: Dict[str, Tensor],
                   head: Dict[str, Tensor]) -> Tensor:
    """Logits from the classification token; encoder stays frozen (no tape)."""
    patches, _ = _plot_patches(x, cfg)
    feats = cls_features_batch(patches[None], cfg, params)
    return reshape(head_logits(feats, head), (cfg.num_classes,))


def classify_finetune(x, cfg: ModelConfig, params: Dict[str, Tensor],
                      head: Dict[str, Tensor]) -> Tensor:
    """Logits from mean-pooled patch tokens; every parameter trainable."""
    patches, _ = _plot_patches(x, cfg)
    return reshape(pooled_logits_batch(patches[None], cfg, params, head),
                   (cfg.num_classes,))


# ---------------------------------------------------------------------------
# Checkpoints: UTF-8 JSON header, NUL terminator, little-endian f32 blobs
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    params: Dict[str, Tensor]
    epoch: int = 0
    rng_state: Optional[dict] = None


def save_checkpoint(path, cfg: ModelConfig, params: Dict[str, Tensor],
                    epoch: int = 0, rng_state: Optional[dict] = None) -> None:
    index = []
    offset = 0
    blobs = []
    for name, p in params.items():
        blob = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(p.data.shape),
                      "offset": offset, "length": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    header = {
        "config": asdict(cfg),
        "epoch": int(epoch),
        "rng_state": rng_state,
        "tensors": index,
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(b"\x00")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    raw = open(path, "rb").read()
    nul = raw.find(b"\x00")
    if nul < 0:
        raise FormatError(f"{path}: no NUL header terminator found")
    try:
        header = json.loads(raw[:nul].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad JSON header before offset {nul}: {exc}") from exc
    cfg = ModelConfig(**header["config"])
    base = nul + 1
    params: Dict[str, Tensor] = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        end = start + entry["length"]
        if end > len(raw):
            raise FormatError(f"{path}: tensor {entry['name']!r} ends at offset "
                              f"{end}, file has {len(raw)} bytes")
        data = np.frombuffer(raw[start:end], dtype="<f4").reshape(entry["shape"])
        params[entry["name"]] = Tensor(data.copy(), requires_grad=True)
    return Checkpoint(config=cfg, params=params, epoch=header["epoch"],
                      rng_state=header["rng_state"])
