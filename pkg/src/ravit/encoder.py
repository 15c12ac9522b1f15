"""A single-resolution transformer encoder whose CLS token can be injected.

The encoder is a standard pre-norm ViT: patch projection plus learned
positional embeddings, a stack of attention/MLP residual blocks, a final
layer norm on the classification token, and a one-layer affine head. The
starting CLS vector is replaceable, which is what lets a coarser branch
hand its summary to a finer one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ShapeError
from .numerics import (
    MacCounter,
    Tensor,
    add,
    add_bias,
    concat_cols,
    concat_rows,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    slice_cols,
    slice_rows,
    softmax_rows,
    transpose,
)
from .rng import Rng

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of one encoder branch. Sequence length is (side/patch)^2 + 1."""

    image_side: int
    patch: int
    embed_dim: int
    hidden_dim: int
    heads: int
    layers: int
    num_classes: int
    channels: int = 3

    def __post_init__(self):
        if self.image_side <= 0 or self.patch <= 0:
            raise ShapeError("image side and patch size must be positive")
        if self.image_side % self.patch != 0:
            raise ShapeError(f"image side {self.image_side} not divisible by patch {self.patch}")
        if self.embed_dim % self.heads != 0:
            raise ShapeError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.layers < 0:
            raise ShapeError("layer count must be >= 0")
        if self.num_classes < 1 or self.channels < 1 or self.hidden_dim < 1:
            raise ShapeError("num_classes, channels, hidden_dim must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch

    @property
    def seq_len(self) -> int:
        return self.grid * self.grid + 1

    @property
    def patch_values(self) -> int:
        return self.patch * self.patch * self.channels


_LAYER_FIELDS = (
    "ln1_g", "ln1_b",
    "q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "o_w", "o_b",
    "ln2_g", "ln2_b",
    "fc1_w", "fc1_b", "fc2_w", "fc2_b",
)
_HEAD_FIELDS = ("patch_w", "patch_b", "pos", "cls")
_TAIL_FIELDS = ("final_g", "final_b", "head_w", "head_b")


@dataclass(frozen=True, eq=False)
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    o_w: Tensor
    o_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor


@dataclass(frozen=True, eq=False)
class EncoderParams:
    """All weights of one branch; tensor shapes are fixed by the config."""

    config: EncoderConfig
    patch_w: Tensor
    patch_b: Tensor
    pos: Tensor
    cls: Tensor
    layers: tuple[LayerParams, ...]
    final_g: Tensor
    final_b: Tensor
    head_w: Tensor
    head_b: Tensor

    def named_tensors(self, prefix: str = ""):
        for f in _HEAD_FIELDS:
            yield prefix + f, getattr(self, f)
        for j, lp in enumerate(self.layers):
            for f in _LAYER_FIELDS:
                yield f"{prefix}layer{j}.{f}", getattr(lp, f)
        for f in _TAIL_FIELDS:
            yield prefix + f, getattr(self, f)

    def replace_tensors(self, lookup: Callable[[str, Tensor], Tensor], prefix: str = "") -> "EncoderParams":
        """New params with every tensor replaced by lookup(name, old)."""
        layers = tuple(
            LayerParams(**{f: lookup(f"{prefix}layer{j}.{f}", getattr(lp, f)) for f in _LAYER_FIELDS})
            for j, lp in enumerate(self.layers)
        )
        kw = {f: lookup(prefix + f, getattr(self, f)) for f in _HEAD_FIELDS + _TAIL_FIELDS}
        return EncoderParams(config=self.config, layers=layers, **kw)


def param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; also fixes the initialization draw order."""
    d, hid = cfg.embed_dim, cfg.hidden_dim
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("patch_w", (cfg.patch_values, d)),
        ("patch_b", (d,)),
        ("pos", (cfg.seq_len, d)),
        ("cls", (d,)),
    ]
    per_layer = {
        "ln1_g": (d,), "ln1_b": (d,),
        "q_w": (d, d), "q_b": (d,), "k_w": (d, d), "k_b": (d,),
        "v_w": (d, d), "v_b": (d,), "o_w": (d, d), "o_b": (d,),
        "ln2_g": (d,), "ln2_b": (d,),
        "fc1_w": (d, hid), "fc1_b": (hid,), "fc2_w": (hid, d), "fc2_b": (d,),
    }
    for j in range(cfg.layers):
        shapes.extend((f"layer{j}.{f}", per_layer[f]) for f in _LAYER_FIELDS)
    shapes.extend([
        ("final_g", (d,)),
        ("final_b", (d,)),
        ("head_w", (d, cfg.num_classes)),
        ("head_b", (cfg.num_classes,)),
    ])
    return shapes


def build_encoder_params(cfg: EncoderConfig, make: Callable[[str, tuple[int, ...]], Tensor]) -> EncoderParams:
    """Assemble EncoderParams by calling make(name, shape) in canonical order."""
    made = {name: make(name, shape) for name, shape in param_shapes(cfg)}
    layers = tuple(
        LayerParams(**{f: made[f"layer{j}.{f}"] for f in _LAYER_FIELDS})
        for j in range(cfg.layers)
    )
    kw = {f: made[f] for f in _HEAD_FIELDS + _TAIL_FIELDS}
    return EncoderParams(config=cfg, layers=layers, **kw)


def init_encoder_params(cfg: EncoderConfig, rng: Rng, std: float = INIT_STD) -> EncoderParams:
    """Fresh weights: normal(0, std) projections, unit norms, zero biases."""

    def make(name: str, shape: tuple[int, ...]) -> Tensor:
        if name.endswith("_g"):
            return Tensor._wrap(np.ones(shape))
        if name.endswith("_b"):
            return Tensor._wrap(np.zeros(shape))
        count = int(np.prod(shape, dtype=np.int64))
        return Tensor._wrap(rng.normals(count).reshape(shape) * std)

    return build_encoder_params(cfg, make)


def param_count(cfg: EncoderConfig) -> int:
    return sum(int(np.prod(s, dtype=np.int64)) for _, s in param_shapes(cfg))


# ---------------------------------------------------------------------------
# forward ops


def patchify(image: Tensor, patch: int) -> Tensor:
    """Split a (C, S, S) image into ((S/P)^2, P*P*C) flattened patches.

    Patches are ordered row-major over the patch grid; within one patch the
    values are channel-major, then row-major. Pure data movement on the
    input side of the graph, so it is not recorded for gradients.
    """
    if image.ndim != 3 or image.shape[1] != image.shape[2]:
        raise ShapeError(f"patchify needs a square (C, S, S) image, got {image.shape}")
    c, s, _ = image.shape
    if patch <= 0 or s % patch != 0:
        raise ShapeError(f"image side {s} not divisible by patch {patch}")
    g = s // patch
    arr = image.array.reshape(c, g, patch, g, patch)
    arr = arr.transpose(1, 3, 0, 2, 4).reshape(g * g, patch * patch * c)
    return Tensor._wrap(arr)


def unpatchify(patches: Tensor, patch: int, channels: int) -> Tensor:
    """Inverse of patchify; reassembles the original image bit-exactly."""
    if patches.ndim != 2 or patches.shape[1] != patch * patch * channels:
        raise ShapeError(f"bad patch matrix shape {patches.shape}")
    g = int(round(patches.shape[0] ** 0.5))
    if g * g != patches.shape[0]:
        raise ShapeError(f"patch count {patches.shape[0]} is not a square")
    arr = patches.array.reshape(g, g, channels, patch, patch)
    arr = arr.transpose(2, 0, 3, 1, 4).reshape(channels, g * patch, g * patch)
    return Tensor._wrap(arr)


def embed(patches: Tensor, params: EncoderParams, cls_in: Tensor | None = None) -> Tensor:
    """Project patches and prepend the CLS slot, then add positional embeddings.

    A given cls_in replaces the learned initial CLS before the positional
    embedding of slot 0 is added.
    """
    cfg = params.config
    if patches.shape != (cfg.seq_len - 1, cfg.patch_values):
        raise ShapeError(
            f"patch matrix {patches.shape} does not match config "
            f"({cfg.seq_len - 1}, {cfg.patch_values})"
        )
    cls_vec = params.cls if cls_in is None else cls_in
    if cls_vec.shape != (cfg.embed_dim,):
        raise ShapeError(f"cls vector must have shape ({cfg.embed_dim},), got {cls_vec.shape}")
    projected = add_bias(matmul(patches, params.patch_w), params.patch_b)
    tokens = concat_rows([reshape(cls_vec, (1, cfg.embed_dim)), projected])
    return add(tokens, params.pos)


def attention_layer(x: Tensor, lp: LayerParams, heads: int) -> Tensor:
    """Pre-norm residual block: x + MHSA(LN(x)), then + MLP(LN(.))."""
    seq, dim = x.shape
    if dim % heads != 0:
        raise ShapeError(f"embed dim {dim} not divisible by {heads} heads")
    head_dim = dim // heads
    inv_sqrt = 1.0 / head_dim**0.5

    normed = layer_norm(x, lp.ln1_g, lp.ln1_b, LN_EPS)
    q = add_bias(matmul(normed, lp.q_w), lp.q_b)
    k = add_bias(matmul(normed, lp.k_w), lp.k_b)
    v = add_bias(matmul(normed, lp.v_w), lp.v_b)
    ctx = []
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        scores = scale(matmul(slice_cols(q, lo, hi), transpose(slice_cols(k, lo, hi))), inv_sqrt)
        ctx.append(matmul(softmax_rows(scores), slice_cols(v, lo, hi)))
    attended = add_bias(matmul(concat_cols(ctx), lp.o_w), lp.o_b)
    x = add(x, attended)

    normed = layer_norm(x, lp.ln2_g, lp.ln2_b, LN_EPS)
    hidden = gelu(add_bias(matmul(normed, lp.fc1_w), lp.fc1_b))
    mlp = add_bias(matmul(hidden, lp.fc2_w), lp.fc2_b)
    return add(x, mlp)


def attention_maps(x: Tensor, lp: LayerParams, heads: int) -> list[Tensor]:
    """Per-head softmax attention matrices of one block, for inspection."""
    head_dim = x.shape[1] // heads
    inv_sqrt = 1.0 / head_dim**0.5
    normed = layer_norm(x, lp.ln1_g, lp.ln1_b, LN_EPS)
    q = add_bias(matmul(normed, lp.q_w), lp.q_b)
    k = add_bias(matmul(normed, lp.k_w), lp.k_b)
    maps = []
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        scores = scale(matmul(slice_cols(q, lo, hi), transpose(slice_cols(k, lo, hi))), inv_sqrt)
        maps.append(softmax_rows(scores))
    return maps


def encode(
    patches: Tensor,
    cls_in: Tensor | None,
    params: EncoderParams,
    num_layers: int | None = None,
    mac_counter: MacCounter | None = None,
) -> tuple[Tensor, Tensor]:
    """Run the branch encoder; returns (tokens, cls) with cls = LN(token 0).

    num_layers limits the stack to a prefix (None runs all layers; 0 leaves
    the embedded tokens untouched). When a mac_counter is given it observes
    only the transformer layers, not the patch projection.
    """
    if num_layers is None:
        num_layers = len(params.layers)
    if not 0 <= num_layers <= len(params.layers):
        raise ShapeError(f"num_layers {num_layers} out of range (have {len(params.layers)})")
    tokens = embed(patches, params, cls_in)
    heads = params.config.heads
    if mac_counter is not None:
        with mac_counter.counting():
            for lp in params.layers[:num_layers]:
                tokens = attention_layer(tokens, lp, heads)
    else:
        for lp in params.layers[:num_layers]:
            tokens = attention_layer(tokens, lp, heads)
    cls_row = layer_norm(slice_rows(tokens, 0, 1), params.final_g, params.final_b, LN_EPS)
    return tokens, reshape(cls_row, (params.config.embed_dim,))


def classify(cls_vec: Tensor, params: EncoderParams) -> Tensor:
    """Single affine exit head: logits = cls @ W + b."""
    cfg = params.config
    if cls_vec.shape != (cfg.embed_dim,):
        raise ShapeError(f"cls vector must have shape ({cfg.embed_dim},), got {cls_vec.shape}")
    row = add_bias(matmul(reshape(cls_vec, (1, cfg.embed_dim)), params.head_w), params.head_b)
    return reshape(row, (cfg.num_classes,))
