"""U-shaped encoder-decoder: 5-class context segmentation plus the nodule embedding q.

Each level runs two conv3x3x3 -> per-channel LayerNorm -> GELU blocks; the
norm standardises every channel over its spatial extent. Below the top level
the first block's conv has stride 2. The decoder upsamples with a
2x2x2 transposed conv, concatenates the skip at equal resolution and runs
two more blocks. q is an affine map of the globally pooled bottleneck.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import layers
from .layers import Params
from .numerics import ShapeError, Tensor, ops

NUM_CLASSES = 5
CLASS_NAMES = ("background", "lung", "nodule", "vessel", "trachea")
NODULE = 2

DICE_SMOOTH = 1e-5


@dataclass
class BackboneConfig:
    level_channels: tuple[int, ...] = (16, 32, 64, 128)
    embed_dim: int = 256
    input_shape: tuple[int, int, int] = (32, 48, 48)

    def __post_init__(self):
        self.level_channels = tuple(int(c) for c in self.level_channels)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if len(self.level_channels) < 2:
            raise ValueError("backbone needs at least 2 levels")
        factor = 2 ** (len(self.level_channels) - 1)
        for ax, d in enumerate(self.input_shape):
            if d % factor:
                raise ValueError(
                    f"input axis {ax} of size {d} not divisible by 2^(levels-1) = {factor}"
                )

    def level_shapes(self) -> list[tuple[int, int, int]]:
        return [tuple(d // 2**i for d in self.input_shape) for i in range(len(self.level_channels))]


@dataclass
class SegOutput:
    """Batched backbone output. ``logits`` is None when the decoder is skipped."""

    logits: Tensor | None  # [B, 5, Dz, Dy, Dx]
    q: Tensor  # [B, D]
    skip_shapes: list[tuple[int, ...]] = field(default_factory=list)


def init_backbone(params: Params, cfg: BackboneConfig, rng: np.random.Generator, prefix: str = "backbone") -> None:
    ch = cfg.level_channels
    c_prev = 1
    for i, c in enumerate(ch):
        layers.init_conv(params, f"{prefix}.enc{i}.conv0", c_prev, c, 3, rng)
        layers.init_layer_norm(params, f"{prefix}.enc{i}.ln0", c)
        layers.init_conv(params, f"{prefix}.enc{i}.conv1", c, c, 3, rng)
        layers.init_layer_norm(params, f"{prefix}.enc{i}.ln1", c)
        c_prev = c
    for i in reversed(range(len(ch) - 1)):
        layers.init_conv(params, f"{prefix}.dec{i}.up", ch[i + 1], ch[i], 2, rng, transposed=True)
        layers.init_conv(params, f"{prefix}.dec{i}.conv0", 2 * ch[i], ch[i], 3, rng)
        layers.init_layer_norm(params, f"{prefix}.dec{i}.ln0", ch[i])
        layers.init_conv(params, f"{prefix}.dec{i}.conv1", ch[i], ch[i], 3, rng)
        layers.init_layer_norm(params, f"{prefix}.dec{i}.ln1", ch[i])
    layers.init_conv(params, f"{prefix}.seg_head", ch[0], NUM_CLASSES, 1, rng)
    layers.init_linear(params, f"{prefix}.embed", ch[-1], cfg.embed_dim, rng)


def channel_norm(x: Tensor, params: Params, name: str) -> Tensor:
    """LayerNorm of each channel over its flattened spatial extent, per-channel affine."""
    B, C = x.shape[:2]
    h = ops.reshape(x, (B, C, int(np.prod(x.shape[2:]))))
    w = ops.reshape(params[f"{name}.weight"], (C, 1))
    b = ops.reshape(params[f"{name}.bias"], (C, 1))
    return ops.reshape(ops.layer_norm(h, w, b, axis=-1), x.shape)


def _block(x: Tensor, params: Params, name: str, ln: str, stride: int = 1) -> Tensor:
    # normalising before the nonlinearity keeps the pooled bottleneck sample-dependent
    x = ops.conv3d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, padding=1)
    return ops.gelu(channel_norm(x, params, ln))


def forward_backbone(
    image: Tensor,
    cfg: BackboneConfig,
    params: Params,
    decode: bool = True,
    prefix: str = "backbone",
) -> SegOutput:
    """image [B, 1, Dz, Dy, Dx] (or a single [1, Dz, Dy, Dx]) -> SegOutput."""
    if image.ndim == 4:
        image = ops.reshape(image, (1,) + image.shape)
    if image.ndim != 5 or image.shape[1] != 1 or tuple(image.shape[2:]) != cfg.input_shape:
        raise ShapeError(
            f"backbone: expected image [B, 1, {', '.join(map(str, cfg.input_shape))}], got {image.shape}"
        )
    skips = []
    x = image
    for i in range(len(cfg.level_channels)):
        x = _block(x, params, f"{prefix}.enc{i}.conv0", f"{prefix}.enc{i}.ln0", stride=1 if i == 0 else 2)
        x = _block(x, params, f"{prefix}.enc{i}.conv1", f"{prefix}.enc{i}.ln1")
        skips.append(x)
    q = layers.linear(ops.global_avg_pool(x), params, f"{prefix}.embed")
    skip_shapes = [tuple(s.shape[2:]) for s in skips]
    if not decode:
        return SegOutput(None, q, skip_shapes)
    for i in reversed(range(len(cfg.level_channels) - 1)):
        x = ops.conv_transpose3d(x, params[f"{prefix}.dec{i}.up.weight"], params[f"{prefix}.dec{i}.up.bias"], stride=2)
        if x.shape[2:] != skips[i].shape[2:]:
            raise ShapeError(f"decoder level {i}: upsampled {x.shape} vs skip {skips[i].shape}")
        x = ops.concat([x, skips[i]], axis=1)
        x = _block(x, params, f"{prefix}.dec{i}.conv0", f"{prefix}.dec{i}.ln0")
        x = _block(x, params, f"{prefix}.dec{i}.conv1", f"{prefix}.dec{i}.ln1")
    logits = ops.conv3d(x, params[f"{prefix}.seg_head.weight"], params[f"{prefix}.seg_head.bias"])
    return SegOutput(logits, q, skip_shapes)


def one_hot(mask: np.ndarray, dtype=np.float32) -> np.ndarray:
    """[..., Dz, Dy, Dx] labels -> [..., 5, Dz, Dy, Dx] one-hot."""
    mask = np.asarray(mask)
    check_mask(mask)
    eye = np.eye(NUM_CLASSES, dtype=dtype)
    out = eye[mask]  # [..., Dz, Dy, Dx, 5]
    return np.moveaxis(out, -1, -4)


def check_mask(mask: np.ndarray) -> None:
    if mask.size and (mask.min() < 0 or mask.max() >= NUM_CLASSES):
        bad = mask[(mask < 0) | (mask >= NUM_CLASSES)].ravel()[0]
        raise ValueError(f"mask value {bad} outside 0..{NUM_CLASSES - 1}")


def seg_loss(logits: Tensor, masks: Sequence[np.ndarray | None]) -> Tensor:
    """Mean of soft Dice loss (averaged over the 5 classes) and voxelwise cross-entropy.

    ``logits`` [B, 5, ...]; ``masks`` has one entry per sample, None when the
    sample has no segmentation label. Samples without masks get weight 0 and
    receive no gradient; the loss averages over the labelled samples. With no
    labelled sample at all the result is an exact constant 0.
    """
    if logits.ndim == 4:
        logits = ops.reshape(logits, (1,) + logits.shape)
    if len(masks) != logits.shape[0]:
        raise ShapeError(f"seg_loss: {len(masks)} masks for batch of {logits.shape[0]}")
    idx = [i for i, m in enumerate(masks) if m is not None]
    if not idx:
        return Tensor(0.0, dtype=logits.dtype)
    target = np.stack([np.asarray(masks[i]) for i in idx])
    if target.shape[1:] != logits.shape[2:]:
        raise ShapeError(f"seg_loss: mask shape {target.shape[1:]} vs logits {logits.shape}")
    onehot = Tensor(one_hot(target, dtype=logits.dtype), dtype=logits.dtype)
    sel = logits if len(idx) == logits.shape[0] else ops.getitem(logits, np.asarray(idx))
    spatial = tuple(range(2, sel.ndim))

    logp = ops.log_softmax(sel, axis=1)
    ce = -ops.mean(ops.sum(logp * onehot, axis=1))

    probs = ops.softmax(sel, axis=1)
    inter = ops.sum(probs * onehot, axis=spatial)
    denom = ops.sum(probs, axis=spatial) + ops.sum(onehot, axis=spatial)
    dice = (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)  # [n, 5]
    dice_loss = 1.0 - ops.mean(dice)
    return 0.5 * (dice_loss + ce)
