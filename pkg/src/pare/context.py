"""Context tokenizer and Self Context Attention (SCA).

Each overlapping window of the 5-channel context volume and of the image is
embedded by its own affine map; the two embeddings are summed into one
context token and a learned per-window position vector is added. The
nodule embedding q, with its own learned position, is prepended as row 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .backbone import NUM_CLASSES
from .layers import Params
from .numerics import ShapeError, Tensor, ops


@dataclass
class TokenizerConfig:
    window: tuple[int, int, int] = (8, 8, 8)
    stride: tuple[int, int, int] = (4, 4, 4)
    embed_dim: int = 256

    def __post_init__(self):
        self.window = tuple(int(w) for w in self.window)
        self.stride = tuple(int(s) for s in self.stride)
        for ax, (w, s) in enumerate(zip(self.window, self.stride)):
            if s > w:
                raise ValueError(f"axis {ax}: stride {s} exceeds window {w}")


def token_grid(input_shape, cfg: TokenizerConfig) -> tuple[int, int, int]:
    return ops.window_grid(input_shape, cfg.window, cfg.stride)


def num_context_tokens(input_shape, cfg: TokenizerConfig) -> int:
    gz, gy, gx = token_grid(input_shape, cfg)
    return gz * gy * gx


def init_tokenizer(params: Params, input_shape, cfg: TokenizerConfig, rng: np.random.Generator,
                   prefix: str = "context") -> None:
    g = num_context_tokens(input_shape, cfg)
    vox = int(np.prod(cfg.window))
    D = cfg.embed_dim
    layers.init_linear(params, f"{prefix}.mask_embed", NUM_CLASSES * vox, D, rng)
    layers.init_linear(params, f"{prefix}.image_embed", vox, D, rng)
    layers.add_param(params, f"{prefix}.pos", rng.standard_normal((g, D)) * 0.02)
    layers.add_param(params, f"{prefix}.pos_nodule", rng.standard_normal((1, D)) * 0.02)


def tokenize(image: Tensor, context_probs: Tensor, q: Tensor, cfg: TokenizerConfig, params: Params,
             prefix: str = "context", nodule_position: bool = True) -> Tensor:
    """-> token sequence [B, g+1, D]; row 0 is the nodule token.

    image [B, 1, Dz, Dy, Dx]; context_probs [B, 5, Dz, Dy, Dx] (softmax
    probabilities, or one-hot ground truth); q [B, D].
    """
    if context_probs.ndim != 5 or context_probs.shape[1] != NUM_CLASSES:
        raise ShapeError(f"tokenize: context must be [B, 5, Dz, Dy, Dx], got {context_probs.shape}")
    if image.shape[2:] != context_probs.shape[2:] or image.shape[0] != context_probs.shape[0]:
        raise ShapeError(f"tokenize: image {image.shape} vs context {context_probs.shape}")
    B = image.shape[0]
    D = cfg.embed_dim
    if q.shape != (B, D):
        raise ShapeError(f"tokenize: q must be [{B}, {D}], got {q.shape}")
    token_grid(image.shape[2:], cfg)  # raises naming the offending axis
    m = ops.extract_windows(context_probs, cfg.window, cfg.stride)
    x = ops.extract_windows(image, cfg.window, cfg.stride)
    tokens = layers.linear(m, params, f"{prefix}.mask_embed") + layers.linear(x, params, f"{prefix}.image_embed")
    pos = params[f"{prefix}.pos"]
    if pos.shape[0] != tokens.shape[1]:
        raise ShapeError(f"tokenize: {tokens.shape[1]} windows but {pos.shape[0]} position vectors")
    tokens = tokens + pos
    head = ops.reshape(q, (B, 1, D))
    if nodule_position:
        head = head + params[f"{prefix}.pos_nodule"]
    return ops.concat([head, tokens], axis=1)


def init_sca(params: Params, dim: int, num_layers: int, mlp_ratio: int, rng: np.random.Generator,
             prefix: str = "sca", zero_out: bool = False) -> None:
    for layer in range(num_layers):
        layers.init_transformer_block(params, f"{prefix}.{layer}", dim, mlp_ratio, rng, zero_out=zero_out)


def sca_forward(seq: Tensor, num_layers: int, params: Params, heads: int, prefix: str = "sca",
                attention_maps: list | None = None) -> Tensor:
    """L pre-norm self-attention blocks over all g+1 tokens."""
    if num_layers < 1:
        raise ValueError("SCA needs at least one layer")
    if seq.shape[-1] % heads:
        raise ValueError(f"embedding dim {seq.shape[-1]} not divisible by {heads} heads")
    z = seq
    for layer in range(num_layers):
        z = layers.transformer_block(z, params, f"{prefix}.{layer}", heads, weights_out=attention_maps)
    return z
