"""The assembled PARE network: backbone -> tokens -> SCA -> CPA, with three heads.

Heads follow the deep-supervision layout: p3 reads q straight from the
backbone, p2 reads the nodule token after SCA and p1 reads it after CPA.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers
from .backbone import NODULE, BackboneConfig, forward_backbone, init_backbone, one_hot
from .config import ModelConfig
from .context import TokenizerConfig, init_sca, init_tokenizer, sca_forward, tokenize
from .layers import Params
from .numerics import ShapeError, Tensor, ops
from .prototype import PrototypeBank, cpa_forward, init_cpa

HEAD_ORDER = ("p1", "p2", "p3")


@dataclass
class ForwardOutput:
    q: Tensor  # [B, D]
    logits: Tensor | None = None  # [B, 5, Dz, Dy, Dx]
    z_sca: Tensor | None = None  # [B, g+1, D]
    z_cpa: Tensor | None = None  # [B, g+1, D]
    heads: dict[str, Tensor] = field(default_factory=dict)  # name -> [B, 2] logits
    attention: dict[str, list] = field(default_factory=dict)


def backbone_config(cfg: ModelConfig) -> BackboneConfig:
    return BackboneConfig(cfg.level_channels, cfg.embed_dim, cfg.input_shape)


def tokenizer_config(cfg: ModelConfig) -> TokenizerConfig:
    return TokenizerConfig(cfg.window, cfg.stride, cfg.embed_dim)


def init_params(cfg: ModelConfig, seed: int, zero_residual: bool = False) -> Params:
    """All trainable parameters, created deterministically from ``seed``."""
    cfg.validate()
    rng = np.random.default_rng([seed, 0xBEEF])
    params: Params = {}
    init_backbone(params, backbone_config(cfg), rng)
    D = cfg.embed_dim
    hidden = max(1, D // 2)
    if cfg.classify:
        layers.init_mlp(params, "head_p3", [D, hidden, 2], rng)
    if cfg.use_context:
        init_tokenizer(params, cfg.input_shape, tokenizer_config(cfg), rng)
        init_sca(params, D, cfg.num_layers, cfg.mlp_ratio, rng, zero_out=zero_residual)
        layers.init_mlp(params, "head_p2", [D, hidden, 2], rng)
    if cfg.use_prototype:
        init_cpa(params, D, cfg.num_layers, cfg.mlp_ratio, rng, zero_out=zero_residual)
        layers.init_mlp(params, "head_p1", [D, hidden, 2], rng)
    return params


def heads(q: Tensor, z_sca_0: Tensor | None, z_cpa_0: Tensor | None, params: Params) -> dict[str, Tensor]:
    """Three independent 2-layer MLP classifiers (hidden D/2, GELU) -> 2-way logits."""
    out = {"p3": layers.mlp(q, params, "head_p3")}
    if z_sca_0 is not None:
        out["p2"] = layers.mlp(z_sca_0, params, "head_p2")
    if z_cpa_0 is not None:
        out["p1"] = layers.mlp(z_cpa_0, params, "head_p1")
    return out


def target_mask(mask: np.ndarray | None, cfg: ModelConfig) -> np.ndarray | None:
    """The segmentation target the model is trained on (nodule-only variant zeroes the rest)."""
    if mask is None:
        return None
    if cfg.seg_classes == "nodule":
        return np.where(mask == NODULE, NODULE, 0).astype(mask.dtype)
    return mask


def forward(
    params: Params,
    cfg: ModelConfig,
    images,
    bank: PrototypeBank | None = None,
    teacher_masks: list[np.ndarray | None] | None = None,
    keep_attention: bool = False,
) -> ForwardOutput:
    """Run every enabled stage on a batch ``images`` [B, 1, Dz, Dy, Dx].

    ``teacher_masks`` holds, per sample, a ground-truth label volume to feed
    the tokenizer instead of the predicted class probabilities (None keeps
    the prediction).
    """
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim == 4:
        x = ops.reshape(x, (1,) + x.shape)
    seg = forward_backbone(x, backbone_config(cfg), params, decode=cfg.use_segmentation)
    out = ForwardOutput(q=seg.q, logits=seg.logits)
    if not cfg.classify:
        return out
    z_sca_0 = z_cpa_0 = None
    if cfg.use_context:
        probs = ops.softmax(seg.logits, axis=1)
        if teacher_masks is not None and any(m is not None for m in teacher_masks):
            probs = _mix_teacher(probs, teacher_masks)
        seq = tokenize(x, probs, seg.q, tokenizer_config(cfg), params, nodule_position=cfg.nodule_position)
        maps: list = [] if keep_attention else None
        out.z_sca = sca_forward(seq, cfg.num_layers, params, cfg.num_heads, attention_maps=maps)
        if keep_attention:
            out.attention["sca"] = maps
        z_sca_0 = out.z_sca[:, 0, :]
        if cfg.use_prototype:
            if bank is None:
                raise ValueError("forward: prototype stage enabled but no bank given")
            maps = [] if keep_attention else None
            out.z_cpa = cpa_forward(out.z_sca, bank, cfg.num_layers, params, cfg.num_heads, attention_maps=maps)
            if keep_attention:
                out.attention["cpa"] = maps
            z_cpa_0 = out.z_cpa[:, 0, :]
    out.heads = heads(seg.q, z_sca_0, z_cpa_0, params)
    return out


def _mix_teacher(probs: Tensor, masks: list[np.ndarray | None]) -> Tensor:
    B = probs.shape[0]
    if len(masks) != B:
        raise ShapeError(f"{len(masks)} teacher masks for batch of {B}")
    onehot = np.zeros(probs.shape, dtype=probs.dtype)
    use = np.zeros((B, 1, 1, 1, 1), dtype=probs.dtype)
    for i, m in enumerate(masks):
        if m is not None:
            onehot[i] = one_hot(m, dtype=probs.dtype)
            use[i] = 1.0
    return probs * Tensor(1.0 - use, dtype=probs.dtype) + Tensor(onehot * use, dtype=probs.dtype)


def malignancy_probabilities(out: ForwardOutput) -> dict[str, np.ndarray]:
    """Softmax malignant-class probability per head, [B] each."""
    res = {}
    for name, logits in out.heads.items():
        z = logits.data.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        res[name] = p[:, 1] / p.sum(axis=1)
    return res


def ensemble(probs: dict[str, np.ndarray]) -> np.ndarray:
    """Arithmetic mean of the heads' malignant probabilities."""
    return np.mean([probs[k] for k in HEAD_ORDER if k in probs], axis=0)


def nodule_volume_fraction(out: ForwardOutput) -> np.ndarray:
    """Expected predicted nodule volume fraction: the pure-segmentation malignancy score."""
    z = out.logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p = p[:, NODULE] / p.sum(axis=1)
    return p.reshape(p.shape[0], -1).mean(axis=1)
