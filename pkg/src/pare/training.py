"""Training loop, checkpointing, prediction and evaluation.

One step runs the whole forward (backbone, tokens, SCA, CPA and the three
heads), moves the nearest prototype of each sample's class toward its
embedding, sums the segmentation loss and the head cross-entropies into J,
back-propagates and takes one SGD step.

Every random choice of step t (batch indices, teacher forcing, flips) comes
from a generator seeded by (seed, t, stream), so a resumed run replays the
uninterrupted one exactly without storing generator state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .backbone import seg_loss
from .config import Config, config_from_text
from .data.phantom import VolumeSample
from .layers import Params
from .metrics import EvalReport, stratified_report
from .model import (HEAD_ORDER, ensemble, forward, init_params, malignancy_probabilities,
                    nodule_volume_fraction, target_mask)
from .numerics import ShapeError, Tensor, backward, global_grad_norm, no_grad, ops, sgd_step, warmup_cosine_lr
from .prototype import PrototypeBank, init_bank, momentum_update, random_bank

# independent random streams per iteration
_BATCH, _TEACHER, _FLIP = 1, 2, 3


class NonFiniteLossError(FloatingPointError):
    """Raised when J or the gradient norm stops being finite."""

    def __init__(self, report: "StepReport"):
        super().__init__(f"non-finite loss at iteration {report.iteration}: {report.line()}")
        self.report = report


@dataclass
class StepReport:
    iteration: int
    seg_loss: float
    cls_loss_p1: float
    cls_loss_p2: float
    cls_loss_p3: float
    J: float
    grad_norm: float
    lr: float

    FIELDS = ("iteration", "seg_loss", "cls_loss_p1", "cls_loss_p2", "cls_loss_p3", "J", "grad_norm", "lr")

    def line(self) -> str:
        """``key=value`` pairs; floats in repr form so a log round-trips exactly."""
        return " ".join(f"{k}={getattr(self, k)!r}" for k in self.FIELDS)

    @classmethod
    def parse(cls, line: str) -> "StepReport":
        kv = dict(item.split("=", 1) for item in line.split())
        return cls(int(kv["iteration"]), *(float(kv[k]) for k in cls.FIELDS[1:]))


@dataclass
class TrainState:
    params: Params
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    bank: PrototypeBank | None = None
    iteration: int = 0
    warmup: dict[int, list[np.ndarray]] = field(default_factory=lambda: {0: [], 1: []})


@dataclass
class Batch:
    indices: np.ndarray
    images: np.ndarray  # [B, 1, Dz, Dy, Dx]
    labels: np.ndarray  # [B]
    masks: list[np.ndarray | None]  # segmentation targets
    teacher: list[np.ndarray | None]  # ground truth fed to the tokenizer


def init_state(cfg: Config) -> TrainState:
    cfg.validate()
    m = cfg.model
    params = init_params(m, cfg.train.seed)
    bank = None
    if m.use_prototype:
        bank = random_bank(m.num_prototypes, m.embed_dim, cfg.train.lam,
                           np.random.default_rng([cfg.train.seed, 0xBA4C]))
    return TrainState(params=params, bank=bank)


def _rng(cfg: Config, iteration: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.train.seed, iteration, stream])


def sample_indices(labels: np.ndarray, iteration: int, cfg: Config) -> np.ndarray:
    """Batch indices for step ``iteration``, sorted so the batch follows dataset order."""
    rng = _rng(cfg, iteration, _BATCH)
    B = cfg.train.batch_size
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if cfg.train.balanced_sampling and len(pos) and len(neg):
        n_pos = B // 2
        picks = []
        for pool, k in ((neg, B - n_pos), (pos, n_pos)):
            picks.append(rng.choice(pool, size=k, replace=len(pool) < k))
        idx = np.concatenate(picks)
    else:
        idx = rng.choice(len(labels), size=B, replace=len(labels) < B)
    return np.sort(idx)


def make_batch(samples: Sequence[VolumeSample], indices, iteration: int, cfg: Config,
               train: bool = True) -> Batch:
    m, t = cfg.model, cfg.train
    chosen = [samples[i] for i in indices]
    for s in chosen:
        if tuple(s.image.shape) != tuple(m.input_shape):
            raise ShapeError(f"sample {s.id}: image shape {s.image.shape} vs model input {tuple(m.input_shape)}")
    images = [s.image for s in chosen]
    masks = [target_mask(s.mask, m) for s in chosen]
    teacher: list[np.ndarray | None] = [None] * len(chosen)
    if train:
        if t.augment_flips:
            rng = _rng(cfg, iteration, _FLIP)
            for i in range(len(chosen)):
                axes = tuple(ax for ax in range(3) if rng.random() < 0.5)
                if axes:
                    images[i] = np.flip(images[i], axes)
                    if masks[i] is not None:
                        masks[i] = np.flip(masks[i], axes)
        u = _rng(cfg, iteration, _TEACHER).random(len(chosen))
        teacher = [mk if (mk is not None and u[i] < t.teacher_forcing_prob) else None for i, mk in enumerate(masks)]
    return Batch(
        indices=np.asarray(indices),
        images=np.stack(images)[:, None].astype(np.float32),
        labels=np.array([s.label for s in chosen], dtype=np.int64),
        masks=[None if mk is None else np.ascontiguousarray(mk) for mk in masks],
        teacher=[None if mk is None else np.ascontiguousarray(mk) for mk in teacher],
    )


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean 2-class cross-entropy of [B, 2] logits."""
    onehot = np.eye(logits.shape[1], dtype=logits.dtype)[labels]
    return -ops.mean(ops.sum(ops.log_softmax(logits, axis=1) * Tensor(onehot, dtype=logits.dtype), axis=1))


def _update_bank(state: TrainState, cfg: Config, q: np.ndarray, labels: np.ndarray) -> None:
    t = cfg.train
    stamp = state.iteration + 1
    for qi, yi in zip(q, labels):
        momentum_update(state.bank, qi, int(yi), iteration=stamp)
    if t.warmup_W > 0 and state.iteration < t.warmup_W:
        for qi, yi in zip(q, labels):
            buf = state.warmup[int(yi)]
            buf.append(np.array(qi, dtype=np.float32))
            if len(buf) > t.warmup_buffer:
                del buf[0]
        if state.iteration + 1 == t.warmup_W:
            ben, mal = state.warmup[0], state.warmup[1]
            if ben and mal:
                bank = init_bank(np.stack(ben), np.stack(mal), cfg.model.num_prototypes, t.lam,
                                 seed=[t.seed, 0xC1])
                bank.last_update_benign[:] = stamp
                bank.last_update_malignant[:] = stamp
                state.bank = bank
            state.warmup = {0: [], 1: []}


def objective(params: Params, bank: PrototypeBank | None, batch: Batch, cfg: Config):
    """Forward pass and losses: (output, seg loss, {head: cls loss}, J).

    Heads left unsupervised (deep supervision off) contribute an exact 0.
    """
    m, t = cfg.model, cfg.train
    out = forward(params, m, batch.images, bank, teacher_masks=batch.teacher)
    zero = Tensor(0.0)
    seg = seg_loss(out.logits, batch.masks) if m.use_segmentation else zero
    cls = {}
    for name in HEAD_ORDER:
        supervised = name in out.heads and (t.deep_supervision or name == m.final_head)
        cls[name] = cross_entropy(out.heads[name], batch.labels) if supervised else zero
    J = seg + cls["p1"] + cls["p2"] + cls["p3"]
    return out, seg, cls, J


def train_step(state: TrainState, batch: Batch, cfg: Config) -> StepReport:
    """One iteration; mutates ``state`` and returns the step's losses."""
    t = cfg.train
    if len(batch.labels) == 0:
        raise ValueError("train_step: empty batch")
    lr = warmup_cosine_lr(state.iteration, t.total_iters, t.base_lr, t.warmup_frac)
    for p in state.params.values():
        p.grad = None

    out, seg, cls, J = objective(state.params, state.bank, batch, cfg)

    def report(gnorm: float) -> StepReport:
        return StepReport(
            iteration=state.iteration + 1,
            seg_loss=float(seg.data), cls_loss_p1=float(cls["p1"].data), cls_loss_p2=float(cls["p2"].data),
            cls_loss_p3=float(cls["p3"].data), J=float(J.data), grad_norm=gnorm, lr=lr,
        )

    # a diverged forward must not reach the bank
    if not (np.isfinite(J.data) and np.all(np.isfinite(out.q.data))):
        raise NonFiniteLossError(report(float("nan")))
    if state.bank is not None:
        _update_bank(state, cfg, out.q.data, batch.labels)

    grads: dict[str, np.ndarray] = {}
    if J.requires_grad:
        backward(J)
        grads = {k: p.grad for k, p in state.params.items() if p.grad is not None}
    gnorm = global_grad_norm(grads)
    rep = report(gnorm)
    if not math.isfinite(gnorm):
        raise NonFiniteLossError(rep)
    if t.grad_clip > 0 and gnorm > t.grad_clip:
        scale = np.float32(t.grad_clip / gnorm)
        grads = {k: g * scale for k, g in grads.items()}
    sgd_step(state.params, grads, lr, t.momentum, state.velocity)
    state.iteration += 1
    return rep


# checkpoints

def state_to_checkpoint(state: TrainState, cfg: Config) -> ckpt_io.CheckpointData:
    tensors: dict[str, np.ndarray] = {}
    for k, p in state.params.items():
        tensors[f"param/{k}"] = p.data
    for k, v in state.velocity.items():
        tensors[f"velocity/{k}"] = v
    if state.bank is not None:
        b = state.bank
        tensors["bank/benign"] = b.benign
        tensors["bank/malignant"] = b.malignant
        tensors["bank/last_update_benign"] = b.last_update_benign
        tensors["bank/last_update_malignant"] = b.last_update_malignant
    D = cfg.model.embed_dim
    for label, name in ((0, "benign"), (1, "malignant")):
        buf = state.warmup[label]
        tensors[f"warmup/{name}"] = np.stack(buf) if buf else np.zeros((0, D), dtype=np.float32)
    return ckpt_io.CheckpointData(cfg.canonical_text(), state.iteration, tensors)


def save_checkpoint(state: TrainState, cfg: Config, path) -> Path:
    return ckpt_io.save(state_to_checkpoint(state, cfg), path)


def load_checkpoint(path) -> tuple[Config, TrainState]:
    data = ckpt_io.load(path)
    cfg = config_from_text(data.config_text)
    state = init_state(cfg)
    for k, p in state.params.items():
        key = f"param/{k}"
        if key not in data.tensors:
            raise ckpt_io.CheckpointError(f"{path}: missing record {key!r}")
        if data.tensors[key].shape != p.shape:
            raise ckpt_io.CheckpointError(f"{path}: record {key!r} has shape {data.tensors[key].shape}, expected {p.shape}")
        p.data = data.tensors[key]
    state.velocity = {k[len("velocity/"):]: v for k, v in data.tensors.items() if k.startswith("velocity/")}
    if cfg.model.use_prototype:
        ts = data.tensors
        state.bank = PrototypeBank(
            ts["bank/benign"], ts["bank/malignant"], cfg.train.lam,
            ts["bank/last_update_benign"].astype(np.int64), ts["bank/last_update_malignant"].astype(np.int64),
        )
    state.warmup = {
        0: list(data.tensors.get("warmup/benign", np.zeros((0, 1)))),
        1: list(data.tensors.get("warmup/malignant", np.zeros((0, 1)))),
    }
    state.iteration = data.iteration
    return cfg, state


# training loop

def train(
    cfg: Config,
    samples: Sequence[VolumeSample],
    out_dir=None,
    state: TrainState | None = None,
    log: Callable[[str], None] | None = None,
    stop_at: int | None = None,
) -> tuple[TrainState, list[StepReport]]:
    """Run from ``state.iteration`` (fresh state when None) up to ``total_iters``.

    With ``out_dir`` the resolved config, a ``train_log.txt`` with one
    key=value line per step and checkpoints every ``checkpoint_every`` steps
    (``ckpt_<iter>.pck`` plus ``last.pck``) are written there.
    """
    cfg.validate()
    if not samples:
        raise ValueError("train: no training samples")
    state = init_state(cfg) if state is None else state
    labels = np.array([s.label for s in samples])
    end = cfg.train.total_iters if stop_at is None else min(stop_at, cfg.train.total_iters)
    out = None
    logf = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.canonical_text() + "\n")
        logf = open(out / "train_log.txt", "a" if state.iteration else "w")
    reports = []
    try:
        while state.iteration < end:
            it = state.iteration
            batch = make_batch(samples, sample_indices(labels, it, cfg), it, cfg)
            report = train_step(state, batch, cfg)
            reports.append(report)
            line = report.line()
            if logf is not None:
                logf.write(line + "\n")
                logf.flush()
            if log is not None:
                log(line)
            if out is not None and (state.iteration % cfg.train.checkpoint_every == 0 or state.iteration == end):
                save_checkpoint(state, cfg, out / f"ckpt_{state.iteration:06d}.pck")
                save_checkpoint(state, cfg, out / "last.pck")
    finally:
        if logf is not None:
            logf.close()
    return state, reports


# inference

@dataclass
class Predictions:
    scores: dict[str, dict[str, float]]  # id -> column -> malignancy score
    seg_labels: dict[str, np.ndarray] = field(default_factory=dict)  # id -> argmax label volume
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)  # id -> q


def predict_samples(state: TrainState, cfg: Config, samples: Sequence[VolumeSample],
                    batch_size: int | None = None, keep_seg: bool = False) -> Predictions:
    """Scores per sample: every head, their ensemble and the nodule-volume score when segmenting."""
    m = cfg.model
    bs = batch_size or cfg.train.eval_batch_size
    result = Predictions({})
    with no_grad():
        for start in range(0, len(samples), bs):
            chunk = list(range(start, min(start + bs, len(samples))))
            batch = make_batch(samples, chunk, 0, cfg, train=False)
            out = forward(state.params, m, batch.images, state.bank)
            probs = malignancy_probabilities(out)
            vol = nodule_volume_fraction(out) if m.use_segmentation else None
            ens = ensemble(probs) if probs else None
            seg = out.logits.data.argmax(axis=1).astype(np.uint8) if (keep_seg and out.logits is not None) else None
            for j, i in enumerate(chunk):
                row = {k: float(probs[k][j]) for k in HEAD_ORDER if k in probs}
                if ens is not None:
                    row["ensemble"] = float(ens[j])
                if vol is not None:
                    row["seg_volume"] = float(vol[j])
                sid = samples[i].id
                result.scores[sid] = row
                result.embeddings[sid] = out.q.data[j].copy()
                if seg is not None:
                    result.seg_labels[sid] = seg[j]
    return result


def main_column(cfg: Config) -> str:
    """The score a model is judged by: its final head, or the nodule-volume rule without heads."""
    return cfg.model.final_head or "seg_volume"


def evaluate(state: TrainState, cfg: Config, samples: Sequence[VolumeSample]) -> EvalReport:
    preds = predict_samples(state, cfg, samples, keep_seg=cfg.model.use_segmentation)
    pairs = [(preds.seg_labels[s.id], target_mask(s.mask, cfg.model)) for s in samples
             if s.mask is not None and s.id in preds.seg_labels]
    return stratified_report(preds.scores, samples, main=main_column(cfg), dice_pairs=pairs or None)


class Predictor:
    """Single-volume malignancy probability from a saved checkpoint."""

    def __init__(self, path):
        self.cfg, self.state = load_checkpoint(path)

    def predict(self, image, ensemble_heads: bool = False) -> float:
        """Final-head probability, or the mean over heads with ``ensemble_heads``."""
        img = np.asarray(image, dtype=np.float32)
        if img.ndim == 4 and img.shape[0] == 1:
            img = img[0]
        if tuple(img.shape) != tuple(self.cfg.model.input_shape):
            raise ShapeError(f"predict: image shape {img.shape} vs checkpoint input {tuple(self.cfg.model.input_shape)}")
        if not self.cfg.model.classify:
            raise ValueError("predict: checkpoint has no classification head")
        with no_grad():
            out = forward(self.state.params, self.cfg.model, img[None, None], self.state.bank)
        probs = malignancy_probabilities(out)
        if ensemble_heads:
            return float(ensemble(probs)[0])
        return float(probs[self.cfg.model.final_head][0])
