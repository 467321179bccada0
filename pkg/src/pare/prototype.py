"""Benign/malignant prototype banks and Cross Prototype Attention (CPA).

Prototypes are cluster centres of nodule embeddings, kept in two class
banks of N/2 rows each. They move only through the nearest-prototype
momentum rule; CPA reads them through a stop-gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers
from .layers import Params
from .numerics import ShapeError, Tensor


@dataclass
class KMeansResult:
    centers: np.ndarray  # [k, D]
    assignment: np.ndarray  # [n]
    trace: list[float]  # sum of squared Euclidean distances, one entry per iteration
    distance_trace: list[float] = field(default_factory=list)  # sum of plain distances
    iterations: int = 0


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # explicit differences rather than the |a|^2 - 2ab + |b|^2 expansion: no cancellation error
    out = np.empty((points.shape[0], centers.shape[0]))
    for j, c in enumerate(centers):
        diff = points - c
        out[:, j] = np.einsum("ij,ij->i", diff, diff)
    return out


def kmeans(points, k: int, max_iter: int = 100, seed=0) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Each cluster centre is the mean of its members. A centre that loses all
    members is re-seeded at the point currently farthest from its own centre.
    Stops at an assignment fixpoint or after ``max_iter`` iterations. The
    trace records the clustering objective after every assignment step and
    never increases.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"kmeans: points must be [n, D], got shape {x.shape}")
    n = x.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"kmeans: need n >= k >= 1, got n={n}, k={k}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[j:j + 1])[:, 0])

    trace: list[float] = []
    dtrace: list[float] = []
    assignment = np.full(n, -1)
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, centers)
        new_assignment = d2.argmin(axis=1)
        best = d2[np.arange(n), new_assignment]
        trace.append(float(best.sum()))
        dtrace.append(float(np.sqrt(best).sum()))
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        counts = np.bincount(assignment, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assignment, x)
        empty = np.flatnonzero(counts == 0)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        if empty.size:
            order = np.argsort(-best, kind="stable")
            for j, idx in zip(empty, order):
                centers[j] = x[idx]
            assignment = np.full(n, -1)  # force one more assignment pass
    return KMeansResult(centers, assignment, trace, dtrace, it)


def kmeans_objective(points, centers, assignment) -> float:
    """Sum over clusters of squared Euclidean distances to the cluster centre."""
    x = np.asarray(points, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    return float(np.sum((x - c[np.asarray(assignment)]) ** 2))


@dataclass
class PrototypeBank:
    benign: np.ndarray  # [N/2, D]
    malignant: np.ndarray  # [N/2, D]
    lam: float = 0.95
    last_update_benign: np.ndarray | None = None
    last_update_malignant: np.ndarray | None = None

    def __post_init__(self):
        self.benign = np.asarray(self.benign, dtype=np.float32)
        self.malignant = np.asarray(self.malignant, dtype=np.float32)
        if self.benign.shape != self.malignant.shape or self.benign.ndim != 2 or not len(self.benign):
            raise ShapeError(
                f"prototype banks must be equal nonempty [N/2, D], got {self.benign.shape} and {self.malignant.shape}"
            )
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"momentum factor must be in (0, 1), got {self.lam}")
        if self.last_update_benign is None:
            self.last_update_benign = np.zeros(len(self.benign), dtype=np.int64)
        if self.last_update_malignant is None:
            self.last_update_malignant = np.zeros(len(self.malignant), dtype=np.int64)

    @property
    def num_prototypes(self) -> int:
        return 2 * len(self.benign)

    @property
    def dim(self) -> int:
        return self.benign.shape[1]

    def bank(self, label: int) -> np.ndarray:
        return self.benign if label == 0 else self.malignant

    def stacked(self) -> np.ndarray:
        """[N, D]: benign rows first, then malignant."""
        return np.concatenate([self.benign, self.malignant], axis=0)

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(
            self.benign.copy(), self.malignant.copy(), self.lam,
            self.last_update_benign.copy(), self.last_update_malignant.copy(),
        )


def random_bank(num_prototypes: int, dim: int, lam: float, rng: np.random.Generator) -> PrototypeBank:
    """Random unit-norm rows; used before the first clustering."""
    if num_prototypes % 2 or num_prototypes < 2:
        raise ValueError(f"number of prototypes must be even and >= 2, got {num_prototypes}")
    rows = rng.standard_normal((num_prototypes, dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    half = num_prototypes // 2
    return PrototypeBank(rows[:half], rows[half:], lam)


def _pad(embeds: np.ndarray, need: int, rng: np.random.Generator, jitter: float) -> np.ndarray:
    if len(embeds) >= need:
        return embeds
    extra = embeds[rng.integers(len(embeds), size=need - len(embeds))]
    extra = extra + rng.normal(0.0, jitter, extra.shape)
    return np.concatenate([embeds, extra], axis=0)


def init_bank(benign_embeds, malignant_embeds, num_prototypes: int, lam: float = 0.95,
              seed=0, max_iter: int = 100, jitter: float = 0.01) -> PrototypeBank:
    """Cluster each class's embeddings into N/2 prototypes.

    A class with fewer than N/2 embeddings is padded by resampling with
    Gaussian jitter.
    """
    if num_prototypes % 2 or num_prototypes < 2:
        raise ValueError(f"number of prototypes must be even and >= 2, got {num_prototypes}")
    half = num_prototypes // 2
    rng = np.random.default_rng(seed)
    banks = []
    for name, e in (("benign", benign_embeds), ("malignant", malignant_embeds)):
        e = np.asarray(e, dtype=np.float64)
        if e.ndim != 2 or len(e) == 0:
            raise ValueError(f"init_bank: no {name} embeddings")
        e = _pad(e, half, rng, jitter)
        banks.append(kmeans(e, half, max_iter=max_iter, seed=rng.integers(2**32)).centers)
    return PrototypeBank(banks[0], banks[1], lam)


def nearest(bank_rows: np.ndarray, q: np.ndarray) -> int:
    """Index of the Euclidean-nearest row; ties go to the lowest index."""
    d = np.sum((bank_rows.astype(np.float64) - q.astype(np.float64)) ** 2, axis=1)
    return int(np.argmin(d))


def momentum_update(bank: PrototypeBank, q, label: int, iteration: int = 0) -> int:
    """Move the class bank's nearest prototype toward q: P <- lam*P + (1-lam)*q.

    Written as P + (1-lam)(q - P) so that q == P is an exact fixed point.
    Mutates ``bank`` in place and returns the updated row index.
    """
    q = np.asarray(q, dtype=np.float32).reshape(-1)
    if q.shape[0] != bank.dim:
        raise ShapeError(f"momentum_update: q has dim {q.shape[0]}, bank has {bank.dim}")
    if not np.all(np.isfinite(q)):
        raise ValueError("momentum_update: non-finite embedding")
    rows = bank.bank(label)
    j = nearest(rows, q)
    step = np.float32(1.0 - bank.lam)
    rows[j] = rows[j] + step * (q - rows[j])
    stamps = bank.last_update_benign if label == 0 else bank.last_update_malignant
    stamps[j] = iteration
    return j


def init_cpa(params: Params, dim: int, num_layers: int, mlp_ratio: int, rng: np.random.Generator,
             prefix: str = "cpa", zero_out: bool = False) -> None:
    for layer in range(num_layers):
        layers.init_transformer_block(params, f"{prefix}.{layer}", dim, mlp_ratio, rng, zero_out=zero_out)


def cpa_forward(seq: Tensor, bank: PrototypeBank, num_layers: int, params: Params, heads: int,
                prefix: str = "cpa", attention_maps: list | None = None) -> Tensor:
    """L pre-norm cross-attention blocks: every token queries the N prototypes.

    The bank enters as a constant, so no gradient reaches it.
    """
    if num_layers < 1:
        raise ValueError("CPA needs at least one layer")
    if seq.shape[-1] != bank.dim:
        raise ShapeError(f"cpa: token dim {seq.shape[-1]} vs prototype dim {bank.dim}")
    memory = Tensor(bank.stacked(), dtype=seq.dtype)
    z = seq
    for layer in range(num_layers):
        z = layers.transformer_block(z, params, f"{prefix}.{layer}", heads, memory=memory,
                                     weights_out=attention_maps)
    return z
