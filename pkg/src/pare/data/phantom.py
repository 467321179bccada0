"""Synthetic CT-like nodule patches with a full 5-class context mask.

Each phantom is a lung ellipsoid (partly cut by the chest wall), a few
tubular vessels, one trachea tube and one nodule. The nodule's label drives
three cues: its diameter distribution, how likely a vessel touches it, and
how spiculated its boundary is. The cues overlap between classes on purpose.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..backbone import NODULE

BACKGROUND, LUNG, VESSEL, TRACHEA = 0, 1, 3, 4
# background, lung, nodule, vessel, trachea
BASE_INTENSITY = np.array([0.05, 0.15, 0.65, 0.55, 0.05], dtype=np.float64)
BLUR_SIGMA = 1.0
NOISE_SIGMA = 0.03
MIN_DIAMETER_MM = 4.0
MAX_ATTEMPTS = 100


class PhantomError(RuntimeError):
    """Generation failed after the allowed number of attempts."""


@dataclass
class PhantomSpec:
    grid_shape: tuple[int, int, int] = (16, 24, 24)
    voxel_mm: float = 2.0
    malignant_fraction: float = 0.5
    mask_availability_prob: float = 0.8
    # log-normal diameter distributions (median mm, log-sd); clipped to [4, max_diameter_mm]
    benign_median_mm: float = 8.0
    malignant_median_mm: float = 14.0
    diameter_log_sd: float = 0.35
    max_diameter_mm: float = 26.0
    # probability that a vessel touches the nodule
    contact_prob_benign: float = 0.30
    contact_prob_malignant: float = 0.65
    # spiculation amplitude drawn uniformly from these ranges (fraction of radius)
    spiculation_benign: tuple[float, float] = (0.0, 0.4)
    spiculation_malignant: tuple[float, float] = (0.1, 0.5)
    num_vessels: tuple[int, int] = (2, 4)
    seed: int = 0

    REQUIRED = ("grid_shape", "voxel_mm", "malignant_fraction", "mask_availability_prob")

    def validate(self) -> "PhantomSpec":
        self.grid_shape = tuple(int(v) for v in self.grid_shape)
        if len(self.grid_shape) != 3 or min(self.grid_shape) < 8:
            raise ValueError(f"grid_shape must be three dims >= 8, got {self.grid_shape}")
        for name in ("malignant_fraction", "mask_availability_prob", "contact_prob_benign",
                     "contact_prob_malignant"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.voxel_mm <= 0:
            raise ValueError(f"voxel_mm must be positive, got {self.voxel_mm}")
        for name in ("spiculation_benign", "spiculation_malignant", "num_vessels"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be an ordered non-negative range, got {(lo, hi)}")
        if self.max_diameter_mm <= MIN_DIAMETER_MM:
            raise ValueError(f"max_diameter_mm must exceed {MIN_DIAMETER_MM}")
        return self

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown phantom spec field(s): {sorted(unknown)}")
        for req in cls.REQUIRED:
            if req not in d:
                raise ValueError(f"phantom spec is missing required field {req!r}")
        kw = {k: tuple(v) if isinstance(getattr(cls(), k), tuple) else v for k, v in d.items()}
        return cls(**kw).validate()


@dataclass
class VolumeSample:
    id: str
    image: np.ndarray  # [Dz, Dy, Dx] float32 in [0, 1]
    mask: np.ndarray | None  # [Dz, Dy, Dx] uint8 in 0..4
    label: int
    diameter_mm: float
    voxel_mm: float = 1.0
    features: dict = field(default_factory=dict)  # generator internals: vessel_contact, spiculation

    def __eq__(self, other):
        if not isinstance(other, VolumeSample):
            return NotImplemented
        same_mask = (self.mask is None and other.mask is None) or (
            self.mask is not None and other.mask is not None and np.array_equal(self.mask, other.mask)
        )
        return (
            self.id == other.id and self.label == other.label and self.diameter_mm == other.diameter_mm
            and self.voxel_mm == other.voxel_mm and self.features == other.features
            and self.image.dtype == other.image.dtype and np.array_equal(self.image, other.image)
            and same_mask
        )


def _grid(shape):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")


def _unit(rng, n=None):
    v = rng.standard_normal((n, 3) if n else 3)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _segment_distance(coords, a, b):
    """Distance of every voxel centre to the segment a-b."""
    ab = b - a
    rel = [coords[i] - a[i] for i in range(3)]
    t = sum(rel[i] * ab[i] for i in range(3)) / float(ab @ ab)
    t = np.clip(t, 0.0, 1.0)
    return np.sqrt(sum((rel[i] - t * ab[i]) ** 2 for i in range(3)))


def _nodule_mask(coords, center, radius, spiculation, rng):
    """Star-shaped body: radius modulated by narrow spikes along random directions."""
    rel = [coords[i] - center[i] for i in range(3)]
    r = np.sqrt(rel[0] ** 2 + rel[1] ** 2 + rel[2] ** 2)
    safe = np.maximum(r, 1e-9)
    u = [rel[i] / safe for i in range(3)]
    bound = np.full(r.shape, radius)
    if spiculation > 0:
        for d in _unit(rng, int(rng.integers(5, 10))):
            cos = u[0] * d[0] + u[1] * d[1] + u[2] * d[2]
            bound = bound + radius * spiculation * np.exp((cos - 1.0) / 0.03)
    inside = r <= bound
    lab, n = ndimage.label(inside)
    if n > 1:
        sizes = ndimage.sum(inside, lab, index=np.arange(1, n + 1))
        inside = lab == (1 + int(np.argmax(sizes)))
    return inside


def _touches(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(np.any(ndimage.binary_dilation(a) & b))


def _sample_diameter(spec: PhantomSpec, label: int, rng) -> float:
    median = spec.malignant_median_mm if label else spec.benign_median_mm
    d = median * math.exp(spec.diameter_log_sd * rng.standard_normal())
    return float(np.clip(d, MIN_DIAMETER_MM, spec.max_diameter_mm))


def equivalent_diameter_mm(voxels: int, voxel_mm: float) -> float:
    volume = voxels * voxel_mm**3
    return 2.0 * (3.0 * volume / (4.0 * math.pi)) ** (1.0 / 3.0)


def generate_phantom(spec: PhantomSpec, rng: np.random.Generator, sample_id: str = "s000000",
                     label: int | None = None) -> VolumeSample:
    """Draw one labelled patch. ``label`` overrides the drawn class."""
    shape = spec.grid_shape
    if label is None:
        label = int(rng.random() < spec.malignant_fraction)
    coords = _grid(shape)
    mid = (np.array(shape, dtype=np.float64) - 1.0) / 2.0
    half = np.array(shape, dtype=np.float64) / 2.0
    contact_p = spec.contact_prob_malignant if label else spec.contact_prob_benign
    lo, hi = spec.spiculation_malignant if label else spec.spiculation_benign
    want_contact = bool(rng.random() < contact_p)
    spiculation = float(rng.uniform(lo, hi))

    for _ in range(MAX_ATTEMPTS):
        mask = np.zeros(shape, dtype=np.uint8)
        # lung: large ellipsoid shifted so the chest wall cuts one side
        lung_c = mid + rng.uniform(-0.5, 0.5, 3) * half
        lung_r = half * rng.uniform(1.3, 1.8, 3)
        lung = sum(((coords[i] - lung_c[i]) / lung_r[i]) ** 2 for i in range(3)) <= 1.0
        mask[lung] = LUNG

        diameter = _sample_diameter(spec, label, rng)
        radius = diameter / 2.0 / spec.voxel_mm
        center = mid + rng.uniform(-1.0, 1.0, 3)
        nodule = _nodule_mask(coords, center, radius, spiculation, rng)
        if not nodule.any() or not np.all(lung[nodule]):
            continue
        count = int(nodule.sum())
        measured = equivalent_diameter_mm(count, spec.voxel_mm)
        if measured < MIN_DIAMETER_MM:
            continue

        # trachea: one air tube along z, away from the nodule
        t_xy = None
        for _ in range(20):
            cand = np.array([rng.uniform(0, shape[1] - 1), rng.uniform(0, shape[2] - 1)])
            if np.linalg.norm(cand - center[1:]) > radius * 1.5 + 4.0:
                t_xy = cand
                break
        trachea = np.zeros(shape, dtype=bool)
        if t_xy is not None:
            t_r = rng.uniform(1.0, 1.8)
            trachea = ((coords[1] - t_xy[0]) ** 2 + (coords[2] - t_xy[1]) ** 2 <= t_r**2) & lung

        vessels = np.zeros(shape, dtype=bool)
        n_vessels = int(rng.integers(spec.num_vessels[0], spec.num_vessels[1] + 1))
        ok = True
        for v in range(n_vessels):
            v_r = rng.uniform(0.6, 1.2)
            for _ in range(30):
                direction = _unit(rng)
                if want_contact and v == 0:
                    # pass tangent to the nodule surface
                    normal = _unit(rng)
                    normal = normal - (normal @ direction) * direction
                    normal /= np.linalg.norm(normal) + 1e-12
                    through = center + normal * (radius + v_r * 0.5)
                else:
                    through = mid + rng.uniform(-1.0, 1.0, 3) * half
                a = through - direction * 2 * max(shape)
                b = through + direction * 2 * max(shape)
                tube = (_segment_distance(coords, a, b) <= v_r) & lung & ~nodule
                if not tube.any():
                    continue
                if not (want_contact and v == 0) and _touches(tube, nodule):
                    continue
                vessels |= tube
                break
            else:
                ok = False
        if not ok:
            continue
        contact = _touches(vessels, nodule)
        if contact != want_contact:
            continue

        mask[vessels] = VESSEL
        mask[trachea & ~nodule] = TRACHEA
        mask[nodule] = NODULE
        labels, n = ndimage.label(mask == NODULE)
        if n != 1:
            continue
        image = BASE_INTENSITY[mask]
        image = ndimage.gaussian_filter(image, BLUR_SIGMA, mode="nearest")
        image = image + rng.normal(0.0, NOISE_SIGMA, shape)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        keep_mask = bool(rng.random() < spec.mask_availability_prob)
        return VolumeSample(
            id=sample_id,
            image=image,
            mask=mask if keep_mask else None,
            label=label,
            diameter_mm=float(measured),
            voxel_mm=float(spec.voxel_mm),
            features={"vessel_contact": int(contact), "spiculation": spiculation},
        )
    raise PhantomError(f"phantom {sample_id}: no valid layout after {MAX_ATTEMPTS} attempts")


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per sample index."""
    return np.random.default_rng([seed, index, 0x5EED])


def generate_dataset(spec: PhantomSpec, count: int, seed: int | None = None, start: int = 0) -> list[VolumeSample]:
    seed = spec.seed if seed is None else seed
    return [generate_phantom(spec, sample_rng(seed, i), sample_id=f"s{i:06d}") for i in range(start, start + count)]


def oracle_features(samples) -> np.ndarray:
    """[n, 3]: true diameter, vessel-contact flag, spiculation amplitude."""
    return np.array(
        [[s.diameter_mm, s.features["vessel_contact"], s.features["spiculation"]] for s in samples],
        dtype=np.float64,
    )
