"""Module ablation arms: which stages are switched on, and the comparison table."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .config import Config
from .data.phantom import VolumeSample
from .training import evaluate, main_column, train

ARMS: tuple[tuple[str, dict], ...] = (
    ("Pure classification", dict(use_segmentation=False, use_context=False, use_prototype=False, classify=True)),
    ("Pure segmentation", dict(use_segmentation=True, use_context=False, use_prototype=False, classify=False)),
    ("MT", dict(use_segmentation=True, use_context=False, use_prototype=False, classify=True)),
    ("MT+Context*", dict(use_segmentation=True, use_context=True, use_prototype=False, classify=True,
                         seg_classes="nodule")),
    ("MT+Context", dict(use_segmentation=True, use_context=True, use_prototype=False, classify=True)),
    ("MT+Context+Prototype", dict(use_segmentation=True, use_context=True, use_prototype=True, classify=True)),
)
ARM_NAMES = tuple(name for name, _ in ARMS)


def arm_config(base: Config, arm: str, seed: int) -> Config:
    switches = dict(ARMS)[arm]
    overrides = [f"model.{k}={v}" for k, v in switches.items()]
    if "seg_classes" not in switches:
        overrides.append("model.seg_classes=all")
    overrides.append(f"train.seed={seed}")
    return base.with_overrides(overrides)


@dataclass
class AblationResult:
    seeds: list[int]
    auc: dict[str, list[float | None]] = field(default_factory=dict)  # arm -> per-seed AUC

    def table(self) -> str:
        width = max(len(a) for a in ARM_NAMES)
        head = f"{'Method':<{width}} | " + " | ".join(f"seed {s:>3}" for s in self.seeds) + " |     mean"
        lines = [head, "-" * len(head)]
        for arm, vals in self.auc.items():
            cells = " | ".join(f"{v:>8.4f}" if v is not None else f"{'n/a':>8}" for v in vals)
            good = [v for v in vals if v is not None]
            mean = f"{statistics.fmean(good):>8.4f}" if good else f"{'n/a':>8}"
            lines.append(f"{arm:<{width}} | {cells} | {mean}")
        return "\n".join(lines)

    def key_values(self) -> str:
        out = []
        for arm, vals in self.auc.items():
            for s, v in zip(self.seeds, vals):
                out.append(f"auc[{arm}][seed={s}]={'n/a' if v is None else repr(v)}")
        return "\n".join(out) + "\n"


def run_ablation(
    base: Config,
    train_samples: Sequence[VolumeSample],
    test_samples: Sequence[VolumeSample],
    seeds: Sequence[int],
    arms: Sequence[str] = ARM_NAMES,
    out_dir=None,
    log: Callable[[str], None] | None = None,
) -> AblationResult:
    """Train and test every arm for every seed; the AUC is each arm's own main score."""
    unknown = [a for a in arms if a not in ARM_NAMES]
    if unknown:
        raise ValueError(f"unknown ablation arm(s) {unknown}; choose from {list(ARM_NAMES)}")
    result = AblationResult(list(seeds), {a: [] for a in arms})
    for arm in arms:
        for seed in seeds:
            cfg = arm_config(base, arm, seed)
            run_dir = None
            if out_dir is not None:
                slug = arm.replace("+", "_").replace("*", "_star").replace(" ", "_").lower()
                run_dir = f"{out_dir}/{slug}_seed{seed}"
            state, _ = train(cfg, train_samples, out_dir=run_dir)
            report = evaluate(state, cfg, test_samples)
            value = report.columns[main_column(cfg)]["all"]
            result.auc[arm].append(value)
            if log is not None:
                log(f"arm={arm!r} seed={seed} auc={value!r}")
    return result
