"""AUC, Dice and the diameter-stratified evaluation report."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .backbone import NUM_CLASSES

BIN_NAMES = ("<10mm", "10-20mm", ">20mm")


def auc(scores, labels) -> float:
    """Mann-Whitney rank statistic with midranks for ties.

    Equals the probability that a random positive scores above a random
    negative, ties counted 0.5.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"auc: {s.size} scores vs {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("auc: labels must be 0 or 1")
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc: needs both classes present")
    if not np.all(np.isfinite(s)):
        raise ValueError("auc: non-finite score")
    ranks = rankdata(s, method="average")
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def dice_score(pred_labels, gt_labels, class_id: int) -> float:
    """2|A and B| / (|A| + |B|) for the voxels of ``class_id``; 1.0 when both are empty."""
    a = np.asarray(pred_labels)
    b = np.asarray(gt_labels)
    if a.shape != b.shape:
        raise ValueError(f"dice_score: shape mismatch {a.shape} vs {b.shape}")
    a = a == class_id
    b = b == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.sum(a & b)) / total


def diameter_bin(d: float) -> str:
    """[4, 10) -> "<10mm", [10, 20] -> "10-20mm", (20, inf) -> ">20mm"."""
    if d < 10.0:
        return BIN_NAMES[0]
    if d <= 20.0:
        return BIN_NAMES[1]
    return BIN_NAMES[2]


def _safe_auc(scores, labels) -> float | None:
    try:
        return auc(scores, labels)
    except ValueError:
        return None


@dataclass
class EvalReport:
    auc_all: float | None
    auc_by_bin: dict[str, float | None]
    n_by_bin: dict[str, int]
    columns: dict[str, dict[str, float | None]] = field(default_factory=dict)  # column -> bin/"all" -> auc
    mean_dice_by_class: dict[int, float] = field(default_factory=dict)
    n: int = 0

    def table(self) -> str:
        """Plain-text table: one row per score column, bins then All."""
        heads = list(BIN_NAMES) + ["All"]
        lines = ["column     " + " | ".join(f"{h:>8}" for h in heads)]
        lines.append("n          " + " | ".join(f"{self.n_by_bin[b]:>8d}" for b in BIN_NAMES) + f" | {self.n:>8d}")
        for name, col in self.columns.items():
            cells = [col.get(b) for b in BIN_NAMES] + [col.get("all")]
            lines.append(f"{name:<10} " + " | ".join(f"{_fmt(c):>8}" for c in cells))
        if self.mean_dice_by_class:
            dice = ", ".join(f"{k}:{v:.4f}" for k, v in sorted(self.mean_dice_by_class.items()))
            lines.append(f"mean dice by class: {dice}")
        return "\n".join(lines)

    def key_values(self) -> str:
        """Machine-readable ``key=value`` lines (n/a for undefined AUCs)."""
        out = [f"n={self.n}", f"auc_all={_fmt(self.auc_all, 12)}"]
        for b in BIN_NAMES:
            out.append(f"n[{b}]={self.n_by_bin[b]}")
            out.append(f"auc[{b}]={_fmt(self.auc_by_bin[b], 12)}")
        for name, col in self.columns.items():
            for key in list(BIN_NAMES) + ["all"]:
                out.append(f"auc.{name}[{key}]={_fmt(col.get(key), 12)}")
        for k, v in sorted(self.mean_dice_by_class.items()):
            out.append(f"dice[{k}]={v:.12g}")
        return "\n".join(out) + "\n"


def _fmt(v, digits: int = 4) -> str:
    if v is None:
        return "n/a"
    return f"{v:.{digits}g}" if digits > 4 else f"{v:.{digits}f}"


def stratified_report(predictions, samples, main: str | None = None,
                      dice_pairs=None) -> EvalReport:
    """Per-diameter-bin and overall AUC for every score column.

    ``predictions`` maps sample id to either a float (single column "score")
    or a dict column -> float (for example p1, p2, p3, ensemble). ``main``
    names the column used for ``auc_all``/``auc_by_bin``; by default
    "ensemble" when present, else the first column. ``dice_pairs`` is an
    optional list of (predicted labels, ground-truth labels) volumes.
    """
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"stratified_report: duplicate sample ids {dup[:5]}")
    missing = [i for i in ids if i not in predictions]
    if missing:
        raise KeyError(f"stratified_report: no prediction for ids {missing[:5]}")
    rows = [predictions[i] if isinstance(predictions[i], dict) else {"score": predictions[i]} for i in ids]
    names = list(rows[0]) if rows else ["score"]
    if main is None:
        main = "ensemble" if "ensemble" in names else names[0]
    labels = np.array([s.label for s in samples])
    bins = np.array([diameter_bin(s.diameter_mm) for s in samples])
    columns = {}
    for name in names:
        sc = np.array([r[name] for r in rows], dtype=np.float64)
        col = {"all": _safe_auc(sc, labels)}
        for b in BIN_NAMES:
            sel = bins == b
            col[b] = _safe_auc(sc[sel], labels[sel])
        columns[name] = col
    n_by_bin = {b: int(np.sum(bins == b)) for b in BIN_NAMES}
    dice = {}
    if dice_pairs:
        for c in range(NUM_CLASSES):
            dice[c] = float(np.mean([dice_score(p, g, c) for p, g in dice_pairs]))
    main_col = columns.get(main, {"all": None, **{b: None for b in BIN_NAMES}})
    return EvalReport(
        auc_all=main_col["all"],
        auc_by_bin={b: main_col[b] for b in BIN_NAMES},
        n_by_bin=n_by_bin,
        columns=columns,
        mean_dice_by_class=dice,
        n=len(samples),
    )


def oracle_baseline_auc(train_samples, test_samples) -> float:
    """Logistic regression on generator-internal features (log diameter, contact, spiculation)."""
    from sklearn.linear_model import LogisticRegression

    from .data.phantom import oracle_features

    def design(samples):
        f = oracle_features(samples)
        return np.column_stack([np.log(f[:, 0]), f[:, 1], f[:, 2]])

    y = np.array([s.label for s in train_samples])
    model = LogisticRegression(max_iter=1000).fit(design(train_samples), y)
    scores = model.decision_function(design(test_samples))
    return auc(scores, [s.label for s in test_samples])

