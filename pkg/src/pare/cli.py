"""Command-line entry point: gen-data, train, evaluate, ablate, inspect-prototypes.

Exit codes: 0 success, 1 user error (bad config, missing or corrupt files),
2 numerical failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import ablation
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .data import DatasetFormatError, PhantomSpec, assign_splits, generate_dataset, read_dataset, write_dataset
from .metrics import BIN_NAMES, diameter_bin
from .numerics import ShapeError
from .training import NonFiniteLossError, evaluate, load_checkpoint, predict_samples, train

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2


class UserError(Exception):
    """Bad invocation; reported without a traceback."""


def _load_spec(path) -> PhantomSpec:
    if path is None:
        return PhantomSpec().validate()
    p = Path(path)
    if not p.exists():
        raise UserError(f"spec file {p} not found")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise UserError(f"{p}: phantom spec must be a mapping")
    try:
        return PhantomSpec.from_dict(data)
    except (TypeError, ValueError) as e:
        raise UserError(f"{p}: {e}") from None


def _parse_fractions(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UserError(f"--splits must be three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise UserError(f"--splits must be three comma-separated numbers, got {text!r}")
    return parts


def summarize(samples) -> str:
    n = len(samples)
    labels = np.array([s.label for s in samples])
    diam = np.array([s.diameter_mm for s in samples])
    lines = [
        f"samples={n}",
        f"malignant={int(labels.sum())} benign={int(n - labels.sum())} malignant_fraction={labels.mean():.4f}",
        f"mask_available={sum(s.mask is not None for s in samples)} ({np.mean([s.mask is not None for s in samples]):.4f})",
        f"diameter_mm mean={diam.mean():.2f} min={diam.min():.2f} max={diam.max():.2f}",
    ]
    for b in BIN_NAMES:
        sel = np.array([diameter_bin(d) == b for d in diam])
        lines.append(f"diameter[{b}] n={int(sel.sum())} malignant={int(labels[sel].sum())}")
    return "\n".join(lines)


def cmd_gen_data(args) -> int:
    spec = _load_spec(args.spec)
    if args.count < 1:
        raise UserError("--count must be positive")
    seed = spec.seed if args.seed is None else args.seed
    spec.seed = seed
    samples = generate_dataset(spec, args.count, seed=seed)
    splits = assign_splits(len(samples), _parse_fractions(args.splits), seed=seed)
    out = write_dataset(samples, args.out, splits)
    (out / "phantom_spec.json").write_text(json.dumps(spec.to_dict(), sort_keys=True) + "\n")
    print(summarize(samples))
    for name in ("train", "val", "test"):
        print(f"split[{name}]={splits.count(name)}")
    return EXIT_OK


def _config(args):
    overrides = list(args.set or [])
    if getattr(args, "no_deep_supervision", False):
        overrides.append("train.deep_supervision=false")
    return load_config(args.config, preset=args.preset, overrides=overrides)


def _split(data_dir, split):
    samples = read_dataset(data_dir, split=split)
    return samples


def _write_report(report, out: Path, stem: str) -> None:
    (out / f"{stem}.txt").write_text(report.table() + "\n")
    (out / f"{stem}.kv").write_text(report.key_values())


def cmd_train(args) -> int:
    out = Path(args.out)
    state = None
    if args.resume:
        cfg, state = load_checkpoint(args.resume)
        if args.config or args.set or args.no_deep_supervision:
            wanted = _config(args)
            if wanted.canonical_text() != cfg.canonical_text():
                raise UserError("--resume: config differs from the checkpoint's; resume with the checkpoint config")
    else:
        cfg = _config(args)
    train_samples = _split(args.data, "train")
    if not train_samples:
        raise UserError(f"{args.data}: no training samples")
    out.mkdir(parents=True, exist_ok=True)
    state, _ = train(cfg, train_samples, out_dir=out, state=state, log=None if args.quiet else print)
    val = _split(args.data, "val")
    if val:
        report = evaluate(state, cfg, val)
        _write_report(report, out, "eval_val")
        print(report.table())
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg, state = load_checkpoint(args.checkpoint)
    samples = _split(args.data, args.split)
    if not samples:
        raise UserError(f"{args.data}: split {args.split!r} is empty")
    report = evaluate(state, cfg, samples)
    print(report.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.canonical_text() + "\n")
        _write_report(report, out, f"eval_{args.split}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.canonical_text() + "\n")
    train_samples = _split(args.data, "train")
    test_samples = _split(args.data, args.split)
    if not train_samples or not test_samples:
        raise UserError(f"{args.data}: needs nonempty train and {args.split} splits")
    seeds = list(range(cfg.train.seed, cfg.train.seed + args.seeds))
    arms = args.arms or list(ablation.ARM_NAMES)
    result = ablation.run_ablation(cfg, train_samples, test_samples, seeds, arms, out_dir=out,
                                   log=None if args.quiet else print)
    (out / "ablation.txt").write_text(result.table() + "\n")
    (out / "ablation.kv").write_text(result.key_values())
    print(result.table())
    return EXIT_OK


def prototype_report(state, cfg, samples=None) -> str:
    bank = state.bank
    if bank is None:
        raise UserError("checkpoint has no prototype bank (prototype stage disabled)")
    lines = [f"prototypes={bank.num_prototypes} dim={bank.dim} lambda={bank.lam}"]
    stacked = bank.stacked().astype(np.float64)
    diff = stacked[:, None, :] - stacked[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(dist, np.inf)
    half = len(bank.benign)
    emb = lab = None
    if samples:
        preds = predict_samples(state, cfg, samples)
        emb = np.stack([preds.embeddings[s.id] for s in samples]).astype(np.float64)
        lab = np.array([s.label for s in samples])
    agree = {0: [], 1: []}
    for label, name, rows, stamps in ((0, "benign", bank.benign, bank.last_update_benign),
                                      (1, "malignant", bank.malignant, bank.last_update_malignant)):
        for j, row in enumerate(rows):
            g = j + label * half
            line = (f"bank={name} row={j} norm={np.linalg.norm(row):.6f} "
                    f"min_dist={dist[g].min():.6f} last_update={int(stamps[j])}")
            if emb is not None:
                d = np.sqrt(np.sum((emb - row.astype(np.float64)) ** 2, axis=1))
                k = int(np.argmin(d))
                agree[label].append(int(lab[k] == label))
                line += f" nearest_embedding_dist={d[k]:.6f} nearest_embedding_label={int(lab[k])}"
            lines.append(line)
    if emb is not None:
        for label, name in ((0, "benign"), (1, "malignant")):
            lines.append(f"summary bank={name} nearest_same_class_fraction={np.mean(agree[label]):.4f}")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    cfg, state = load_checkpoint(args.checkpoint)
    samples = _split(args.data, args.split) if args.data else None
    print(prototype_report(state, cfg, samples))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pare", description="Context parsing and prototype recall for nodule malignancy.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    g.add_argument("--spec", help="phantom spec file (YAML/JSON); defaults when omitted")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--splits", default="0.8,0.1,0.1", help="train,val,test fractions")
    g.set_defaults(func=cmd_gen_data)

    def config_args(sp):
        sp.add_argument("--config", help="YAML config file (sections model/train, optional preset key)")
        sp.add_argument("--preset", choices=("clinical", "desk", "micro"), help="base preset (default desk)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config field")
        sp.add_argument("--no-deep-supervision", action="store_true", help="supervise only the final head")
        sp.add_argument("--quiet", action="store_true")

    t = sub.add_parser("train", help="train on the dataset's train split")
    config_args(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="stratified report for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="run the module ablation arms over seeds")
    config_args(a)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds from train.seed")
    a.add_argument("--split", default="test", choices=("val", "test"))
    a.add_argument("--arms", nargs="+", choices=ablation.ARM_NAMES, metavar="ARM")
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("inspect-prototypes", help="describe a checkpoint's prototype bank")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", help="dataset for the nearest-embedding scan")
    i.add_argument("--split", default="train", choices=("train", "val", "test"))
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UserError, ConfigError, CheckpointError, DatasetFormatError, ShapeError,
            FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
