import json
import time

import numpy as np
import pytest
import yaml

from pare import ablation
from pare.cli import main
from pare.config import desk_preset, micro_preset
from pare.data import PhantomSpec, generate_dataset, read_dataset
from pare.training import StepReport, init_state, make_batch, sample_indices, save_checkpoint, train_step


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out), "--count", "40", "--seed", "3"]) == 0
    return out


def _tree(path):
    return {p.relative_to(path): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_gen_data_summary_and_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--out", str(a), "--count", "12", "--seed", "5"]) == 0
    out = capsys.readouterr().out
    assert "samples=12" in out and "malignant_fraction=" in out and "mask_available=" in out
    assert "diameter[<10mm]" in out
    assert main(["gen-data", "--out", str(b), "--count", "12", "--seed", "5"]) == 0
    assert _tree(a) == _tree(b)
    assert json.loads((a / "phantom_spec.json").read_text())["seed"] == 5


def test_gen_data_malignant_fraction_from_spec(tmp_path):
    spec = PhantomSpec(malignant_fraction=0.3).to_dict()
    (tmp_path / "spec.yaml").write_text(yaml.safe_dump(spec))
    assert main(["gen-data", "--spec", str(tmp_path / "spec.yaml"), "--out", str(tmp_path / "d"),
                 "--count", "100", "--seed", "1"]) == 0
    n_mal = sum(s.label for s in read_dataset(tmp_path / "d"))
    # binomial(100, 0.3): sd 4.6, so +-4 sd
    assert abs(n_mal - 30) <= 18


def test_gen_data_missing_field_names_it(tmp_path, capsys):
    spec = PhantomSpec().to_dict()
    del spec["malignant_fraction"]
    (tmp_path / "spec.yaml").write_text(yaml.safe_dump(spec))
    code = main(["gen-data", "--spec", str(tmp_path / "spec.yaml"), "--out", str(tmp_path / "d"), "--count", "3"])
    assert code == 1
    assert "malignant_fraction" in capsys.readouterr().err


def test_train_evaluate_resume_and_inspect(tmp_path, data_dir, capsys):
    before = _tree(data_dir)
    out = tmp_path / "run"
    args = ["train", "--preset", "micro", "--set", "train.total_iters=6", "--set", "train.checkpoint_every=3",
            "--data", str(data_dir), "--quiet"]
    assert main(args + ["--out", str(out)]) == 0
    for name in ("config.json", "train_log.txt", "ckpt_000003.pck", "ckpt_000006.pck", "last.pck",
                 "eval_val.txt", "eval_val.kv"):
        assert (out / name).exists(), name
    full = (out / "train_log.txt").read_text().splitlines()
    assert len(full) == 6

    resumed = tmp_path / "resumed"
    assert main(args + ["--out", str(resumed), "--set", "train.total_iters=3"]) == 0
    assert main(["train", "--resume", str(out / "ckpt_000003.pck"), "--data", str(data_dir), "--quiet",
                 "--out", str(resumed)]) == 0
    log = (resumed / "train_log.txt").read_text().splitlines()
    assert [StepReport.parse(l) for l in log[-3:]] == [StepReport.parse(l) for l in full[-3:]]

    capsys.readouterr()
    assert main(["evaluate", "--checkpoint", str(out / "last.pck"), "--data", str(data_dir),
                 "--split", "test", "--out", str(tmp_path / "ev")]) == 0
    assert "column" in capsys.readouterr().out
    assert (tmp_path / "ev" / "eval_test.kv").read_text().startswith("n=")

    assert main(["inspect-prototypes", "--checkpoint", str(out / "last.pck"), "--data", str(data_dir)]) == 0
    text = capsys.readouterr().out
    assert "bank=malignant row=0" in text and "nearest_same_class_fraction" in text
    assert _tree(data_dir) == before


def test_resume_with_different_config_rejected(tmp_path, data_dir, capsys):
    out = tmp_path / "run"
    assert main(["train", "--preset", "micro", "--set", "train.total_iters=2", "--data", str(data_dir),
                 "--out", str(out), "--quiet"]) == 0
    code = main(["train", "--resume", str(out / "last.pck"), "--preset", "micro", "--set", "train.seed=9",
                 "--data", str(data_dir), "--out", str(out), "--quiet"])
    assert code == 1 and "differs" in capsys.readouterr().err


def test_no_deep_supervision_flag(tmp_path, data_dir):
    out = tmp_path / "run"
    assert main(["train", "--preset", "micro", "--set", "train.total_iters=2", "--no-deep-supervision",
                 "--data", str(data_dir), "--out", str(out), "--quiet"]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["train"]["deep_supervision"] is False
    rep = StepReport.parse((out / "train_log.txt").read_text().splitlines()[-1])
    assert rep.cls_loss_p2 == 0.0 and rep.cls_loss_p3 == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_exits_2(tmp_path, data_dir, capsys):
    code = main(["train", "--preset", "micro", "--set", "train.base_lr=1e30", "--set", "train.warmup_frac=0",
                 "--data", str(data_dir), "--out", str(tmp_path / "r"), "--quiet"])
    assert code == 2
    assert "non-finite" in capsys.readouterr().err


def test_user_errors_exit_1(tmp_path, data_dir, capsys):
    assert main(["train", "--preset", "micro", "--set", "train.nope=1", "--data", str(data_dir),
                 "--out", str(tmp_path / "r")]) == 1
    assert main(["evaluate", "--checkpoint", str(tmp_path / "missing.pck"), "--data", str(data_dir)]) == 1
    assert main(["train", "--preset", "micro", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")]) == 1
    bad = tmp_path / "bad.pck"
    bad.write_bytes(b"PCKP" + b"\0" * 10)
    assert main(["inspect-prototypes", "--checkpoint", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "bad.pck" in err and "offset" in err


def test_inspect_fresh_bank_all_zero_stamps(tmp_path, capsys):
    cfg = micro_preset()
    save_checkpoint(init_state(cfg), cfg, tmp_path / "fresh.pck")
    assert main(["inspect-prototypes", "--checkpoint", str(tmp_path / "fresh.pck")]) == 0
    rows = [l for l in capsys.readouterr().out.splitlines() if l.startswith("bank=")]
    assert len(rows) == cfg.model.num_prototypes
    assert all("last_update=0" in l for l in rows)


def test_inspect_without_bank_is_user_error(tmp_path, capsys):
    cfg = micro_preset().with_overrides(["model.use_prototype=false"])
    save_checkpoint(init_state(cfg), cfg, tmp_path / "nb.pck")
    assert main(["inspect-prototypes", "--checkpoint", str(tmp_path / "nb.pck")]) == 1


def test_ablate_smoke_one_seed(tmp_path, data_dir, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--preset", "micro", "--set", "train.total_iters=4", "--data", str(data_dir),
                 "--out", str(out), "--seeds", "1", "--quiet"]) == 0
    table = (out / "ablation.txt").read_text().splitlines()
    assert table[0].startswith("Method")
    assert [l.split(" | ")[0].strip() for l in table[2:]] == list(ablation.ARM_NAMES)
    kv = (out / "ablation.kv").read_text().splitlines()
    assert len(kv) == len(ablation.ARM_NAMES)


def test_ablation_arm_names():
    assert ablation.ARM_NAMES == ("Pure classification", "Pure segmentation", "MT", "MT+Context*",
                                  "MT+Context", "MT+Context+Prototype")
    base = desk_preset()
    assert ablation.arm_config(base, "MT+Context*", 3).model.seg_classes == "nodule"
    assert ablation.arm_config(base, "Pure segmentation", 3).model.classify is False
    assert ablation.arm_config(base, "MT", 3).train.seed == 3


def test_desk_preset_fits_laptop_budget():
    """Extrapolate a few timed desk steps to the full 1500-iteration run: under 30 minutes."""
    cfg = desk_preset()
    samples = generate_dataset(PhantomSpec(), 16, seed=1)
    labels = np.array([s.label for s in samples])
    state = init_state(cfg)
    train_step(state, make_batch(samples, sample_indices(labels, 0, cfg), 0, cfg), cfg)  # compile/warm caches
    t0 = time.perf_counter()
    steps = 5
    for it in range(1, 1 + steps):
        train_step(state, make_batch(samples, sample_indices(labels, it, cfg), it, cfg), cfg)
    per_step = (time.perf_counter() - t0) / steps
    print(f"desk step {per_step:.3f}s -> {per_step * cfg.train.total_iters / 60:.1f} min for the full run")
    assert per_step * cfg.train.total_iters < 30 * 60
