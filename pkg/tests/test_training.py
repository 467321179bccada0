import math

import numpy as np
import pytest

from conftest import nano_config, nano_samples
from pare.config import micro_preset
from pare.model import ensemble, forward, heads, init_params
from pare.numerics import Tensor, backward, no_grad, precision
from pare.numerics.gradcheck import max_relative_error, numeric_grad
from pare.training import (NonFiniteLossError, Predictor, StepReport, TrainState, init_state, make_batch,
                           objective, predict_samples, sample_indices, save_checkpoint, train, train_step)


def _batch(cfg, samples, iteration=0, train_mode=True):
    labels = np.array([s.label for s in samples])
    return make_batch(samples, sample_indices(labels, iteration, cfg), iteration, cfg, train=train_mode)


def test_micro_step_smoke(micro_cfg, phantoms):
    state = init_state(micro_cfg)
    rep = train_step(state, _batch(micro_cfg, phantoms), micro_cfg)
    assert math.isfinite(rep.J) and rep.grad_norm > 0
    assert rep.iteration == 1 and state.iteration == 1


def test_J_decomposition_every_step(micro_cfg, phantoms):
    cfg = micro_cfg.with_overrides(["train.total_iters=8"])
    _, reports = train(cfg, phantoms)
    for r in reports:
        assert r.J == pytest.approx(r.seg_loss + r.cls_loss_p1 + r.cls_loss_p2 + r.cls_loss_p3, abs=1e-6)


def test_zero_lr_changes_no_parameter_but_moves_bank(micro_cfg, phantoms):
    cfg = micro_cfg.with_overrides(["train.base_lr=0"])
    state = init_state(cfg)
    before = {k: p.data.copy() for k, p in state.params.items()}
    bank_before = state.bank.copy()
    train_step(state, _batch(cfg, phantoms), cfg)
    for k, p in state.params.items():
        assert np.array_equal(p.data, before[k]), k
    moved = not (np.array_equal(state.bank.benign, bank_before.benign)
                 and np.array_equal(state.bank.malignant, bank_before.malignant))
    assert moved


def test_bank_update_uses_forward_embedding(micro_cfg, phantoms):
    cfg = micro_cfg.with_overrides(["train.warmup_W=0"])
    state = init_state(cfg)
    batch = _batch(cfg, phantoms)
    with no_grad():
        q = forward(state.params, cfg.model, batch.images, state.bank, teacher_masks=batch.teacher).q.data
    bank = state.bank.copy()
    from pare.prototype import momentum_update
    for qi, yi in zip(q, batch.labels):
        momentum_update(bank, qi, int(yi), iteration=1)
    train_step(state, batch, cfg)
    np.testing.assert_array_equal(state.bank.benign, bank.benign)
    np.testing.assert_array_equal(state.bank.malignant, bank.malignant)


def test_warmup_reinitialises_bank_from_embeddings(micro_cfg, phantoms):
    cfg = micro_cfg.with_overrides(["train.total_iters=5", "train.warmup_W=5"])
    state = init_state(cfg)
    random_rows = state.bank.stacked().copy()
    state, _ = train(cfg, phantoms, state=state)
    assert np.all(state.bank.last_update_benign == 5) and np.all(state.bank.last_update_malignant == 5)
    assert not np.allclose(state.bank.stacked(), random_rows)
    assert state.warmup == {0: [], 1: []}


def test_maskless_samples_contribute_no_segmentation_gradient(phantoms):
    cfg = micro_preset().with_overrides(["model.classify=false", "model.use_context=false",
                                         "model.use_prototype=false"])
    params = init_params(cfg.model, 0)
    labelled = [s for s in phantoms if s.mask is not None][:4]
    images = np.stack([s.image[None] for s in labelled]).astype(np.float32)
    masks = [s.mask for s in labelled]
    from pare.backbone import forward_backbone, seg_loss
    from pare.model import backbone_config
    x = Tensor(images, requires_grad=True)
    out = forward_backbone(x, backbone_config(cfg.model), params)
    half = [masks[0], None, masks[2], None]
    loss = seg_loss(out.logits, half)
    backward(loss)
    assert np.all(x.grad[1] == 0) and np.all(x.grad[3] == 0)
    assert np.any(x.grad[0] != 0) and np.any(x.grad[2] != 0)
    with no_grad():
        only = seg_loss(forward_backbone(Tensor(images[[0, 2]]), backbone_config(cfg.model), params).logits,
                        [masks[0], masks[2]])
    assert float(loss.data) == pytest.approx(float(only.data), rel=1e-5)


def test_deep_supervision_off_supervises_final_head_only(micro_cfg, phantoms):
    cfg = micro_cfg.with_overrides(["train.deep_supervision=false"])
    state = init_state(cfg)
    rep = train_step(state, _batch(cfg, phantoms), cfg)
    assert rep.cls_loss_p2 == 0.0 and rep.cls_loss_p3 == 0.0 and rep.cls_loss_p1 > 0
    for name in ("head_p2", "head_p3"):
        assert state.params[f"{name}.fc0.weight"].grad is None
    assert set(init_state(cfg).params) == set(init_state(micro_cfg).params)


def test_identical_heads_give_identical_logits():
    cfg = nano_config()
    params = init_params(cfg.model, 0)
    for part in ("fc0.weight", "fc0.bias", "fc1.weight", "fc1.bias"):
        params[f"head_p2.{part}"].data = params[f"head_p3.{part}"].data.copy()
        params[f"head_p1.{part}"].data = params[f"head_p3.{part}"].data.copy()
    v = Tensor(np.random.default_rng(0).standard_normal((3, 8)))
    out = heads(v, v, v, params)
    assert np.array_equal(out["p1"].data, out["p3"].data) and np.array_equal(out["p2"].data, out["p3"].data)


@pytest.mark.parametrize("head", ["p1", "p2", "p3"])
def test_head_gradients_match_finite_differences(head):
    cfg = nano_config()
    with precision(np.float64):
        state = init_state(cfg)
        batch = _batch(cfg, nano_samples(4))
        prefix = f"head_{head}."

        def loss():
            return objective(state.params, state.bank, batch, cfg)[2][head]

        for p in state.params.values():
            p.grad = None
        backward(loss())
        for name, p in state.params.items():
            if name.startswith(prefix):
                assert max_relative_error(p.grad, numeric_grad(loss, p, eps=1e-6)) < 1e-5, name


def test_ensemble_is_mean_of_head_probabilities():
    probs = {"p1": np.array([0.2]), "p2": np.array([0.4]), "p3": np.array([0.6])}
    assert ensemble(probs)[0] == pytest.approx(0.4, abs=1e-15)


def test_predictor_head_and_ensemble(tmp_path, micro_cfg, phantoms):
    cfg = micro_cfg.with_overrides(["train.total_iters=3"])
    state, _ = train(cfg, phantoms)
    path = save_checkpoint(state, cfg, tmp_path / "m.pck")
    pred = Predictor(path)
    sample = phantoms[5]
    scores = predict_samples(state, cfg, [sample]).scores[sample.id]
    assert pred.predict(sample.image) == scores["p1"]
    assert pred.predict(sample.image, ensemble_heads=True) == pytest.approx(
        np.mean([scores["p1"], scores["p2"], scores["p3"]]), abs=1e-12)
    assert 0.0 <= pred.predict(sample.image) <= 1.0
    with pytest.raises(ValueError, match="shape"):
        pred.predict(np.zeros((8, 8, 8)))


def test_checkpoint_reload_predicts_bit_identically(tmp_path, micro_cfg, phantoms):
    from pare.training import load_checkpoint
    cfg = micro_cfg.with_overrides(["train.total_iters=3"])
    state, _ = train(cfg, phantoms)
    before = predict_samples(state, cfg, phantoms[:6]).scores
    save_checkpoint(state, cfg, tmp_path / "c.pck")
    cfg2, state2 = load_checkpoint(tmp_path / "c.pck")
    assert cfg2.canonical_text() == cfg.canonical_text()
    assert predict_samples(state2, cfg2, phantoms[:6]).scores == before


def test_determinism_same_seed_same_trace(micro_cfg, phantoms):
    cfg = micro_cfg.with_overrides(["train.total_iters=6"])
    _, a = train(cfg, phantoms)
    _, b = train(cfg, phantoms)
    assert [r.line() for r in a] == [r.line() for r in b]
    _, c = train(cfg.with_overrides(["train.seed=1"]), phantoms)
    assert [r.line() for r in a] != [r.line() for r in c]


def test_resume_reproduces_trace(tmp_path, micro_cfg, phantoms):
    from pare.training import load_checkpoint
    cfg = micro_cfg.with_overrides(["train.total_iters=10", "train.checkpoint_every=4", "train.warmup_W=6"])
    _, full = train(cfg, phantoms)
    _, first = train(cfg, phantoms, out_dir=tmp_path, stop_at=4)
    cfg2, state = load_checkpoint(tmp_path / "ckpt_000004.pck")
    _, rest = train(cfg2, phantoms, out_dir=tmp_path, state=state)
    resumed = first + rest
    assert len(resumed) == len(full)
    for a, b in zip(full, resumed):
        for k in StepReport.FIELDS:
            assert getattr(b, k) == pytest.approx(getattr(a, k), abs=1e-6)
    log = (tmp_path / "train_log.txt").read_text().splitlines()
    assert [StepReport.parse(l) for l in log] == resumed


def test_step_report_line_round_trip():
    r = StepReport(3, 0.1, 0.2, 0.3, 0.4, 1.0000000000000002, 2.5, 1e-3)
    assert StepReport.parse(r.line()) == r


def test_non_finite_loss_raises_with_report(micro_cfg, phantoms):
    state = init_state(micro_cfg)
    state.params["head_p1.fc1.bias"].data[:] = np.nan
    with pytest.raises(NonFiniteLossError) as err:
        train_step(state, _batch(micro_cfg, phantoms), micro_cfg)
    assert err.value.report.iteration == 1
    assert "cls_loss_p1=nan" in str(err.value)


def test_balanced_sampling_and_sorted_indices(micro_cfg):
    labels = np.array([0] * 20 + [1] * 3)
    for it in range(20):
        idx = sample_indices(labels, it, micro_cfg)
        assert list(idx) == sorted(idx)
        assert labels[idx].sum() == micro_cfg.train.batch_size // 2


def test_empty_batch_rejected(micro_cfg, phantoms):
    batch = _batch(micro_cfg, phantoms)
    batch.labels = batch.labels[:0]
    with pytest.raises(ValueError, match="empty"):
        train_step(init_state(micro_cfg), batch, micro_cfg)


def test_train_state_defaults():
    s = TrainState(params={})
    assert s.iteration == 0 and s.warmup == {0: [], 1: []}
