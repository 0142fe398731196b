from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
import torch

import gftab.trainer as trainer_mod
from gftab.encoder import EncoderConfig
from gftab.tabular import generate_synthetic, make_split
from gftab.trainer import (
    Batch,
    CheckpointError,
    FitState,
    GFTabModel,
    TrainConfig,
    fit,
    learning_rate,
    load_checkpoint,
    prepare,
    read_arrays,
    save_checkpoint,
)
from gftab.trees import GbdtConfig

TINY = EncoderConfig(d_emb=6, n_heads=2, d_attn=3, n_layers=1, depths=1, d_lin=8, D=2)


def _cfg(**kw) -> TrainConfig:
    base = dict(
        encoder=TINY,
        gbdt=GbdtConfig(n_trees=3, max_depth=2),
        batch_labeled=16,
        batch_unlabeled=32,
        max_epochs=3,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


def _setup(ds, cfg, rho=0.2):
    split = make_split(ds, rho, 0.0, 0.15, 0.15, seed=cfg.seed)
    ds2, gbdt = prepare(ds, split, cfg)
    model = GFTabModel.build(ds2, gbdt, cfg)
    leaf = gbdt.apply(model.tree_features(ds2))
    lab = split.labeled_idx[:8]
    lb = Batch(ds2.cont[lab], ds2.cat[lab], leaf[lab], split.noisy_labels[:8])
    un = split.unlabeled_idx[:32]
    ub = Batch(ds2.cont[un], ds2.cat[un])
    return model, lb, ub, split


def test_config_validation():
    with pytest.raises(ValueError):
        _cfg(beta=-1.0)
    with pytest.raises(ValueError):
        _cfg(batch_unlabeled=1)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"bogus": 1})
    cfg = _cfg()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("beta", [0.0, 0.3, 1.0, 2.5])
def test_loss_composition(small_ds, beta):
    model, lb, ub, _ = _setup(small_ds, _cfg(beta=beta))
    rng = np.random.default_rng(0)
    for _ in range(3):
        res = model.train_step(lb, ub, rng)
        assert abs(res.loss_total - (res.loss_sim + beta * res.loss_ce)) <= 1e-12


def test_beta_zero_head_and_leaf_gradients_vanish(small_ds):
    model, lb, ub, _ = _setup(small_ds, _cfg(beta=0.0))
    total, sim, _ = model.losses(lb, ub, np.random.default_rng(0))
    assert total.item() == sim.item()
    total.backward()
    enc = model.encoder
    for p in (enc.head.weight, enc.head.bias, enc.leaf_table):
        assert p.grad is None or torch.count_nonzero(p.grad) == 0


def test_supervised_only_total_is_ce(small_ds):
    model, lb, _, _ = _setup(small_ds, _cfg())
    res = model.train_step(lb, None, np.random.default_rng(0))
    assert res.loss_sim == 0.0 and res.loss_total == res.loss_ce


def test_identity_views_give_zero_similarity_loss(small_ds):
    model, lb, ub, _ = _setup(small_ds, _cfg(lam=0.5, cat_strategy="none"))
    _, sim, _ = model.losses(lb, ub, np.random.default_rng(0))
    assert abs(sim.item()) <= 1e-12


def test_degenerate_subspace_skips_step(small_ds):
    model, lb, ub, _ = _setup(small_ds, _cfg())
    # constant representations: every row collapses onto the output bias
    with torch.no_grad():
        model.encoder.pool[-1].weight.zero_()
    before = [p.detach().clone() for p in model.encoder.parameters()]
    res = model.train_step(lb, ub, np.random.default_rng(0))
    assert res.skipped and math.isnan(res.loss_total)
    assert all(torch.equal(a, b) for a, b in zip(before, model.encoder.parameters()))


def test_learning_rate_schedule():
    cfg = _cfg(lr=1.0, lr_step_epochs=2, lr_decay_factor=0.5)
    assert [learning_rate(cfg, e) for e in range(5)] == [1.0, 1.0, 0.5, 0.5, 0.25]
    warm = _cfg(lr=1.0, warmup_epochs=4, lr_step_epochs=50)
    assert [learning_rate(warm, e) for e in range(5)] == [0.25, 0.5, 0.75, 1.0, 1.0]


def test_adamw_three_step_hand_computation():
    # f(w) = 0.5 * |w - c|^2 on two parameters
    c = np.array([1.0, -2.0])
    w0 = np.array([0.5, 0.5])
    lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.01
    w = torch.tensor(w0.copy(), requires_grad=True)
    opt = torch.optim.AdamW([w], lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
    x, m, v = w0.copy(), np.zeros(2), np.zeros(2)
    for t in range(1, 4):
        opt.zero_grad()
        (0.5 * ((w - torch.from_numpy(c)) ** 2).sum()).backward()
        opt.step()
        g = x - c
        x = x * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1**t), v / (1 - b2**t)
        x = x - lr * mh / (np.sqrt(vh) + eps)
        np.testing.assert_allclose(w.detach().numpy(), x, rtol=0, atol=1e-14)


def test_model_optimizer_settings(small_ds):
    model, *_ = _setup(small_ds, _cfg(weight_decay=0.05))
    groups = model.optimizer.param_groups
    assert groups[0]["weight_decay"] == 0.05 and groups[1]["weight_decay"] == 0.0
    assert groups[1]["params"][0] is model.encoder.leaf_table
    n = sum(len(g["params"]) for g in groups)
    assert n == len(list(model.encoder.parameters()))


def test_fit_single_epoch(small_ds, tmp_path):
    cfg = _cfg(max_epochs=1)
    split = make_split(small_ds, 0.2, 0.0, 0.15, 0.15, seed=0)
    res = fit(small_ds, split, cfg, history_path=tmp_path / "h.jsonl")
    assert len(res.history) == 1
    rec = res.history[0]
    assert set(rec) == {"epoch", "loss_sim", "loss_ce", "loss_total", "val_f1", "lr"}
    assert len((tmp_path / "h.jsonl").read_text().splitlines()) == 1


def test_fit_requires_validation(small_ds):
    split = make_split(small_ds, 0.2, 0.0, 0.0, 0.15, seed=0)
    with pytest.raises(ValueError):
        fit(small_ds, split, _cfg())


def test_patience_early_stop(small_ds, monkeypatch):
    scores = iter([0.9 - 0.01 * i for i in range(100)])
    monkeypatch.setattr(trainer_mod, "macro_f1", lambda *a, **k: next(scores))
    split = make_split(small_ds, 0.2, 0.0, 0.15, 0.15, seed=0)
    res = fit(small_ds, split, _cfg(max_epochs=50, patience=10))
    assert len(res.history) == 11
    assert res.best_epoch == 1 and res.best_f1 == pytest.approx(0.9)


def test_best_epoch_parameters_returned(small_ds, tmp_path, monkeypatch):
    scores = iter([0.5, 0.9, 0.1])
    monkeypatch.setattr(trainer_mod, "macro_f1", lambda *a, **k: next(scores))
    split = make_split(small_ds, 0.2, 0.0, 0.15, 0.15, seed=0)
    res = fit(small_ds, split, _cfg(max_epochs=3), checkpoint_dir=tmp_path)
    best, state, _ = load_checkpoint(tmp_path / "best.ckpt")
    assert state.epoch == 2 and res.best_epoch == 2
    for k, v in best.encoder.state_dict().items():
        assert torch.equal(v, res.model.encoder.state_dict()[k])


def test_checkpoint_round_trip_bitwise(small_ds, tmp_path):
    split = make_split(small_ds, 0.2, 0.0, 0.15, 0.15, seed=0)
    res = fit(small_ds, split, _cfg(max_epochs=2), checkpoint_dir=tmp_path)
    model, state, _ = load_checkpoint(tmp_path / "last.ckpt")
    a1, m1 = read_arrays(tmp_path / "last.ckpt")
    save_checkpoint(model, state, tmp_path / "again.ckpt", res.dataset)
    assert (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "last.ckpt").read_bytes()
    a2, _ = read_arrays(tmp_path / "again.ckpt")
    assert a1.keys() == a2.keys() and all(a1[k].tobytes() == a2[k].tobytes() for k in a1)
    np.testing.assert_array_equal(model.gbdt.apply(np.hstack([res.dataset.cont, res.dataset.cat])), res.model.gbdt.apply(np.hstack([res.dataset.cont, res.dataset.cat])))


def test_checkpoint_errors(small_ds, tmp_path):
    split = make_split(small_ds, 0.2, 0.0, 0.15, 0.15, seed=0)
    fit(small_ds, split, _cfg(max_epochs=1), checkpoint_dir=tmp_path)
    raw = (tmp_path / "last.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "ver.ckpt").write_bytes(raw.replace(b'"version": 1', b'"version": 9'))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_resume_reproduces_uninterrupted_run(small_ds, tmp_path):
    split = make_split(small_ds, 0.2, 0.0, 0.15, 0.15, seed=3)
    cfg = _cfg(max_epochs=4, seed=3)
    full = fit(small_ds, split, cfg)
    fit(small_ds, split, replace(cfg, max_epochs=2), checkpoint_dir=tmp_path)
    resumed = fit(small_ds, split, cfg, resume=tmp_path / "last.ckpt")
    assert resumed.history == full.history
    for k, v in full.model.encoder.state_dict().items():
        assert torch.equal(v, resumed.model.encoder.state_dict()[k])


def test_resume_rejects_other_config(small_ds, tmp_path):
    split = make_split(small_ds, 0.2, 0.0, 0.15, 0.15, seed=0)
    fit(small_ds, split, _cfg(max_epochs=1), checkpoint_dir=tmp_path)
    with pytest.raises(CheckpointError):
        fit(small_ds, split, _cfg(max_epochs=2, beta=0.5), resume=tmp_path / "last.ckpt")


def test_determinism(small_ds):
    split = make_split(small_ds, 0.2, 0.0, 0.15, 0.15, seed=1)
    a = fit(small_ds, split, _cfg(seed=1))
    b = fit(small_ds, split, _cfg(seed=1))
    assert a.history == b.history


def test_untrained_state_checkpoint(small_ds, tmp_path):
    cfg = _cfg()
    split = make_split(small_ds, 0.2, 0.0, 0.15, 0.15, seed=0)
    ds, gbdt = prepare(small_ds, split, cfg)
    model = GFTabModel.build(ds, gbdt, cfg)
    save_checkpoint(model, FitState(), tmp_path / "init.ckpt", ds)
    back, state, _ = load_checkpoint(tmp_path / "init.ckpt")
    assert state.epoch == 0 and state.best_params is None
    for k, v in model.encoder.state_dict().items():
        assert torch.equal(v, back.encoder.state_dict()[k])


@pytest.mark.slow
def test_separable_synthetic_reaches_target():
    ds = generate_synthetic(2000, 4, 4, 2, 5.0, seed=0)
    split = make_split(ds, 0.1, 0.0, 0.15, 0.15, seed=0)
    cfg = TrainConfig(
        encoder=EncoderConfig(d_emb=12, n_heads=2, d_attn=12, n_layers=1, depths=1, d_lin=16, D=4),
        gbdt=GbdtConfig(n_trees=10, max_depth=3),
        max_epochs=200,
        seed=0,
    )
    res = fit(ds, split, cfg)
    assert res.best_f1 >= 0.85
