import copy
import inspect
import math

import numpy as np
import pytest
import torch

from advaug.checkpoint import load_checkpoint, read_arrays, save_checkpoint
from advaug.config import RunConfig
from advaug.data import build_dataset
from advaug.errors import ConfigError, TrainingAbort
from advaug.trainer import (Trainer, TripletState, epoch_order, forward_losses,
                            split_batch, train_step)

from conftest import small_config
from oracles import round_robin_split


def make_batches(cfg, n=None):
    ds = build_dataset(cfg.dataset)
    n = n or cfg.train.batch_size
    imgs = torch.as_tensor(ds.train_images[:n])
    labs = torch.as_tensor(ds.train_labels[:n])
    imgs2 = torch.as_tensor(ds.train_images[n:2 * n])
    return imgs, labs, imgs2


def test_split_batch_sizes_even_and_odd():
    kinds = ("affine", "deform", "appearance")
    for n, expected in [(8, (2, 2, 2, 2)), (7, (2, 2, 2, 1)), (4, (1, 1, 1, 1))]:
        imgs = torch.arange(n, dtype=torch.float32).reshape(n, 1, 1, 1)
        labs = torch.arange(n)
        parts = split_batch(imgs, labs, kinds)
        sizes = tuple(parts[k][0].shape[0] for k in ("clean",) + kinds)
        assert sizes == expected


def test_split_batch_matches_round_robin_oracle():
    kinds = ("affine", "deform", "appearance")
    imgs = torch.arange(7, dtype=torch.float32).reshape(7, 1, 1, 1)
    parts = split_batch(imgs, torch.arange(7), kinds)
    oracle = round_robin_split(7, 4)
    for p, name in enumerate(("clean",) + kinds):
        assert parts[name][0].reshape(-1).tolist() == [float(i) for i in oracle[p]]


def test_split_batch_covers_every_example_once():
    kinds = ("affine", "deform")
    imgs = torch.arange(11, dtype=torch.float32).reshape(11, 1, 1, 1)
    parts = split_batch(imgs, torch.arange(11), kinds)
    seen = sorted(v for name in parts for v in parts[name][0].reshape(-1).tolist())
    assert seen == [float(i) for i in range(11)]


def test_split_batch_too_small_errors():
    with pytest.raises(ConfigError):
        split_batch(torch.zeros(2, 1, 1, 1), torch.zeros(2), ("affine", "deform", "appearance"))


def test_step0_identity_contract():
    cfg = small_config()
    state = TripletState(cfg)
    imgs, labs, imgs2 = make_batches(cfg)
    state.set_train(True)
    out = forward_losses(state, imgs, labs)
    parts = split_batch(imgs, labs, state.enabled)
    expected_fake = torch.cat([parts[k][0] for k in state.enabled])
    assert torch.equal(out["fake"], expected_fake)  # x_hat == x at identity init
    assert all(float(v.detach()) == 0.0 for v in out["regs"].values())

    state2 = TripletState(cfg)
    report = train_step(state2, imgs, labs, imgs2)
    assert report.l_reg_affine == report.l_reg_deform == report.l_reg_appear == 0.0
    assert report.l_gan_d == pytest.approx(2 * math.log(0.5), abs=1e-6)


def test_two_runs_same_seed_identical_reports():
    cfg = small_config(train={"epochs": 2})
    ds = build_dataset(cfg.dataset)

    def run():
        state = TripletState(cfg)
        trainer = Trainer(state, ds.train_images, ds.train_labels)
        return trainer.fit()

    rows_a = [r.csv_row() for r in run()]
    rows_b = [r.csv_row() for r in run()]
    assert len(rows_a) >= 2
    assert rows_a == rows_b


def test_one_step_changes_every_network():
    cfg = small_config()
    state = TripletState(cfg)
    before = {name: copy.deepcopy(net.state_dict()) for name, net in state.networks().items()}
    imgs, labs, imgs2 = make_batches(cfg)
    train_step(state, imgs, labs, imgs2)
    for name, net in state.networks().items():
        changed = any(not torch.equal(before[name][k], t)
                      for k, t in net.state_dict().items() if t.is_floating_point())
        assert changed, f"{name} has no changed parameter after one step"


def test_fused_reversal_matches_explicit_two_pass():
    cfg = small_config()
    state1 = TripletState(cfg)
    imgs, labs, _ = make_batches(cfg, n=4)
    state1.set_train(True)
    rng = torch.get_rng_state()
    out1 = forward_losses(state1, imgs, labs, reverse=True)
    fused = (out1["l_adv"] + cfg.loss.lambda_gan * out1["l_gan_g"]
             + cfg.loss.gamma_reg * sum(out1["regs"].values()))
    for p in state1.discriminator.parameters():
        p.requires_grad_(False)
    fused.backward()

    state2 = TripletState(cfg)
    state2.set_train(True)
    torch.set_rng_state(rng)
    out2 = forward_losses(state2, imgs, labs, reverse=False)
    zero = lambda g, p: torch.zeros_like(p) if g is None else g
    for kind in state2.enabled:
        p1 = list(state1.generators[kind].parameters())
        p2 = list(state2.generators[kind].parameters())
        ga = torch.autograd.grad(out2["l_adv"], p2, retain_graph=True, allow_unused=True)
        gg = torch.autograd.grad(out2["l_gan_g"], p2, retain_graph=True, allow_unused=True)
        gr = torch.autograd.grad(sum(out2["regs"].values()), p2, retain_graph=True,
                                 allow_unused=True)
        for pf, pe, a, g, r in zip(p1, p2, ga, gg, gr):
            explicit = (-zero(a, pe) + cfg.loss.lambda_gan * zero(g, pe)
                        + cfg.loss.gamma_reg * zero(r, pe))
            got = pf.grad if pf.grad is not None else torch.zeros_like(pf)
            denom = torch.clamp(torch.maximum(got.abs(), explicit.abs()), min=1e-8)
            assert ((got - explicit).abs() / denom).max().item() < 1e-6


def test_single_pass_economy_counters():
    cfg = small_config()
    state = TripletState(cfg)
    imgs, labs, imgs2 = make_batches(cfg)
    state.reset_counters()
    train_step(state, imgs, labs, imgs2)
    assert state.counters["fused_backward"] == 1
    assert state.counters["disc_backward"] == 1
    for kind, gen in state.generators.items():
        assert gen.forward_calls == 1, kind


def test_fit_zero_epochs_returns_empty_history(tmp_path):
    cfg = small_config(train={"epochs": 0, "out_dir": str(tmp_path / "run")})
    ds = build_dataset(cfg.dataset)
    state = TripletState(cfg)
    before = copy.deepcopy(state.target.state_dict())
    trainer = Trainer(state, ds.train_images, ds.train_labels, out_dir=cfg.train.out_dir)
    history = trainer.fit()
    assert history == []
    assert all(torch.equal(before[k], t) for k, t in state.target.state_dict().items())
    assert (tmp_path / "run" / "metrics.csv").read_text().strip() == \
        "step,l_adv,l_gan_g,l_gan_d,l_reg_affine,l_reg_deform,l_reg_appear,l_overall"


def test_resume_continues_identical_stream(tmp_path):
    cfg3 = small_config(train={"epochs": 3, "checkpoint_every": 10_000,
                               "out_dir": str(tmp_path / "a")})
    cfg1 = small_config(train={"epochs": 1, "checkpoint_every": 10_000,
                               "out_dir": str(tmp_path / "b")})
    ds = build_dataset(cfg3.dataset)

    full = Trainer(TripletState(cfg3), ds.train_images, ds.train_labels,
                   out_dir=tmp_path / "a").fit()
    part1 = Trainer(TripletState(cfg1), ds.train_images, ds.train_labels,
                    out_dir=tmp_path / "b").fit()
    ckpt = tmp_path / "b" / "checkpoint_epoch0001.npz"
    part2 = Trainer(TripletState(cfg3), ds.train_images, ds.train_labels,
                    out_dir=tmp_path / "c").fit(resume_from=ckpt)

    rows_full = [r.csv_row() for r in full]
    rows_joined = [r.csv_row() for r in part1] + [r.csv_row() for r in part2]
    assert rows_joined == rows_full


def test_trainer_has_no_heldout_access():
    params = inspect.signature(Trainer.__init__).parameters
    names = " ".join(params)
    assert "test" not in names and "val" not in names
    cfg = small_config()
    ds = build_dataset(cfg.dataset)
    trainer = Trainer(TripletState(cfg), ds.train_images, ds.train_labels)
    held_out = [a for a in vars(trainer) if "test" in a or "val" in a]
    assert held_out == []


def test_step_counter_and_report_consistency():
    cfg = small_config()
    state = TripletState(cfg)
    imgs, labs, imgs2 = make_batches(cfg)
    for expected_step in (1, 2, 3):
        report = train_step(state, imgs, labs, imgs2)
        assert state.step == expected_step
        assert report.step == expected_step
        total = (report.l_adv + report.weights.lambda_gan * report.l_gan_g
                 + report.weights.gamma_reg * report.l_reg)
        assert report.l_overall == pytest.approx(total, abs=1e-6)


def test_train_step_rejects_tiny_quarters():
    cfg = small_config()
    state = TripletState(cfg)
    imgs, labs, _ = make_batches(cfg)
    with pytest.raises(ConfigError):
        train_step(state, imgs[:7], labs[:7], imgs[:7])


def test_epoch_order_is_pure_function():
    a = epoch_order(3, 5, 0, 40)
    b = epoch_order(3, 5, 0, 40)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, epoch_order(3, 6, 0, 40))
    assert not np.array_equal(a, epoch_order(3, 5, 1, 40))


def test_nan_parameter_aborts():
    cfg = small_config()
    state = TripletState(cfg)
    imgs, labs, imgs2 = make_batches(cfg)
    train_step(state, imgs, labs, imgs2)
    with torch.no_grad():
        state.target.fc.weight[0, 0] = float("nan")
    with pytest.raises(TrainingAbort):
        train_step(state, imgs, labs, imgs2)


def test_no_generator_baseline_mode():
    cfg = small_config(train={"enabled_generators": [], "batch_size": 8})
    state = TripletState(cfg)
    assert state.discriminator is None
    assert sorted(state.networks()) == ["T"]
    imgs, labs, imgs2 = make_batches(cfg)
    report = train_step(state, imgs, labs, imgs2)
    assert report.l_gan_g == 0.0 and report.l_gan_d == 0.0 and report.l_reg == 0.0
    assert report.l_overall == pytest.approx(report.l_adv)


def test_ablation_single_generator_networks():
    cfg = small_config(train={"enabled_generators": ["affine"], "batch_size": 8})
    state = TripletState(cfg)
    assert sorted(state.networks()) == ["T", "discriminator", "gen_affine"]
    imgs, labs, imgs2 = make_batches(cfg)
    report = train_step(state, imgs, labs, imgs2)
    assert report.l_reg_deform == 0.0 and report.l_reg_appear == 0.0


def test_checkpoint_roundtrip_and_naming(tmp_path):
    cfg = small_config()
    state = TripletState(cfg)
    imgs, labs, imgs2 = make_batches(cfg)
    train_step(state, imgs, labs, imgs2)
    path = save_checkpoint(tmp_path / "ck.npz", state)
    arrays = read_arrays(path)
    assert "meta/step" in arrays and int(arrays["meta/step"]) == 1
    bn_keys = [k for k in arrays if "/bn.main/" in k and k.startswith("T/")]
    assert bn_keys, "target BN arrays must follow T/<site>/bn.<group>/<param>"
    assert any(k.startswith("gen_affine/") for k in arrays)

    state2 = TripletState(cfg)
    load_checkpoint(path, state2)
    for name, net in state.networks().items():
        other = state2.networks()[name].state_dict()
        for key, t in net.state_dict().items():
            assert torch.equal(t, other[key]), (name, key)
    assert state2.step == 1

    # same state saved twice -> identical bytes
    path2 = save_checkpoint(tmp_path / "ck2.npz", state)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_network_mismatch_errors(tmp_path):
    cfg = small_config(train={"enabled_generators": ["affine"], "batch_size": 8})
    state = TripletState(cfg)
    path = save_checkpoint(tmp_path / "ck.npz", state)
    full = TripletState(small_config())
    with pytest.raises(ValueError):
        load_checkpoint(path, full)


def test_checkpoint_class_count_mismatch_errors(tmp_path):
    cfg = small_config()
    state = TripletState(cfg)
    path = save_checkpoint(tmp_path / "ck.npz", state)
    other = TripletState(small_config(dataset={"num_classes": 3}))
    with pytest.raises(ValueError):
        load_checkpoint(path, other)
