import math

import pytest
import torch

from gldmnet import config, data
from gldmnet.losses import LossBreakdown
from gldmnet.train import (CheckpointError, NonFiniteLossError, apply_freeze,
                           evaluate_checkpoint, frozen_groups, load_checkpoint, lr_at,
                           model_from_checkpoint, overfit_smoke, read_history, save_checkpoint,
                           train)

from conftest import SMALL
from synth import write_dataset


def tiny_cfg(**extra):
    over = dict(SMALL)
    over.update({"data.augment": False, "train.batch_size": 1, "train.checkpoint_every": 1})
    over.update(extra)
    return config.resolve(overrides=over)


@pytest.fixture(scope="module")
def two_samples(tmp_path_factory):
    root = tmp_path_factory.mktemp("two")
    write_dataset(root, "PAIR", n=2, size=(64, 64), seed=3)
    return data.build_manifest(root)


# ---------------------------------------------------------------- schedule

def test_lr_closed_form():
    assert lr_at(20) == pytest.approx(5.438e-5, rel=1e-3)
    for k in range(200):
        assert abs(lr_at(k) - 1e-4 * 0.97 ** k) <= 1e-12
    assert lr_at(0) == 1e-4


def test_frozen_groups_boundaries():
    assert frozen_groups(0) == frozen_groups(29) == {"cnn"}
    assert frozen_groups(30) == frozen_groups(59) == {"transformer"}
    assert frozen_groups(60) == frozen_groups(199) == set()


def test_apply_freeze_flags(small_cfg):
    from gldmnet.model import GLDMNet
    model = GLDMNet.from_config(small_cfg)
    apply_freeze(model, {"cnn"})
    assert not any(p.requires_grad for p in model.cnn_parameters())
    assert all(p.requires_grad for p in model.transformer_parameters())
    assert all(p.requires_grad for p in model.fusion.parameters())
    apply_freeze(model, {"transformer"})
    assert all(p.requires_grad for p in model.cnn_parameters())
    assert not any(p.requires_grad for p in model.transformer_parameters())


def _snapshot(path, which):
    state = load_checkpoint(path)["model"]
    prefixes = {"cnn": ("rgb_encoder.", "depth_encoder."), "transformer": ("decoder.trans.",)}
    model = model_from_checkpoint(load_checkpoint(path))
    names = {n for n, _ in model.named_parameters()}
    return {k: v for k, v in state.items() if k in names and k.startswith(prefixes[which])}


def _same(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="module")
def phased_run(two_samples, tmp_path_factory):
    run = tmp_path_factory.mktemp("phased")
    cfg = tiny_cfg(**{"train.epochs": 9, "train.freeze_cnn_epochs": 3,
                      "train.freeze_transformer_epochs": 3})
    save_checkpoint(run / "epoch_000.pt", _init_model(cfg), None, 0, 0, cfg)
    result = train(cfg, two_samples, run)
    return run, result, cfg


def _init_model(cfg):
    from gldmnet.model import GLDMNet
    torch.manual_seed(cfg["train.seed"])
    return GLDMNet.from_config(cfg)


def test_freeze_phases_by_snapshot(phased_run):
    run, _, _ = phased_run
    snaps = {e: {w: _snapshot(run / f"epoch_{e:03d}.pt", w) for w in ("cnn", "transformer")}
             for e in range(10)}
    # phase 1: encoders constant from init through the end of epoch 3
    for e in (1, 2, 3):
        assert _same(snaps[0]["cnn"], snaps[e]["cnn"])
    assert not _same(snaps[0]["transformer"], snaps[1]["transformer"])
    # phase 2: transformer constant through epochs 4..6, encoders move
    for e in (4, 5, 6):
        assert _same(snaps[3]["transformer"], snaps[e]["transformer"])
        assert not _same(snaps[e - 1]["cnn"], snaps[e]["cnn"])
    # phase 3: everything trains
    for e in (7, 8, 9):
        assert not _same(snaps[e - 1]["cnn"], snaps[e]["cnn"])
        assert not _same(snaps[e - 1]["transformer"], snaps[e]["transformer"])


def test_history_csv_and_lr(phased_run):
    run, result, _ = phased_run
    rows = read_history(run / "loss_history.csv")
    assert len(rows) == 18
    assert list(rows[0]) == ["step", "epoch", "lr", "bce1", "bce2", "bce3", "bce4",
                             "iou1", "iou2", "iou3", "iou4", "total"]
    for r in rows:
        assert r["lr"] == pytest.approx(1e-4 * 0.97 ** r["epoch"], abs=1e-12)
        weighted = sum(l * (r[f"bce{i}"] + r[f"iou{i}"])
                       for i, l in zip(range(1, 5), (0.8, 0.6, 0.4, 0.2)))
        assert r["total"] == pytest.approx(weighted, rel=1e-5)
    assert result.checkpoint.name == "epoch_009.pt"


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_bitwise_round_trip(phased_run, tmp_path):
    run, _, cfg = phased_run
    ckpt = load_checkpoint(run / "last.pt")
    model = model_from_checkpoint(ckpt)
    opt = torch.optim.Adam(model.parameters())
    opt.load_state_dict(ckpt["optimizer"])
    torch.set_rng_state(ckpt["rng"])
    a = save_checkpoint(tmp_path / "a.pt", model, opt, ckpt["epoch"], ckpt["step"], cfg)
    model2 = model_from_checkpoint(load_checkpoint(a))
    opt2 = torch.optim.Adam(model2.parameters())
    opt2.load_state_dict(load_checkpoint(a)["optimizer"])
    torch.set_rng_state(ckpt["rng"])
    b = save_checkpoint(tmp_path / "b.pt", model2, opt2, ckpt["epoch"], ckpt["step"], cfg)
    assert a.read_bytes() == b.read_bytes()
    sa, sb = load_checkpoint(a)["model"], ckpt["model"]
    assert all(torch.equal(sa[k], sb[k]) for k in sb)


@pytest.mark.parametrize("interrupt", [3, 4])
def test_resume_reproduces_step_losses(two_samples, tmp_path, interrupt):
    cfg = tiny_cfg(**{"train.epochs": 5, "train.freeze_cnn_epochs": 1,
                      "train.freeze_transformer_epochs": 1})
    full = train(cfg, two_samples, tmp_path / "full")
    part = tmp_path / "part"
    train(cfg, two_samples, part, max_steps=interrupt)
    resumed = train(cfg, two_samples, part, resume=part / "last.pt")
    tail = [r["total"] for r in resumed.history if r["step"] >= interrupt]
    want = [r["total"] for r in full.history if r["step"] >= interrupt]
    assert len(tail) >= 5
    assert tail == want
    rows = read_history(part / "loss_history.csv")
    assert [r["step"] for r in rows] == list(range(10))


def test_resume_config_mismatch(two_samples, tmp_path):
    cfg = tiny_cfg(**{"train.epochs": 1})
    train(cfg, two_samples, tmp_path, max_steps=1)
    other = dict(cfg, **{"train.lr": 5e-4})
    with pytest.raises(CheckpointError, match="does not match"):
        train(other, two_samples, tmp_path, resume=tmp_path / "last.pt")
    train(other, two_samples, tmp_path / "forced", resume=tmp_path / "last.pt",
          allow_config_mismatch=True, max_steps=2)


def test_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"\x00" * 64)
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "none.pt")
    torch.save({"weights": 1}, tmp_path / "odd.pt")
    with pytest.raises(CheckpointError, match="not a training checkpoint"):
        load_checkpoint(tmp_path / "odd.pt")


def test_empty_manifest():
    with pytest.raises(ValueError, match="empty"):
        train(tiny_cfg(), [])


def test_non_finite_loss_names_stems(two_samples, monkeypatch):
    import gldmnet.train as train_mod

    def nan_loss(model, batch, cfg):
        t = torch.tensor(math.nan, requires_grad=True)
        return LossBreakdown([(t, t)] * 4, t)

    monkeypatch.setattr(train_mod, "_loss", nan_loss)
    with pytest.raises(NonFiniteLossError, match="img00"):
        train(tiny_cfg(**{"train.shuffle": False}), two_samples)


# ---------------------------------------------------------------- smoke harness

def test_zero_lr_is_flat(two_samples):
    traj, _ = overfit_smoke(tiny_cfg(), two_samples, steps=4, lr=0.0)
    assert len(set(traj)) == 1


def test_frozen_everything_is_flat(two_samples):
    traj, _ = overfit_smoke(tiny_cfg(), two_samples, steps=4, freeze_all=True)
    assert len(set(traj)) == 1


def test_short_smoke_decreases(two_samples):
    traj, _ = overfit_smoke(tiny_cfg(), two_samples, steps=15, lr=1e-3)
    assert traj[-1] < traj[0]


def test_evaluate_checkpoint_deterministic(phased_run, two_samples, tmp_path):
    run, _, _ = phased_run
    rep, out = evaluate_checkpoint(run / "last.pt", two_samples, tmp_path / "a")
    evaluate_checkpoint(run / "last.pt", two_samples, tmp_path / "b")
    maps = sorted((tmp_path / "a").rglob("*.png"))
    assert len(maps) == 2
    for m in maps:
        assert m.read_bytes() == (tmp_path / "b" / m.relative_to(tmp_path / "a")).read_bytes()
    assert (out / "report.txt").is_file() and 0 <= rep.mae <= 1
