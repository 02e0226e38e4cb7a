"""Acceptance criteria, one test per criterion.

Each test prints a single ``CRITERION <n> PASS|FAIL: <detail>`` line straight
to the terminal (visible without ``-s``) before asserting.
"""
import math
import time

import numpy as np
import pytest
import torch

from gldmnet import cli, config, data, metrics
from gldmnet.fusion import (ChannelMutualFusion, PositionMutualFusion, channel_attention,
                            position_attention)
from gldmnet.losses import bce_loss, iou_loss, total_loss
from gldmnet.model import GLDMNet, build, count_parameters
from gldmnet.train import (evaluate_model, load_checkpoint, lr_at, model_from_checkpoint,
                           overfit_smoke, save_checkpoint, train)

import oracles
from conftest import SMALL
from frozen import FROZEN, fixtures
from synth import write_dataset


@pytest.fixture
def report(request):
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def emit(n, ok, detail):
        with capman.global_and_fixture_disabled():
            print(f"\nCRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
        assert ok, f"criterion {n}: {detail}"

    return emit


def rand(shape, seed):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def fd_grad(fn, x, step):
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = fn().item()
        flat[i] = orig - step
        lo = fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return g


def rel_err(a, b):
    return ((a - b).norm() / b.norm()).item()


# ---------------------------------------------------------------- 1

def test_criterion_1_fusion_oracle(report):
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(20):
        f_rgb, f_d, f_pre = (rand((1, 8, 4, 4), 1000 + 3 * k + j) for j in range(3))
        args = (f_rgb[0].tolist(), f_d[0].tolist(), f_pre[0].tolist())
        for got, want in ((position_attention(f_rgb, f_d, f_pre), oracles.pmf_products(*args)),
                          (channel_attention(f_rgb, f_d, f_pre), oracles.cmf_products(*args))):
            for key, ref in want.items():
                ref = np.array(ref)
                g = got[key][0].reshape(ref.shape[0], -1).numpy()
                worst = max(worst, float(np.max(np.abs(g - ref) / np.maximum(np.abs(ref), 1e-300))))
    elapsed = time.perf_counter() - t0
    report(1, worst <= 1e-5 and elapsed < 10,
           f"max elementwise rel err {worst:.2e} (tol 1e-5) over 20 instances, {elapsed:.2f}s (< 10s)")


# ---------------------------------------------------------------- 2

def test_criterion_2_gradient_checks(report):
    t0 = time.perf_counter()
    errs = {}
    torch.manual_seed(0)
    for name, cls in (("PMF", PositionMutualFusion), ("CMF", ChannelMutualFusion)):
        mod = cls(4).double().eval()
        xs = [rand((1, 4, 8, 8), 50 + j).requires_grad_(True) for j in range(3)]
        mod(*xs).sum().backward()
        worst = 0.0
        for x in xs:
            with torch.no_grad():
                num = fd_grad(lambda: mod(*xs).sum(), x.detach(), 1e-6)
            worst = max(worst, rel_err(x.grad, num))
        errs[name] = (worst, 1e-2)

    G = (rand((8, 8), 70) > 0).double()
    for name, fn in (("bce_loss", bce_loss), ("iou_loss", iou_loss)):
        S = (torch.sigmoid(rand((8, 8), 71))).requires_grad_(True)
        fn(S, G).backward()
        with torch.no_grad():
            num = fd_grad(lambda: fn(S, G), S.detach(), 1e-4)
        errs[name] = (rel_err(S.grad, num), 1e-3)
    maps = [torch.sigmoid(rand((8, 8), 80 + i)).requires_grad_(True) for i in range(4)]
    total_loss(maps, G).total.backward()
    worst = 0.0
    for S in maps:
        with torch.no_grad():
            num = fd_grad(lambda: total_loss(maps, G).total, S.detach(), 1e-4)
        worst = max(worst, rel_err(S.grad, num))
    errs["total_loss"] = (worst, 1e-3)
    elapsed = time.perf_counter() - t0
    ok = all(e <= tol for e, tol in errs.values()) and elapsed < 60
    detail = ", ".join(f"{k} {e:.1e}/{tol:.0e}" for k, (e, tol) in errs.items())
    report(2, ok, f"{detail}; {elapsed:.1f}s (< 60s)")


# ---------------------------------------------------------------- 3

def test_criterion_3_shape_law(report):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    model = GLDMNet().eval()
    problems = []
    with torch.no_grad():
        for size in (256, 128, 96):
            rgb, depth = torch.randn(1, 3, size, size), torch.randn(1, 3, size, size)
            fused = model.fused_stages(rgb, depth)
            for i, f in enumerate(fused):
                if model.decoder.transformer_stage(f, i).shape != f.shape:
                    problems.append(f"{size}: transformer stage {i + 1} changed shape")
            out = model(rgb, depth)
            for m in out.maps:
                if m.shape != (1, 1, size, size) or m.min() < 0 or m.max() > 1:
                    problems.append(f"{size}: map {tuple(m.shape)} range "
                                    f"[{m.min():.3f}, {m.max():.3f}]")
    elapsed = time.perf_counter() - t0
    report(3, not problems and elapsed < 30,
           f"four [0,1] maps at 256/128/96 and resolution-preserving transformer stages; "
           f"{elapsed:.1f}s (< 30s){'; ' + '; '.join(problems) if problems else ''}")


# ---------------------------------------------------------------- 4

def test_criterion_4_loss_identities(report):
    G = torch.zeros(1, 1, 16, 16, dtype=torch.float64)
    G[..., 3:11, 5:13] = 1
    perfect = total_loss([G] * 4, G).total.item()
    G4 = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    half = bce_loss(torch.full_like(G4, 0.5), G4).item()
    one = torch.ones(4, 4, dtype=torch.float64)
    iou_half = iou_loss(0.5 * one, one).item()
    S = torch.sigmoid(rand((1, 1, 8, 8), 3))
    Gr = (rand((1, 1, 8, 8), 4) > 0).double()
    per_level = (bce_loss(S, Gr) + iou_loss(S, Gr)).item()
    weighted = total_loss([S] * 4, Gr).total.item()
    checks = {
        "S=G total": (perfect, 0 <= perfect <= 1e-3),
        "uniform-0.5 BCE - 4 log2": (half - 4 * math.log(2), abs(half - 4 * math.log(2)) <= 1e-6),
        "iou(0.5,1) - 0.5": (iou_half - 0.5, abs(iou_half - 0.5) <= 1e-9),
        "total/common": (weighted / per_level, abs(weighted - 2.0 * per_level) <= 1e-9 * per_level),
    }
    report(4, all(ok for _, ok in checks.values()),
           ", ".join(f"{k} = {v:.3g}" for k, (v, _) in checks.items()))


# ---------------------------------------------------------------- 5

def test_criterion_5_metrics_oracle(report):
    worst = 0.0
    for (S, G), frozen in zip(fixtures(), FROZEN):
        Sl, Gl = (S / 255.0).tolist(), (G >= 128).astype(int).tolist()
        ours = (metrics.mae(S, G), metrics.f_measure_curve(S, G).f_max,
                metrics.s_measure(S, G), metrics.e_measure(S, G))
        ref = (oracles.ref_mae(Sl, Gl), max(f for _, _, f in oracles.ref_pr(Sl, Gl)),
               oracles.ref_s_measure(Sl, Gl), max(oracles.ref_e_curve(Sl, Gl)))
        worst = max(worst, *(abs(a - b) for a, b in zip(ours, ref)),
                    *(abs(a - b) for a, b in zip(ours, frozen)))
    G = fixtures()[0][1]
    perfect = (metrics.mae(G, G), metrics.s_measure(G, G),
               metrics.f_measure_curve(G, G).f_max, metrics.e_measure(G, G))
    perfect_ok = np.allclose(perfect, (0, 1, 1, 1), atol=1e-6)
    monotone = all(np.all(np.diff(metrics.f_measure_curve(S, G).recall) <= 0)
                   for S, G in fixtures())
    report(5, worst <= 1e-6 and perfect_ok and monotone,
           f"max |ours - oracle| {worst:.1e} (tol 1e-6); perfect = "
           f"({', '.join(f'{v:.6f}' for v in perfect)}); recall monotone: {monotone}")


# ---------------------------------------------------------------- 6

def test_criterion_6_freeze_schedule(report, tmp_path):
    write_dataset(tmp_path / "data", "PAIR", n=2, size=(64, 64), seed=3)
    recs = data.build_manifest(tmp_path / "data")
    over = dict(SMALL, **{"data.augment": False, "train.batch_size": 1, "train.epochs": 9,
                          "train.freeze_cnn_epochs": 3, "train.freeze_transformer_epochs": 3,
                          "train.checkpoint_every": 1})
    cfg = config.resolve(overrides=over)
    run = tmp_path / "run"
    torch.manual_seed(cfg["train.seed"])
    save_checkpoint(run / "epoch_000.pt", GLDMNet.from_config(cfg), None, 0, 0, cfg)
    train(cfg, recs, run)

    def group(e, prefixes):
        ckpt = load_checkpoint(run / f"epoch_{e:03d}.pt")
        names = {n for n, _ in model_from_checkpoint(ckpt).named_parameters()}
        return {k: v for k, v in ckpt["model"].items() if k in names and k.startswith(prefixes)}

    cnn = [group(e, ("rgb_encoder.", "depth_encoder.")) for e in range(10)]
    trans = [group(e, ("decoder.trans.",)) for e in range(10)]
    same = lambda a, b: all(torch.equal(a[k], b[k]) for k in a)  # noqa: E731
    cnn_fixed = all(same(cnn[0], cnn[e]) for e in (1, 2, 3))
    trans_fixed = all(same(trans[3], trans[e]) for e in (4, 5, 6))
    moved = (not same(trans[0], trans[3]) and not same(cnn[3], cnn[6])
             and not same(cnn[6], cnn[9]) and not same(trans[6], trans[9]))
    lr_err = max(abs(lr_at(k) - 1e-4 * 0.97 ** k) for k in range(200))
    report(6, cnn_fixed and trans_fixed and moved and lr_err <= 1e-12,
           f"CNN constant through phase 1: {cnn_fixed}; transformer constant through phase 2: "
           f"{trans_fixed}; free groups move: {moved}; max lr error {lr_err:.1e} (<= 1e-12)")


# ---------------------------------------------------------------- 7

@pytest.mark.slow
def test_criterion_7_overfit_smoke(report, tmp_path):
    write_dataset(tmp_path, "SMOKE", n=4, size=(96, 96))
    recs = data.build_manifest(tmp_path)
    cfg = config.resolve(overrides={"data.size": 96})
    t0 = time.perf_counter()
    traj, model = overfit_smoke(cfg, recs, steps=200, lr=1e-4)
    rep = evaluate_model(model, recs, tmp_path / "maps", 96)
    elapsed = time.perf_counter() - t0
    ratio = traj[-1] / traj[0]
    report(7, ratio <= 0.1 and rep.mae < 0.1 and elapsed < 3600,
           f"loss {traj[0]:.1f} -> {traj[-1]:.1f} (ratio {ratio:.3f}, need <= 0.1); "
           f"fixture MAE {rep.mae:.4f} (need < 0.1); {elapsed / 60:.1f} min on CPU (< 60)")


# ---------------------------------------------------------------- 8

def test_criterion_8_ablation_wiring(report, tmp_path):
    variants = [("fusion.mode", m) for m in config.FUSION_MODES] + \
               [("decoder.transformer", m) for m in config.TRANSFORMER_MODES]
    counts, problems = {}, []
    for key, value in variants:
        torch.manual_seed(0)
        model = build(**{key.replace(".", "__"): value}).train()
        out = model(torch.randn(2, 3, 64, 64), torch.randn(2, 3, 64, 64))
        G = (torch.rand(2, 1, 64, 64) > 0.5).float()
        total_loss(out, G).total.backward()
        if not all(torch.isfinite(z).all() for z in out.maps):
            problems.append(f"{key}={value}: non-finite output")
        if sum(p.grad is not None for p in model.parameters()) == 0:
            problems.append(f"{key}={value}: no gradients")
        counts[f"{key}={value}"] = count_parameters(model)
        del model, out
    log = tmp_path / "run" / "ablation_parameters.txt"
    log.parent.mkdir()
    log.write_text("".join(f"{k}\t{v}\n" for k, v in counts.items()))
    ordering = _directional_mae(tmp_path / "toy")
    log.write_text(log.read_text() + "".join(f"toy_mae\t{k}\t{v:.4f}\n" for k, v in ordering))
    fusion_counts = [counts[f"fusion.mode={m}"] for m in config.FUSION_MODES]
    decoder_counts = [counts[f"decoder.transformer={m}"] for m in config.TRANSFORMER_MODES]
    distinct = (len(set(fusion_counts)) == len(fusion_counts)
                and len(set(decoder_counts)) == len(decoder_counts))
    report(8, distinct and not problems and log.is_file(),
           f"{len(counts)} variants built and ran forward/backward; parameter counts "
           f"{counts}; distinct within each ablation: {distinct}; logged to {log.name}"
           + "; toy-scale MAE ordering (reported, not gated): "
           + " < ".join(f"{k} {v:.3f}" for k, v in ordering)
           + ("; " + "; ".join(problems) if problems else ""))


def _directional_mae(root):
    """Fixture MAE per ablation variant after a short fit of the small profile."""
    write_dataset(root, "ABL", n=4, size=(64, 64), seed=11)
    recs = data.build_manifest(root)
    scores = {}
    variants = [("fusion.mode", m) for m in config.FUSION_MODES] + \
               [("decoder.transformer", m) for m in config.TRANSFORMER_MODES[1:]]
    for key, value in variants:
        cfg = config.resolve(overrides=dict(SMALL, **{key: value}))
        _, model = overfit_smoke(cfg, recs, steps=40, lr=1e-3)
        scores[f"{key}={value}"] = evaluate_model(model, recs, root / "maps", 64).mae
    return sorted(scores.items(), key=lambda kv: kv[1])


# ---------------------------------------------------------------- 9

def test_criterion_9_determinism(report, tmp_path):
    write_dataset(tmp_path / "d", "DET", n=3, size=(80, 72))
    src = tmp_path / "d" / "DET"
    cfg = config.resolve(overrides=SMALL)
    torch.manual_seed(0)
    model = GLDMNet.from_config(cfg)
    opt = torch.optim.Adam(model.parameters())
    first = save_checkpoint(tmp_path / "one" / "ckpt.pt", model, opt, 0, 0, cfg)
    loaded = load_checkpoint(first)
    model2 = model_from_checkpoint(loaded)
    opt2 = torch.optim.Adam(model2.parameters())
    opt2.load_state_dict(loaded["optimizer"])
    torch.set_rng_state(loaded["rng"])
    second = save_checkpoint(tmp_path / "two" / "ckpt.pt", model2, opt2, 0, 0, cfg)
    round_trip = first.read_bytes() == second.read_bytes()

    inputs = tmp_path / "inputs"
    (inputs / "RGB").mkdir(parents=True)
    (inputs / "depth").mkdir()
    for p in sorted((src / "RGB").iterdir()):
        (inputs / "RGB" / p.name).write_bytes(p.read_bytes())
        (inputs / "depth" / p.name).write_bytes((src / "depth" / p.name).read_bytes())
    a = cli.cmd_predict(first, inputs, tmp_path / "pa")
    b = cli.cmd_predict(first, inputs, tmp_path / "pb")
    identical = len(a) == 3 and all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
    report(9, round_trip and identical,
           f"predict twice -> {len(a)} bitwise-identical maps: {identical}; "
           f"checkpoint save/load/save bitwise-equal: {round_trip}")
