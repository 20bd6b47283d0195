"""Acceptance criteria 1-9. Each test records one PASS/FAIL line, printed in
the pytest terminal summary (and immediately with ``-s``)."""

import dataclasses
import json
import math
import time

import numpy as np
import pytest

import test_autograd as ag
from effowt.autograd import Tensor, grad_check, grad_check_params, instrument, no_grad, ops
from effowt.backbone import DESK_BACKBONE, REFERENCE_BACKBONE, layer_param_split
from effowt.cli import main
from effowt.efficiency import memory_report, params_report, synthetic_batch
from effowt.experiment.config import dumps_config, load_config
from effowt.model import EffOWTModel, HeadConfig, compute_loss
from effowt.owta import OwtaConfig, TrackRecord, TrackSet, compute_owta
from effowt.side import (SideBlock, SideConfig, SideConnection, count_scale_proportions, gated_fuse,
                         hybrid_block_forward)
from effowt.sim import (SimLayer, ffn_param_count, line_union, receptive_field, sim_forward,
                        sim_param_count, sim_supported)

from oracles import brute_owta

RESULTS: dict[str, str] = {}


def record(key, ok, detail):
    line = f"criterion {key}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS[key] = line
    print(line)
    return ok


def test_criterion_1_scale_proportions():
    t0 = time.perf_counter()
    p = count_scale_proportions(SideConfig(), 1024)
    dt = time.perf_counter() - t0
    want = {4: 0.591, 8: 0.297, 16: 0.112}
    ok = all(abs(p[k] - v) <= 0.015 for k, v in want.items()) and dt < 1.0
    assert record("1", ok, " / ".join(f"1/{k}: {p[k]:.2%}" for k in want) + f" ({dt * 1e3:.1f} ms)")


def test_criterion_2_layer_split():
    t0 = time.perf_counter()
    s = layer_param_split(REFERENCE_BACKBONE)
    dt = time.perf_counter() - t0
    ok = (abs(s["mha"] - 0.333) <= 0.005 and abs(s["mlp"] - 0.666) <= 0.005
          and abs(s["ln"] - 0.001) <= 0.005 and dt < 1.0)
    assert record("2", ok, f"MHA {s['mha']:.2%} / MLP {s['mlp']:.2%} / LN {s['ln']:.2%}")


def test_criterion_3_strategy_orderings():
    t0 = time.perf_counter()
    head = HeadConfig()
    par = {r.strategy: r.trainable_params for r in params_report(REFERENCE_BACKBONE, SideConfig(), head).rows}
    mem_rep = memory_report(DESK_BACKBONE, SideConfig(), head, batch=2, iterations=3)
    mem = {r.strategy: r.peak_bytes for r in mem_rep.rows}
    dt = time.perf_counter() - t0
    p_ok = par["zero_shot"] < par["side_sim"] < par["side"] < par["full"] and par["side"] / par["full"] <= 0.10
    m_ratio = mem["side"] / mem["full"]
    m_ok = mem["zero_shot"] < mem["side_sim"] <= mem["side"] < mem["full"] and m_ratio <= 0.75
    ok = p_ok and m_ok and dt < 120
    assert record("3", ok, f"params side/full {par['side'] / par['full']:.2%}, side_sim {par['side_sim']:,} < side "
                           f"{par['side']:,}; memory side/full {m_ratio:.3f}, side_sim/full "
                           f"{mem['side_sim'] / mem['full']:.3f} ({dt:.1f} s)")


def test_criterion_4_frozen_backbone():
    details, ok = [], True
    for strategy in ("zero_shot", "side", "side_sim"):
        model = EffOWTModel(DESK_BACKBONE, SideConfig(), HeadConfig(), strategy, np.random.default_rng(0))
        with instrument() as rec:
            compute_loss(model, *synthetic_batch(DESK_BACKBONE, 2)).backward()
        grads = sum(p.grad is not None for p in model.backbone.parameters())
        retained = rec.stats().bytes_under("backbone")
        ok &= grads == 0 and retained == 0
        details.append(f"{strategy}: {grads} grads, {retained} B")
    assert record("4", ok, "; ".join(details))


def _primitive_errors():
    errs = {}
    for name, (fn, x) in ag.UNARY.items():
        with no_grad():
            shape = fn(Tensor(x)).shape
        errs[name] = grad_check(ag.scalarize(fn, shape), x)
    rng = np.random.default_rng(3)
    for name, (fn, sa, sb) in ag.BINARY.items():
        a, b = rng.standard_normal(sa), rng.standard_normal(sb)
        if name == "div":
            b = np.abs(b) + 0.5
        with no_grad():
            shape = fn(Tensor(a), Tensor(b)).shape
        r = ag._readout(shape, 1)
        errs[name + "[0]"] = grad_check(lambda t: ops.sum(fn(t, Tensor(b)) * r), a)
        errs[name + "[1]"] = grad_check(lambda t: ops.sum(fn(Tensor(a), t) * r), b)
    x = rng.standard_normal((2, 4, 5, 5))
    w = rng.standard_normal((2, 2, 3, 3))
    r = ag._readout((2, 2, 3, 3), 2)
    errs["conv2d"] = max(grad_check(lambda t: ops.sum(ops.conv2d(t, Tensor(w), None, 2, 1, 2) * r), x),
                         grad_check(lambda t: ops.sum(ops.conv2d(Tensor(x), t, None, 2, 1, 2) * r), w))
    z, tgt = rng.standard_normal((5, 3)), np.array([0, 2, 1, 1, 0])
    errs["cross_entropy"] = grad_check(lambda t: ops.cross_entropy(t, tgt), z)
    a = rng.standard_normal((2, 3))
    errs["concat"] = grad_check(lambda t: ops.sum(ops.concat([t, t * 2.0], axis=1) * ag._readout((2, 6))), a)
    lm = rng.standard_normal((1, 2, 4, 4))
    mats = [Tensor(rng.standard_normal((4, 4))) for _ in range(4)]
    wt = Tensor(ops.softmax(Tensor(rng.standard_normal(5))).data)
    errs["line_mix"] = grad_check(lambda t: ops.sum(ops.line_mix(t, *mats, wt) * ag._readout((1, 2, 4, 4))), lm)
    return errs


def test_criterion_5_gradient_correctness():
    t0 = time.perf_counter()
    prim = _primitive_errors()
    rng = np.random.default_rng(11)
    block = SideBlock(8, 2, 1, 2, rng, mlp_ratio=2, gn_groups=4).assign_names("block")
    conn = SideConnection(6, 8, 2, rng).assign_names("conn")
    conn.gate.data = np.array([0.4])
    fp, tap = rng.standard_normal((2, 8, 2, 2)), rng.standard_normal((2, 16, 6))
    r = Tensor(rng.standard_normal((2, 8, 2, 2)))
    block_err = max(
        grad_check(lambda t: ops.sum(hybrid_block_forward(t, Tensor(tap), block, conn) * r), fp),
        max(grad_check_params(lambda: ops.sum(hybrid_block_forward(Tensor(fp), Tensor(tap), block, conn) * r),
                              block.parameters() + conn.parameters(), max_coords=6).values()))
    fs = rng.standard_normal((2, 8, 2, 2))
    gate_err = max(grad_check(lambda t: ops.sum(gated_fuse(Tensor(tap), t, conn) * r), fs),
                   max(grad_check_params(lambda: ops.sum(gated_fuse(Tensor(tap), Tensor(fs), conn) * r),
                                         conn.parameters(), max_coords=None).values()))
    sim = SimLayer(4, 4, rng).assign_names("sim")
    for p in sim.parameters():
        p.data = rng.standard_normal(p.shape)
    xs = rng.standard_normal((1, 4, 4, 4))
    rs = Tensor(rng.standard_normal((1, 4, 4, 4)))
    sim_err = max(grad_check(lambda t: ops.sum(sim_forward(t, sim) * rs), xs),
                  max(grad_check_params(lambda: ops.sum(sim_forward(Tensor(xs), sim) * rs), sim.parameters(),
                                        max_coords=None).values()))
    dt = time.perf_counter() - t0
    worst_prim = max(prim, key=prim.get)
    ok = max(prim.values()) < 1e-5 and block_err < 1e-5 and gate_err < 1e-5 and sim_err < 1e-5 and dt < 120
    assert record("5", ok, f"{len(prim)} primitive checks, worst {worst_prim} {prim[worst_prim]:.1e}; "
                           f"hybrid block {block_err:.1e}; gated fusion {gate_err:.1e}; SIM {sim_err:.1e} ({dt:.1f} s)")


def test_criterion_6_sim_receptive_field():
    t0 = time.perf_counter()
    inf1 = receptive_field(1, 8)
    union_ok = all(set(np.flatnonzero(inf1[:, j])) == line_union(8, 8, j) for j in range(64))
    full2 = bool(receptive_field(2, 8).all())
    supported = [(d, g) for d in range(8, 513, 8) for g in range(2, 65) if sim_supported(d, g)]
    smaller = all(sim_param_count(d, g) < ffn_param_count(d) for d, g in supported)
    red = 1 - sim_param_count(256, 14) / ffn_param_count(256)
    dt = time.perf_counter() - t0
    cov = sorted(set(inf1.sum(axis=0).tolist()))
    ok = union_ok and full2 and smaller and red >= 0.85 and dt < 30
    record("6-literal", cov == [29], f"stated 1-layer coverage 29/64; measured {cov[0]}/64 for every token "
                                      "(the two cyclic diagonals also cross at the antipodal cell)")
    assert record("6", ok, f"1-layer influence == row+col+2 diagonals for all 64 tokens: {union_ok}; "
                           f"2 layers full: {full2}; SIM < FFN on {len(supported)} supported configs: {smaller}; "
                           f"reduction at 256/14x14: {red:.1%} ({dt:.1f} s)")


@pytest.mark.xfail(strict=True, reason="the line union on an 8x8 cyclic grid has 28 cells, not 29")
def test_criterion_6_literal_coverage_29_of_64():
    assert {len(line_union(8, 8, j)) for j in range(64)} == {29}


def _micro_instance(rng):
    gt, pred = [], []
    centres = rng.uniform(0, 20, (4, 2))
    n_frames = int(rng.integers(1, 5))
    for f in range(n_frames):
        for tid in rng.choice(3, size=int(rng.integers(0, 4)), replace=False):
            gt.append(TrackRecord("v", f, int(tid), (*(centres[tid] + rng.normal(0, 1.5, 2)), *rng.uniform(4, 8, 2))))
        for tid in rng.choice(4, size=int(rng.integers(0, 4)), replace=False):
            pred.append(TrackRecord("v", f, int(tid),
                                    (*(centres[tid % 3] + rng.normal(0, 2.5, 2)), *rng.uniform(4, 8, 2))))
    return TrackSet(gt), TrackSet(pred)


def _frames(ts):
    out = {}
    for r in ts:
        out.setdefault(r.frame, []).append((r.track_id, r.bbox))
    return out


def test_criterion_7_owta_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    alphas = [0.1, 0.3, 0.5, 0.7]
    worst, cases = 0.0, 0
    while cases < 50:
        gt, pred = _micro_instance(rng)
        if len(gt) == 0:
            continue
        res = compute_owta(gt, pred, OwtaConfig(alphas=alphas))
        ref = brute_owta(_frames(gt), _frames(pred), alphas)
        worst = max(worst, *(abs(a - b) for a, b in zip((res.owta, res.det_re, res.ass_acc), ref)))
        cases += 1
    box = (0.0, 0.0, 10.0, 10.0)
    gt = TrackSet(TrackRecord("v", f, 0, box) for f in range(4))
    perfect = compute_owta(gt, gt, OwtaConfig())
    switch = compute_owta(gt, TrackSet(TrackRecord("v", f, 1 if f < 2 else 2, box) for f in range(4)), OwtaConfig())
    fp = compute_owta(gt, TrackSet(list(gt) + [TrackRecord("v", f, 9, (30.0, 30.0, 5.0, 5.0)) for f in range(4)]),
                      OwtaConfig())
    dt = time.perf_counter() - t0
    ok = (worst <= 1e-12 and all(r.owta == r.det_re == r.ass_acc == 1.0 for r in perfect.per_alpha)
          and abs(switch.ass_acc - 0.5) < 1e-12 and all(abs(r.owta - math.sqrt(0.5)) < 1e-12 for r in switch.per_alpha)
          and fp.det_re == 1.0 and dt < 60)
    assert record("7", ok, f"{cases} brute-force cases, max |diff| {worst:.1e}; perfect 1.0; id switch A.Acc "
                           f"{switch.ass_acc:.4f}, OWTA {switch.owta:.4f}; FP track D.Re {fp.det_re:.1f}")


def _cli(*argv):
    rc = main(["--quiet", *argv])
    assert rc == 0, argv
    return rc


def test_criterion_8_end_to_end_desk(tmp_path):
    t0 = time.perf_counter()
    cfg = load_config("desk")
    cfg_path = tmp_path / "desk.json"
    cfg_path.write_text(dumps_config(cfg))
    c = str(cfg_path)
    _cli("gen-data", "--config", c, "--out", str(tmp_path / "data"))
    finals = {}
    for strategy in ("zero_shot", "side"):
        _cli("train", "--config", c, "--data", str(tmp_path / "data"), "--strategy", strategy,
             "--out", str(tmp_path / strategy))
        finals[strategy] = json.loads((tmp_path / strategy / "train_summary.json").read_text())["final_loss"]
    _cli("infer", "--config", c, "--data", str(tmp_path / "data"), "--checkpoint", str(tmp_path / "side"),
         "--out", str(tmp_path / "pred.jsonl"))
    owta = {}
    for split in ("known", "unknown"):
        _cli("eval", "owta", "--gt", str(tmp_path / "data/eval/gt.jsonl"), "--pred", str(tmp_path / "pred.jsonl"),
             "--known", ",".join(cfg.data.known_shapes), "--split", split, "--out", str(tmp_path / "metrics"))
        res = json.loads((tmp_path / "metrics" / f"owta_{split}.json").read_text())
        assert res["split"] == split and len(res["per_alpha"]) == len(OwtaConfig().alphas)
        owta[split] = res["owta"]
    dt = time.perf_counter() - t0
    valid = all(0.0 <= v <= 1.0 for v in owta.values())
    ok = finals["side"] < finals["zero_shot"] and valid and dt < 600
    assert record("8", ok, f"final loss side {finals['side']:.4f} < zero_shot {finals['zero_shot']:.4f} at "
                           f"{cfg.optimizer.steps} steps; OWTA known {owta['known']:.3f}, unknown "
                           f"{owta['unknown']:.3f}; pipeline {dt:.0f} s")


def test_criterion_9_determinism(tiny_cfg, tmp_path):
    cfg = tiny_cfg.replace(optimizer=dataclasses.replace(tiny_cfg.optimizer, steps=4))
    cfg_path = tmp_path / "tiny.json"
    cfg_path.write_text(dumps_config(cfg))
    c = str(cfg_path)
    outs = []
    for tag in ("a", "b"):
        root = tmp_path / tag
        _cli("gen-data", "--config", c, "--out", str(root / "data"))
        _cli("train", "--config", c, "--data", str(root / "data"), "--out", str(root / "run"))
        _cli("infer", "--config", c, "--data", str(root / "data"), "--checkpoint", str(root / "run"),
             "--out", str(root / "pred.jsonl"))
        _cli("eval", "owta", "--gt", str(root / "data/eval/gt.jsonl"), "--pred", str(root / "pred.jsonl"),
             "--known", "square,circle", "--split", "unknown", "--out", str(root / "metrics"))
        _cli("report", "params", "--config", c, "--out", str(root / "reports"))
        _cli("report", "memory", "--config", c, "--iterations", "1", "--out", str(root / "reports"))
        _cli("probe", "receptive-field", "--grid", "4x4", "--layers", "2", "--out", str(root / "probe"))
        outs.append({p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()})
    diff = sorted(k for k in set(outs[0]) | set(outs[1]) if outs[0].get(k) != outs[1].get(k))
    assert record("9", not diff, f"{len(outs[0])} files compared across two runs; differing: {diff or 'none'}")
