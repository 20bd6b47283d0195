import json

import numpy as np
import pytest

from effowt.backbone import DESK_BACKBONE, REFERENCE_BACKBONE
from effowt.efficiency import (CSV_HEADER, EfficiencyReport, MemoryBudgetError, count_params,
                               emit_report, measure_memory, memory_report, meta_model, params_report,
                               synthetic_batch)
from effowt.model import STRATEGIES, EffOWTModel, HeadConfig
from effowt.side import SideConfig

HEAD = HeadConfig()


@pytest.fixture(scope="module")
def ref_params():
    return params_report(REFERENCE_BACKBONE, SideConfig(), HEAD)


@pytest.fixture(scope="module")
def desk_memory():
    return memory_report(DESK_BACKBONE, SideConfig(), HEAD, batch=2, iterations=3)


def _trainable_names(strategy):
    m = meta_model(DESK_BACKBONE, SideConfig(), HEAD, strategy)
    return {n for n, p in m.named_parameters() if p.trainable}


def test_strategy_predicates():
    zs, side, full = (_trainable_names(s) for s in ("zero_shot", "side", "full"))
    assert zs and all(n.startswith("head.") for n in zs)
    assert all(n.startswith(("side.", "head.")) for n in side)
    assert not any(n.startswith("backbone.") for n in side)
    assert zs < side < full
    m = meta_model(DESK_BACKBONE, SideConfig(), HEAD, "full")
    assert full == {n for n, _ in m.named_parameters()}


def test_zero_shot_counts_head_only():
    m = meta_model(DESK_BACKBONE, SideConfig(), HEAD, "zero_shot")
    c = count_params(m)
    assert c["trainable"] == m.head.num_params()
    assert c["trainable_by_namespace"] == {"head": m.head.num_params()}
    side = count_params(meta_model(DESK_BACKBONE, SideConfig(), HEAD, "side"))
    assert side["trainable_by_namespace"]["side"] + side["trainable_by_namespace"]["head"] == side["trainable"]


def test_reference_param_ordering(ref_params):
    t = {r.strategy: r.trainable_params for r in ref_params.rows}
    assert t["zero_shot"] < t["side_sim"] < t["side"] < t["full"]
    assert t["side"] / t["full"] <= 0.10
    assert ref_params.row("full").param_ratio == 1.0
    assert all(0 < r.param_ratio <= 1 for r in ref_params.rows)


def test_meta_count_equals_allocated_count():
    a = count_params(meta_model(DESK_BACKBONE, SideConfig(), HEAD, "side"))
    b = count_params(EffOWTModel(DESK_BACKBONE, SideConfig(), HEAD, "side", np.random.default_rng(0)))
    assert a == b


def test_desk_memory_ordering(desk_memory):
    m = {r.strategy: r.peak_bytes for r in desk_memory.rows}
    assert m["zero_shot"] < m["side_sim"] <= m["side"] < m["full"]
    assert desk_memory.row("side").memory_ratio <= 0.75
    assert desk_memory.row("side").backbone_retained_bytes == 0
    assert desk_memory.row("full").backbone_retained_bytes > 0
    tot = {r.strategy: r.total_memory_bytes for r in desk_memory.rows}
    assert tot["zero_shot"] < tot["side_sim"] <= tot["side"] < tot["full"]


def test_memory_linear_in_batch():
    for name in STRATEGIES:
        model = EffOWTModel(DESK_BACKBONE, SideConfig(), HEAD, name, np.random.default_rng(0))
        a = measure_memory(model, synthetic_batch(DESK_BACKBONE, 2), iterations=1).peak_retained_bytes
        b = measure_memory(model, synthetic_batch(DESK_BACKBONE, 4), iterations=1).peak_retained_bytes
        assert abs(b / a - 2.0) / 2.0 <= 0.05, (name, b / a)


def test_memory_deterministic():
    a = memory_report(DESK_BACKBONE, SideConfig(), HEAD, ["side"], iterations=1)
    b = memory_report(DESK_BACKBONE, SideConfig(), HEAD, ["side"], iterations=1)
    assert a.to_json() == b.to_json()


def test_budget_guard_asks_for_smaller_batch():
    model = EffOWTModel(DESK_BACKBONE, SideConfig(), HEAD, "side", np.random.default_rng(0))
    with pytest.raises(MemoryBudgetError, match="reduce the batch"):
        measure_memory(model, synthetic_batch(DESK_BACKBONE, 2), iterations=1, budget_bytes=1000)
    with pytest.raises(ValueError):
        synthetic_batch(DESK_BACKBONE, 1)


def test_csv_and_json_round_trip(ref_params, tmp_path):
    lines = ref_params.to_csv().splitlines()
    assert lines[0] == ",".join(CSV_HEADER) == "strategy,trainable_params,param_ratio,peak_bytes,memory_ratio"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["full", "zero_shot", "side", "side_sim"]
    again = EfficiencyReport.from_json(ref_params.to_json())
    assert again == ref_params
    paths = emit_report(ref_params, tmp_path / "r", "params")
    first = {k: p.read_bytes() for k, p in paths.items()}
    emit_report(params_report(REFERENCE_BACKBONE, SideConfig(), HEAD), tmp_path / "r", "params")
    assert first == {k: p.read_bytes() for k, p in paths.items()}
    assert json.loads(first["json"])["strategies"][0]["strategy"] == "full"


def test_unwritable_report_path(ref_params, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot write report"):
        emit_report(ref_params, blocker / "sub", "params")


def test_unknown_strategy_rejected():
    with pytest.raises(ValueError):
        params_report(DESK_BACKBONE, SideConfig(), HEAD, ["bogus"])
