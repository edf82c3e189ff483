import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quant2pc.cli import resolve_graph
from quant2pc.graph import load_config
from quant2pc.matmul import MatmulDims, Variant, construction_bits
from quant2pc.planner import (
    InfeasiblePlanError,
    QuantPlan,
    SensitivityTable,
    apply_plan,
    brute_force_plan,
    layer_comm,
    layer_weight_counts,
    network_comm_table,
    plan_network,
    planned_layers,
    solve_plan,
    synthetic_sensitivity,
)
from quant2pc.ring import ConvGeometry


def random_instance(rng, n_layers, n_cands):
    omega, comm = {}, {}
    for i in range(n_layers):
        bits = sorted(rng.choice(np.arange(2, 9), size=n_cands, replace=False).tolist())
        lid = f"l{i}"
        omega[lid] = {b: float(rng.integers(0, 20)) / 4 for b in bits}
        comm[lid] = {b: int(rng.integers(1, 60)) for b in bits}
    return omega, comm


pytestmark = pytest.mark.filterwarnings("ignore:omega of layer")


def instance_strategy():
    return st.tuples(st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**32 - 1))


# --- solver ---------------------------------------------------------------------


def test_single_layer_example():
    sens = SensitivityTable({"a": {2: 9.0, 4: 4.0, 8: 1.0}})
    comm = {"a": {2: 10, 4: 20, 8: 40}}
    plan = solve_plan(sens, comm, 25)
    assert plan.weight_bits == {"a": 4} and plan.total_comm == 20 and plan.total_omega == 4.0


def test_unbounded_limit_takes_min_perturbation():
    rng = np.random.default_rng(0)
    omega, comm = random_instance(rng, 5, 4)
    plan = solve_plan(SensitivityTable(omega), comm, math.inf)
    for lid, row in omega.items():
        assert row[plan.weight_bits[lid]] == min(row.values())


def test_six_layers_match_exhaustive_search():
    rng = np.random.default_rng(6)
    omega, comm = random_instance(rng, 6, 4)
    sens = SensitivityTable(omega)
    total = sum(sum(r.values()) for r in comm.values())
    for limit in np.linspace(sum(min(r.values()) for r in comm.values()), total, 12):
        a = solve_plan(sens, comm, limit)
        b = brute_force_plan(sens, comm, limit)
        assert a.weight_bits == b.weight_bits


@settings(max_examples=60, deadline=None)
@given(instance_strategy(), st.floats(0.0, 1.0))
def test_exact_on_small_instances(inst, frac):
    n, k, seed = inst
    omega, comm = random_instance(np.random.default_rng(seed), n, k)
    sens = SensitivityTable(omega)
    lo = sum(min(r.values()) for r in comm.values())
    hi = sum(max(r.values()) for r in comm.values())
    limit = lo + frac * (hi - lo)
    ref = brute_force_plan(sens, comm, limit)
    for gran in (None, 1):
        got = solve_plan(sens, comm, limit, granularity=gran)
        assert got.weight_bits == ref.weight_bits
        assert got.total_omega == ref.total_omega
        assert got.total_comm <= limit


@settings(max_examples=30, deadline=None)
@given(instance_strategy(), st.integers(2, 16))
def test_grid_solver_is_exact_for_rounded_costs(inst, gran):
    n, k, seed = inst
    omega, comm = random_instance(np.random.default_rng(seed), n, k)
    sens = SensitivityTable(omega)
    limit = sum(max(r.values()) for r in comm.values()) // 2 + gran * n
    rounded = {lid: {b: -(-c // gran) * gran for b, c in r.items()} for lid, r in comm.items()}
    try:
        ref = brute_force_plan(sens, rounded, (limit // gran) * gran)
    except InfeasiblePlanError:
        return
    got = solve_plan(sens, comm, limit, granularity=gran)
    assert got.weight_bits == ref.weight_bits
    assert got.total_comm <= limit


@settings(max_examples=30, deadline=None)
@given(instance_strategy())
def test_relaxing_the_limit_never_hurts(inst):
    n, k, seed = inst
    omega, comm = random_instance(np.random.default_rng(seed), n, k)
    sens = SensitivityTable(omega)
    lo = sum(min(r.values()) for r in comm.values())
    hi = sum(max(r.values()) for r in comm.values())
    prev = math.inf
    for limit in range(lo, hi + 1, max(1, (hi - lo) // 10)):
        w = solve_plan(sens, comm, limit).total_omega
        assert w <= prev
        prev = w


def test_infeasible_limit_reports_minimum():
    sens = SensitivityTable({"a": {2: 1.0, 4: 0.5}, "b": {2: 1.0, 4: 0.5}})
    comm = {"a": {2: 10, 4: 20}, "b": {2: 7, 4: 9}}
    with pytest.raises(InfeasiblePlanError) as err:
        solve_plan(sens, comm, 16)
    assert err.value.min_comm == 17


def test_ties_prefer_less_communication_then_wider_early_layers():
    sens = SensitivityTable({"a": {2: 1.0, 4: 1.0}, "b": {2: 1.0, 4: 1.0}})
    comm = {"a": {2: 5, 4: 5}, "b": {2: 5, 4: 6}}
    plan = solve_plan(sens, comm, 100)
    assert plan.weight_bits == {"a": 4, "b": 2}
    assert brute_force_plan(sens, comm, 100).weight_bits == plan.weight_bits


def test_missing_costs_are_errors():
    sens = SensitivityTable({"a": {2: 1.0, 4: 0.5}})
    with pytest.raises(ValueError):
        solve_plan(sens, {"a": {2: 1}}, 10)


def test_non_monotone_sensitivity_warns():
    with pytest.warns(UserWarning):
        SensitivityTable({"a": {2: 1.0, 4: 3.0}})
    with pytest.raises(ValueError):
        SensitivityTable({"a": {2: -1.0}})


# --- files ------------------------------------------------------------------------------


def test_sensitivity_csv_round_trip(tmp_path):
    sens = synthetic_sensitivity({"c1": 432, "fc": 640}, (2, 3, 4, 5), seed=3)
    sens.write_csv(tmp_path / "s.csv")
    back = SensitivityTable.read_csv(tmp_path / "s.csv")
    assert back.omega == sens.omega
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "layer_id,bit_width,omega"


def test_plan_csv_round_trip(tmp_path):
    plan = QuantPlan({"c1": 3, "fc": 5}, {"c1": 4, "fc": 4}, {"c1": 1234, "fc": 99}, 0.5)
    plan.write_csv(tmp_path / "p.csv")
    back = QuantPlan.read_csv(tmp_path / "p.csv")
    assert (back.weight_bits, back.act_bits, back.predicted_bits) == (plan.weight_bits, plan.act_bits, plan.predicted_bits)
    assert back.to_csv() == plan.to_csv()


def test_plan_csv_rejects_bad_header(tmp_path):
    (tmp_path / "p.csv").write_text("layer,bits\nc1,3\n")
    with pytest.raises(ValueError):
        QuantPlan.read_csv(tmp_path / "p.csv")


def test_synthetic_sensitivity_is_seeded_and_decreasing():
    a = synthetic_sensitivity({"x": 1000, "y": 50}, seed=1)
    b = synthetic_sensitivity({"x": 1000, "y": 50}, seed=1)
    assert a.omega == b.omega
    for row in a.omega.values():
        vals = [row[k] for k in sorted(row)]
        assert all(x > y for x, y in zip(vals, vals[1:]))


# --- cost model ---------------------------------------------------------------------------


def test_stage_preferences():
    stage1 = ConvGeometry(64, 64, 56, 56, 3, 1, 1)
    stage4 = ConvGeometry(512, 512, 7, 7, 3, 1, 1)
    assert layer_comm(stage1, 4, 2) < layer_comm(stage1, 2, 4)
    assert layer_comm(stage4, 2, 4) < layer_comm(stage4, 4, 2)


def test_zero_size_layer():
    assert layer_comm((0, 10), 4, 4) == 0
    assert layer_comm((10, 0), 4, 4) == 0


def test_layer_comm_grows_with_weight_bits():
    g = ConvGeometry(16, 16, 8, 8, 3, 1, 1)
    costs = [layer_comm(g, b, 4) for b in (2, 3, 4, 5)]
    assert costs == sorted(costs) and len(set(costs)) == 4
    assert layer_comm(g, 4, 4, nonneg=True) < layer_comm(g, 4, 4)


def test_mult_step_is_affine_in_d3():
    for v in Variant:
        f = [construction_bits(v, MatmulDims(8, 72, d3, 2, 4, 20))["mm.ot"] for d3 in (16, 32, 64)]
        assert f[2] - f[1] == 2 * (f[1] - f[0])


# --- networks ------------------------------------------------------------------------------


def test_minionn_plan_fits_and_reverifies():
    cfg = load_config(resolve_graph("minionn_8x8"))
    sens = synthetic_sensitivity(layer_weight_counts(cfg), seed=0)
    table = network_comm_table(cfg, act_bits=4)
    lo = sum(min(r.values()) for r in table.values())
    hi = sum(max(r.values()) for r in table.values())
    limit = (lo + hi) / 2
    plan = plan_network(cfg, sens, limit, act_bits=4)
    assert set(plan.weight_bits) == set(planned_layers(cfg))
    assert plan.total_comm <= limit
    assert sum(table[lid][b] for lid, b in plan.weight_bits.items()) == plan.total_comm
    assert plan.act_bits == {lid: 4 for lid in plan.weight_bits}
    cfg2 = apply_plan(cfg, plan)
    for layer in cfg2["layers"]:
        if layer.get("id") in plan.weight_bits:
            assert layer["weight_bits"] == plan.weight_bits[layer["id"]]


def test_apply_plan_checks_layers():
    cfg = load_config(resolve_graph("resnet32_block_small"))
    with pytest.raises(ValueError):
        apply_plan(cfg, QuantPlan({"conv1": 3}))
    with pytest.raises(ValueError):
        apply_plan(cfg, QuantPlan({"conv1": 3, "conv2": 3, "nope": 2}))
