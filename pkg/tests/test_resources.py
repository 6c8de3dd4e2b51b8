import numpy as np
import pytest

from conftest import central_difference
from nse.rng import make_rng
from nse.resources import (
    ConstraintConfig,
    CostTable,
    ResourceError,
    architecture_cost,
    expected_pair_cost,
    layer_cost,
    penalty,
    penalty_gradient_wrt_r,
)
from nse.space import Architecture, GateVector


def table_for(num_layers, num_slots, rng, overhead=0.0):
    cost = {
        (l, s): float(rng.uniform(1.0, 50.0))
        for l in range(num_layers)
        for s in range(num_slots)
    }
    return CostTable(cost=cost, fixed_overhead=overhead)


def test_cost_all_gates_zero_is_overhead():
    table = CostTable(cost={}, fixed_overhead=10.0)
    arch = Architecture.from_encoding([[], [], []])
    assert architecture_cost(arch, table) == 10.0


def test_cost_sums_selected_ops():
    table = CostTable(cost={(0, 0): 3.0, (0, 1): 7.0})
    arch = Architecture.from_encoding([[0, 1]])
    assert architecture_cost(arch, table) == 10.0


def test_cost_matches_explicit_listing_oracle():
    rng = make_rng(41)
    table = table_for(4, 6, rng, overhead=5.0)
    for _ in range(50):
        encoding = [
            sorted(
                int(s)
                for s in rng.choice(6, size=int(rng.integers(0, 5)), replace=False)
            )
            for _ in range(4)
        ]
        arch = Architecture.from_encoding(encoding)
        expected = 5.0 + sum(
            table.cost[(l, s)] for l, slots in enumerate(encoding) for s in slots
        )
        assert architecture_cost(arch, table) == pytest.approx(expected, abs=1e-12)


def test_cost_monotone_in_gates():
    rng = make_rng(43)
    table = table_for(3, 5, rng)
    base = [[0], [1, 2], [4]]
    arch = Architecture.from_encoding(base)
    grown = Architecture.from_encoding([[0, 3], [1, 2], [4]])
    assert architecture_cost(grown, table) >= architecture_cost(arch, table)


def test_cost_missing_entry_raises():
    table = CostTable(cost={(0, 0): 1.0})
    arch = Architecture.from_encoding([[1]])
    with pytest.raises(ResourceError):
        architecture_cost(arch, table)


def test_expected_pair_cost_degenerate_and_midpoint():
    table = CostTable(cost={(0, 0): 100.0, (0, 1): 300.0})
    a = GateVector(0, frozenset({0}))
    b = GateVector(0, frozenset({1}))
    assert expected_pair_cost(a, b, 1.0, 0.0, table) == 100.0
    assert expected_pair_cost(a, b, 0.5, 0.5, table) == 200.0


def test_expected_pair_cost_matches_direct_formula():
    rng = make_rng(47)
    table = table_for(1, 8, rng)
    for _ in range(100):
        sel_a = frozenset(int(s) for s in rng.choice(8, size=3, replace=False))
        sel_b = frozenset(int(s) for s in rng.choice(8, size=2, replace=False))
        a, b = GateVector(0, sel_a), GateVector(0, sel_b)
        pa = float(rng.uniform(0.01, 0.99))
        direct = pa * sum(table.cost[(0, s)] for s in sel_a) + (1 - pa) * sum(
            table.cost[(0, s)] for s in sel_b
        )
        assert expected_pair_cost(a, b, pa, 1 - pa, table) == pytest.approx(
            direct, abs=1e-12
        )
        lo = min(layer_cost(a, table), layer_cost(b, table))
        hi = max(layer_cost(a, table), layer_cost(b, table))
        assert lo - 1e-12 <= expected_pair_cost(a, b, pa, 1 - pa, table) <= hi + 1e-12


def test_expected_pair_cost_rejects_unnormalized():
    table = CostTable(cost={(0, 0): 1.0})
    a = GateVector(0, frozenset({0}))
    with pytest.raises(ResourceError):
        expected_pair_cost(a, a, 0.6, 0.6, table)


def test_penalty_reference_values():
    cfg = ConstraintConfig(tau=300.0, alpha=1e-5, beta=2.0)
    assert penalty(50.0, cfg) == pytest.approx(0.025)
    assert penalty(0.0, cfg) == 0.0
    assert penalty_gradient_wrt_r(0.0, cfg) == 0.0
    assert penalty(-50.0, cfg) == pytest.approx(0.025)


def test_penalty_one_sided_hinge():
    cfg = ConstraintConfig(tau=300.0, alpha=1e-5, beta=2.0, one_sided=True)
    assert penalty(-50.0, cfg) == 0.0
    assert penalty_gradient_wrt_r(-50.0, cfg) == 0.0
    assert penalty(50.0, cfg) == pytest.approx(0.025)


def test_penalty_gradient_matches_finite_differences():
    rng = make_rng(53)
    for beta in (1.0, 1.5, 2.0, 3.0):
        cfg = ConstraintConfig(tau=0.0, alpha=2e-3, beta=beta)
        for _ in range(50):
            r = float(rng.uniform(-200, 200))
            if abs(r) < 1e-3:
                continue
            grad = penalty_gradient_wrt_r(r, cfg)
            fd = central_difference(
                lambda v: penalty(float(v[0]), cfg), np.array([r]), step=1e-4 * abs(r)
            )[0]
            assert grad == pytest.approx(fd, rel=1e-6, abs=1e-12)


def test_constraint_config_validation():
    with pytest.raises(ResourceError):
        ConstraintConfig(tau=1.0, beta=0.5)
    cfg = ConstraintConfig(tau=123.0)
    assert cfg.upper_bound == 123.0


def test_cost_table_json_roundtrip(tmp_path):
    table = CostTable(cost={(0, 0): 1.5, (2, 3): 4.0}, fixed_overhead=2.0, unit="kmac")
    data = table.to_json()
    back = CostTable.from_json(data)
    assert back == table
    path = tmp_path / "costs.json"
    import json

    path.write_text(json.dumps(data))
    assert CostTable.load(str(path)) == table
