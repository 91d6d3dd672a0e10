import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import UNIT_CUBE, f_per_by_definition, f_sym_loops
from umate.errors import ContractViolation, MetricInapplicable
from umate.geometry import random_rotation
from umate.metrics import EvalReport, f_cond, f_per, f_qua, f_sym, nrmse, topology_quality

points = st.lists(st.tuples(*(st.floats(-3, 3, allow_nan=False),) * 3), min_size=1, max_size=12)


def test_f_sym_cases():
    assert abs(f_sym(UNIT_CUBE)) <= 1e-9
    assert f_sym([[0, 0, 0], [4, 5, 6]]) == 0.0
    X = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]])
    assert abs(f_sym(X) - 2.0 / 9.0) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(points)
def test_f_sym_matches_loop_oracle(pts):
    X = np.array(pts)
    assert f_sym(X) == pytest.approx(f_sym_loops(X), abs=1e-12)


def test_f_per_cases():
    assert abs(f_per(UNIT_CUBE)) <= 1e-9
    R = random_rotation(np.random.default_rng(0))
    assert abs(f_per(UNIT_CUBE @ R.T)) <= 1e-9
    X = UNIT_CUBE.copy()
    X[5] += [0.1, 0.0, 0.0]
    assert abs(f_per(X) - f_per_by_definition(X)) <= 1e-9
    # hand value: the displaced corner moves two frame edges off their axis means
    assert f_per(X) > 0
    with pytest.raises(MetricInapplicable):
        f_per(UNIT_CUBE[:7])


def test_f_per_oracle_on_random_cells():
    rng = np.random.default_rng(1)
    for _ in range(20):
        X = np.vstack([UNIT_CUBE + 0.05 * rng.normal(size=(8, 3)), 0.5 + 0.1 * rng.normal(size=(3, 3))])
        assert abs(f_per(X) - f_per_by_definition(X)) <= 1e-12


def test_f_qua():
    assert f_qua(0.0, 0.0) == 0.0
    assert f_qua(0.3, 0.3) == pytest.approx(0.3)
    assert f_qua(0.02, 0.06) == pytest.approx(0.03, abs=1e-15)
    assert f_qua(0.0, 0.5) == 0.0
    with pytest.raises(ContractViolation):
        f_qua(-1.0, 0.1)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10))
def test_f_qua_bounded(a, b):
    assert f_qua(a, b) <= min(2 * a, 2 * b) + 1e-12


def test_f_cond():
    rng = np.random.default_rng(2)
    Y = rng.normal(size=(9, 3))
    assert f_cond(Y, Y) == 0.0
    assert f_cond(Y[rng.permutation(9)], Y) == 0.0
    assert f_cond(Y[:4], Y) == 0.0
    assert f_cond([[0.3, 0.0, 0.0]], [[0.0, 0.0, 0.0], [5.0, 5.0, 5.0]]) == pytest.approx(0.3)
    with pytest.raises(ContractViolation):
        f_cond(np.zeros((0, 3)), Y)


def test_rotation_invariance_of_metrics():
    rng = np.random.default_rng(3)
    X = np.vstack([UNIT_CUBE + 0.05 * rng.normal(size=(8, 3)), rng.uniform(size=(4, 3))])
    Y = rng.uniform(size=(10, 3))
    R = random_rotation(rng)
    assert abs(f_sym(X @ R.T) - f_sym(X)) <= 1e-9
    assert abs(f_per(X @ R.T) - f_per(X)) <= 1e-9
    assert abs(f_cond(X @ R.T, Y @ R.T) - f_cond(X, Y)) <= 1e-9


def test_nrmse():
    gt = np.array([0.0, 1.0])
    assert nrmse(gt, gt, "cc") == 0.0
    assert nrmse(np.array([0.5, 0.5]), gt, "cc") == pytest.approx(0.5)
    rng = np.random.default_rng(4)
    P, G = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
    assert nrmse(3 * P + 2, 3 * G + 2, "pp") == pytest.approx(nrmse(P, G, "pp"), rel=1e-12)
    # pp: per-sample vector norm, range over all components
    expected = np.sqrt(np.mean(np.sum((P - G) ** 2, axis=1))) / (G.max() - G.min())
    assert nrmse(P, G, "pp") == pytest.approx(expected, rel=1e-14)
    with pytest.raises(ContractViolation):
        nrmse(gt, np.zeros(2), "cc")
    with pytest.raises(ContractViolation):
        nrmse(gt, gt, "xx")
    with pytest.raises(ContractViolation):
        nrmse(np.zeros(3), gt, "cc")


def test_topology_quality_inapplicable():
    with pytest.raises(MetricInapplicable):
        topology_quality(UNIT_CUBE[:5])


def test_eval_report(tmp_path):
    rng = np.random.default_rng(5)
    rep = EvalReport()
    for _ in range(4):
        X = np.vstack([UNIT_CUBE + 0.02 * rng.normal(size=(8, 3)), [[0.5, 0.5, 0.5]]])
        rep.add_generation(X, UNIT_CUBE)
    rep.add_generation(UNIT_CUBE[:3], UNIT_CUBE)
    agg = rep.aggregates()
    assert rep.inapplicable == 1
    assert agg["f_qua"] == pytest.approx(np.mean(rep.f_qua[:4]))
    assert agg["f_cond"] == pytest.approx(np.mean(rep.f_cond))
    assert all(v >= 0 for v in rep.f_cond)
    path = tmp_path / "r.json"
    rep.save(path)
    import json

    back = EvalReport.from_dict(json.loads(path.read_text()))
    assert back.aggregates() == agg
