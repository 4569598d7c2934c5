import numpy as np
import pytest

import oracles
from microsim.errors import DimensionMismatch, EmptyDimension, InputError
from microsim.ingest import Constraint, ConstraintSet, Indicator
from microsim.ipf import (
    WeightMatrix,
    aggregate,
    constrain,
    initialize_weights,
    ipf_run,
    read_weights_binary,
    read_weights_csv,
    write_weights_binary,
    write_weights_csv,
)


def _cs(zones, **tables):
    return ConstraintSet(tuple(zones), tuple(
        Constraint(name, tuple(str(k) for k in range(np.shape(c)[1])), np.asarray(c, dtype=float))
        for name, c in tables.items()))


def test_initialize_weights():
    np.testing.assert_array_equal(initialize_weights(3, 2).w, np.ones((3, 2)))
    np.testing.assert_array_equal(initialize_weights(1, 1, 0.5).w, [[0.5]])
    with pytest.raises(EmptyDimension):
        initialize_weights(0, 2)
    with pytest.raises(InputError):
        initialize_weights(2, 2, 0.0)


def test_aggregate():
    np.testing.assert_array_equal(aggregate(np.array([[1.0], [2.0], [3.0]]), np.eye(3)), [[1, 2, 3]])
    np.testing.assert_array_equal(aggregate(np.zeros((3, 2)), np.eye(3)), np.zeros((2, 3)))
    np.testing.assert_array_equal(aggregate(np.array([[1.0], [2.0]]), np.array([[1], [1]])), [[3]])
    with pytest.raises(DimensionMismatch):
        aggregate(np.ones((2, 1)), np.eye(3))


def test_constrain_single_step_ratio():
    B = Indicator.from_codes([0, 1], (2,), names=["sex"])
    con = Constraint("sex", ("m", "f"), np.array([[10.0, 20.0]]))
    out = constrain(initialize_weights(2, 1), B, con)
    np.testing.assert_array_equal(out.w[:, 0], [10, 20])
    # already fitted: nothing moves
    again = constrain(out, B, con)
    np.testing.assert_array_equal(again.w, out.w)
    assert again.constraint_order == ("sex", "sex")


def test_constrain_empty_cell_left_alone_and_recorded():
    B = Indicator.from_codes([0, 0], (2,), names=["sex"])
    con = Constraint("sex", ("m", "f"), np.array([[10.0, 7.0]]))
    out = constrain(initialize_weights(2, 1), B, con)
    np.testing.assert_array_equal(out.w[:, 0], [5, 5])
    assert out.empty_cells == ((0, "sex", 1, 7.0),)
    T = aggregate(out, B)
    assert con.counts[0, 1] - T[0, 1] == 7.0


def test_constrain_rejects_unknown_constraint():
    B = Indicator.from_codes([0, 1], (2,), names=["sex"])
    with pytest.raises(DimensionMismatch):
        constrain(initialize_weights(2, 1), B, Constraint("age", ("a", "b"), np.ones((1, 2))))


def test_single_constraint_fits_in_one_pass():
    B = Indicator.from_codes([0, 1, 1, 2], (3,), names=["c"])
    cs = _cs(["A", "B"], c=[[3, 5, 2], [1, 1, 8]])
    wm, trace = ipf_run(None, cs, indicator=B, iterations=1)
    np.testing.assert_allclose(aggregate(wm, B), cs.table)
    assert trace.final_tae == 0
    assert trace.feasible


def test_two_constraints_match_long_run_oracle():
    # four distinct individuals covering the 2x2 joint table
    codes = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
    B = Indicator.from_codes(codes, (2, 2), names=["sex", "age"])
    sex = [[30, 70], [55, 45]]
    age = [[40, 60], [20, 80]]
    cs = _cs(["A", "B"], sex=sex, age=age)
    wm, trace = ipf_run(None, cs, indicator=B, iterations=200)
    for z in range(2):
        ref = oracles.ipf_zone([codes[:, 0].tolist(), codes[:, 1].tolist()], [sex[z], age[z]])
        np.testing.assert_allclose(wm.w[:, z], ref, rtol=1e-9)
    # the fitted table is the independence table
    np.testing.assert_allclose(wm.w[:, 0], [12, 18, 28, 42], rtol=1e-9)


def test_zone_independence(small_fit):
    full = small_fit.weights.w
    cs = small_fit.constraints
    for z in range(cs.n_zones):
        wm, _ = ipf_run(None, cs.subset_zones([z]), indicator=small_fit.indicator)
        assert np.array_equal(wm.w[:, 0], full[:, z])


def test_threads_do_not_change_result(small_fit):
    wm, trace = ipf_run(None, small_fit.constraints, indicator=small_fit.indicator, threads=3)
    assert np.array_equal(wm.w, small_fit.weights.w)
    assert np.array_equal(trace.tae, small_fit.trace.tae)


def test_trace_layout(small_fit):
    tr = small_fit.trace
    assert tr.constraint[0] == "initial"
    assert len(tr.tae) == 1 + 20 * 3
    assert tr.constraint[1:4] == ["age", "mode", "tenure"]
    assert tr.iteration_end_tae().shape == (21,)
    assert np.all(np.diff(tr.iteration_end_tae()) <= 1e-9)
    np.testing.assert_allclose(tr.constraint_tae.sum(axis=1), tr.tae)


def test_more_iterations_fit_no_worse(small_fit):
    _, one = ipf_run(None, small_fit.constraints, indicator=small_fit.indicator, iterations=1)
    assert small_fit.trace.final_tae <= one.final_tae


def test_tolerance_stops_early_and_carries_fit(small_fit):
    wm, trace = ipf_run(None, small_fit.constraints, indicator=small_fit.indicator,
                        iterations=50, tolerance=1e-3)
    assert trace.zone_iterations.max() < 50
    assert wm.iterations == trace.zone_iterations.max()
    assert np.all(np.diff(trace.iteration_end_tae()) <= 1e-9)


def test_empty_category_reported_by_run():
    B = Indicator.from_codes([0, 0, 1], (3,), names=["c"])
    cs = _cs(["A"], c=[[4, 3, 2]])
    wm, trace = ipf_run(None, cs, indicator=B, iterations=5)
    assert trace.empty_cells == ((0, "c", 2, 2.0),)
    assert trace.final_tae == pytest.approx(2.0)
    assert not trace.feasible


def test_ipf_from_survey_and_map(small_fit):
    d = small_fit.data
    wm, _ = ipf_run(d.survey, d.constraints, d.cmap)
    assert np.array_equal(wm.w, small_fit.weights.w)
    with pytest.raises(InputError):
        ipf_run(None, d.constraints)


def test_weights_csv_round_trip(tmp_path, small_fit):
    wm = small_fit.weights
    back = read_weights_csv(write_weights_csv(wm, tmp_path / "w.csv"))
    assert back.zones == wm.zones
    assert np.array_equal(back.w, wm.w)


def test_weights_binary_round_trip(tmp_path, small_fit):
    wm = small_fit.weights
    p = write_weights_binary(wm, tmp_path / "w.mswm")
    back = read_weights_binary(p, wm.zones)
    assert np.array_equal(back.w, wm.w)
    raw = p.read_bytes()
    assert raw[:4] == b"MSWM"
    (tmp_path / "bad.mswm").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(InputError):
        read_weights_binary(tmp_path / "bad.mswm")
    (tmp_path / "short.mswm").write_bytes(raw[:-8])
    with pytest.raises(InputError):
        read_weights_binary(tmp_path / "short.mswm")


def test_weight_matrix_checks_zone_ids():
    with pytest.raises(DimensionMismatch):
        WeightMatrix(np.ones((2, 2)), zones=("A",))
