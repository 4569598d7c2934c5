import math

import numpy as np
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from microsim.errors import ThresholdExhausted
from microsim.ingest import Constraint, ConstraintSet, Indicator, load_constraints, write_constraints
from microsim.integerise import (
    IntegerisedZone,
    decompose,
    integerise_counterweight,
    integerise_pp,
    integerise_rounding,
    integerise_threshold,
    integerise_trs,
    stable_argsort,
)
from microsim.ipf import aggregate, constrain, initialize_weights
from microsim.metrics import err_gt, population_diffs, sae, tae, zm_cells

weights = arrays(np.float64, st.integers(1, 40),
                 elements=st.floats(0, 12, allow_nan=False, allow_infinity=False))
seeds = st.integers(0, 2**32 - 1)


@st.composite
def weights_and_pop(draw):
    """Weights plus a population between their floor and ceiling totals."""
    w = draw(weights)
    d = decompose(w)
    lo = int(d.count.sum())
    hi = lo + int((d.dr > 0).sum())
    return w, draw(st.integers(lo, hi))


@given(weights)
def test_decompose_reconstructs(w):
    d = decompose(w)
    assert np.all((d.dr >= 0) & (d.dr < 1))
    np.testing.assert_allclose(d.count + d.dr, w, rtol=0, atol=1e-12)
    assert np.all(d.count == np.floor(w))


@given(weights_and_pop(), seeds)
def test_trs_exact_and_bounded(wp, seed):
    w, pop = wp
    z = integerise_trs(w, pop, seed)
    assert z.pop_sim == pop
    assert np.all(z.counts >= np.floor(w))
    assert np.all(z.counts <= np.ceil(w))
    assert np.all(z.added[decompose(w).dr == 0] == 0)


@given(weights, st.integers(0, 60), seeds)
def test_pp_exact_and_zero_weights_unused(w, pop, seed):
    assume(w.sum() > 0)
    z = integerise_pp(w, pop, seed)
    assert z.pop_sim == pop
    assert np.all(z.counts[w == 0] == 0)


@given(weights)
def test_rounding_bounds(w):
    z = integerise_rounding(w)
    assert abs(z.pop_sim - w.sum()) <= w.size / 2 + 1e-9
    assert np.all(np.abs(z.counts - w) <= 0.5)


@given(weights_and_pop())
def test_threshold_reaches_population(wp):
    w, pop = wp
    try:
        z = integerise_threshold(w, pop)
    except ThresholdExhausted:
        # only possible when the needed remainders sit below the last band
        d = decompose(w)
        assert (d.dr >= 0.001 + 1e-9).sum() < pop - d.count.sum()
        return
    assert z.pop_sim >= pop
    assert np.all(z.added <= 1)
    assert np.all(z.replicated == np.floor(w))
    # everyone added has a remainder no smaller than anyone left out
    d = decompose(w)
    if z.added.any() and (z.added == 0).any():
        assert d.dr[z.added == 1].min() >= d.dr[(z.added == 0)].max() - 0.001


@given(weights)
def test_counterweight_is_order_free(w):
    perm = np.random.default_rng(0).permutation(w.size)
    a = integerise_counterweight(w).counts
    b = integerise_counterweight(w[perm]).counts
    if np.unique(w).size == w.size:
        np.testing.assert_array_equal(a[perm], b)
    assert np.all(a >= 0)


@given(arrays(np.float64, st.integers(0, 200), elements=st.sampled_from([0.0, 0.5, 1.0, 2.5, 7.0])))
def test_stable_argsort(x):
    np.testing.assert_array_equal(stable_argsort(x), np.argsort(x, kind="stable"))


@given(st.lists(st.integers(0, 4), min_size=1, max_size=30), st.lists(st.integers(0, 2), min_size=1, max_size=30))
def test_indicator_partitions_each_constraint(a, b):
    n = min(len(a), len(b))
    B = Indicator.from_codes(np.column_stack([a[:n], b[:n]]), (5, 3))
    for block in B.blocks:
        assert np.all(B.matrix[:, block].sum(axis=1) == 1)


@settings(max_examples=30, deadline=None)
@given(rows=st.lists(st.lists(st.integers(0, 500), min_size=2, max_size=5), min_size=1, max_size=5))
def test_constraint_csv_round_trip(rows, tmp_path_factory):
    k = min(len(r) for r in rows)
    counts = np.array([r[:k] for r in rows], dtype=float)
    zones = tuple(f"z{i}" for i in range(len(rows)))
    cs = ConstraintSet(zones, (Constraint("c", tuple(f"k{j}" for j in range(k)), counts),))
    back = load_constraints(write_constraints(cs, tmp_path_factory.mktemp("rt")))
    np.testing.assert_array_equal(back.table, cs.table)


@given(st.lists(st.integers(0, 3), min_size=4, max_size=40),
       st.lists(st.integers(0, 50), min_size=4, max_size=4),
       arrays(np.float64, 40, elements=st.floats(0.1, 5)))
def test_constrain_fits_supported_cells(codes, target, w0):
    B = Indicator.from_codes(codes, (4,), names=["c"])
    con = Constraint("c", ("a", "b", "c", "d"), np.array([target], dtype=float))
    wm = initialize_weights(len(codes), 1)
    wm.w[:, 0] = w0[:len(codes)]
    out = constrain(wm, B, con)
    T = aggregate(out, B)[0]
    supported = np.bincount(codes, minlength=4) > 0
    np.testing.assert_allclose(T[supported], np.array(target, float)[supported],
                               rtol=1e-9, atol=1e-9)
    assert np.all(out.w >= 0)


tables = st.integers(1, 12).flatmap(
    lambda n: st.tuples(arrays(np.float64, n, elements=st.integers(0, 100).map(float)),
                        arrays(np.float64, n, elements=st.integers(0, 100).map(float))))


@given(tables)
def test_metric_identities(ut):
    U, T = ut
    assume(U.sum() > 0)
    assert math.isclose(tae(U, T), sae(U, T) * U.sum() / 100, rel_tol=1e-12, abs_tol=1e-12)
    assert 0 <= err_gt(U, T) <= 100
    z = zm_cells(U, T)
    inner = (U > 0) & (U < U.sum())
    assert np.all(np.sign(z[inner]) == np.sign((T - U)[inner]))


@given(st.lists(st.tuples(st.integers(0, 50), st.integers(-3, 3)), min_size=1, max_size=10))
def test_diffstats_exact_iff_all_zero(pairs):
    zones, pops = [], []
    for i, (p, d) in enumerate(pairs):
        c = np.array([max(p + d, 0)])
        zones.append(IntegerisedZone(str(i), "x", c, np.zeros_like(c)))
        pops.append(p)
    stats = population_diffs(zones, pops)
    assert stats.exact == all(z.pop_sim == p for z, p in zip(zones, pops))


@given(weights_and_pop(), seeds)
def test_seeded_runs_repeat(wp, seed):
    w, pop = wp
    assert np.array_equal(integerise_trs(w, pop, seed).counts, integerise_trs(w, pop, seed).counts)
    if w.sum() > 0:
        assert np.array_equal(integerise_pp(w, pop, seed).counts, integerise_pp(w, pop, seed).counts)
