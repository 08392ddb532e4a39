import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy import stats

from rlinterference.metrics import (
    EmptySeriesError,
    aer,
    consecutive_stable,
    kendall_tau,
    pearson_r,
    percentile,
    sample_efficiency,
    stable_aer,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
series = st.lists(finite, min_size=1, max_size=40)
ONE_TO_TEN = list(range(1, 11))


# ---------------------------------------------------------------- percentile

def test_percentile_hand_values():
    assert percentile(ONE_TO_TEN, 0.25) == 3.25
    assert percentile(ONE_TO_TEN, 0.75) == 7.75
    assert percentile(ONE_TO_TEN, 0.9) == 9.1
    assert percentile(ONE_TO_TEN, 0.1) == 1.9
    assert percentile([4.0], 0.37) == 4.0


@given(series, st.floats(0, 1))
def test_percentile_matches_numpy_linear(xs, q):
    assert percentile(xs, q) == pytest.approx(np.percentile(xs, 100 * q, method="linear"), rel=1e-9, abs=1e-6)


@given(series)
def test_percentile_endpoints(xs):
    assert percentile(xs, 0.0) == min(xs)
    assert percentile(xs, 1.0) == max(xs)


@given(series, st.floats(0, 1), st.floats(0, 1))
def test_percentile_monotone_in_q(xs, q1, q2):
    lo, hi = sorted((q1, q2))
    assert percentile(xs, lo) <= percentile(xs, hi) + 1e-9


def test_percentile_rejects_bad_input():
    with pytest.raises(EmptySeriesError):
        percentile([], 0.5)
    with pytest.raises(ValueError):
        percentile([1.0], 1.5)


# ---------------------------------------------------------------- AER family

def test_aer_hand_values():
    assert aer([0, 0, 2, 4]) == 3.0
    assert aer([5.0] * 7) == 5.0
    assert aer([100, 1, 2, 3]) == 2.5  # first half does not matter
    assert aer([1, 2, 3]) == 2.5  # last ceil(3/2) = 2 entries


@given(st.lists(finite, min_size=2, max_size=30), finite)
def test_aer_ignores_first_half(xs, replacement):
    ys = list(xs)
    ys[0] = replacement
    if len(xs) >= 2:
        assert aer(ys) == aer(xs)


def test_consecutive_stable_hand_values():
    assert consecutive_stable([1, 1, 0, 1], 1) == 0.5
    assert consecutive_stable([3, 3], 1) == 1.0
    assert consecutive_stable([0, 0], 1) == 0.0
    assert consecutive_stable([1.0], 1.0) == 1.0  # inclusive threshold


def test_sample_efficiency_hand_values():
    assert sample_efficiency([5] * 10, 1, k=3) == 1.0
    assert sample_efficiency([0] * 10, 1, k=3) == 0.0
    assert sample_efficiency([0] * 5 + [2] * 5, 1, k=5) == 0.5
    # a short run is not enough
    assert sample_efficiency([2, 2, 0, 2, 2, 2], 1, k=3) == 0.5


def test_stable_aer_hand_values():
    assert stable_aer(ONE_TO_TEN, 0.0) == 1.0
    assert stable_aer(ONE_TO_TEN, 1.0) == aer(ONE_TO_TEN)
    assert stable_aer(ONE_TO_TEN, 0.5) == 0.5 * 8.0 + 0.5 * 1.0
    assert stable_aer([2.5] * 9, 0.3) == 2.5


@given(series, st.floats(0.0, 1.0))
def test_metric_ranges(xs, beta):
    thr = float(np.median(xs))
    assert 0.0 <= consecutive_stable(xs, thr) <= 1.0
    assert 0.0 <= sample_efficiency(xs, thr, k=2) <= 1.0
    assert min(xs) - 1e-6 <= stable_aer(xs, beta) <= max(xs) + 1e-6
    assert stable_aer(xs, 1.0) == aer(xs)


def test_empty_series_raise():
    for fn in (aer, lambda x: consecutive_stable(x, 0), lambda x: sample_efficiency(x, 0),
               lambda x: stable_aer(x, 0.5)):
        with pytest.raises(EmptySeriesError):
            fn([])


# ---------------------------------------------------------------- Kendall tau

def brute_tau(pairs):
    n = len(pairs)
    total = sum(np.sign(g1 - g2) * np.sign(s1 - s2)
                for (i, (g1, s1)), (j, (g2, s2)) in itertools.product(enumerate(pairs), repeat=2) if i != j)
    return total / (n * (n - 1))


def test_kendall_hand_values():
    assert kendall_tau([(1, 1), (2, 3), (3, 2)]) == 1 / 3
    assert kendall_tau([(1, 1), (2, 2), (3, 3)]) == 1.0
    assert kendall_tau([(1, 3), (2, 2), (3, 1)]) == -1.0
    with pytest.raises(ValueError):
        kendall_tau([(1, 1)])


pair_lists = st.lists(st.tuples(st.integers(-5, 5), st.integers(-5, 5)), min_size=2, max_size=12)


@given(pair_lists)
def test_kendall_matches_enumeration(pairs):
    assert kendall_tau(pairs) == pytest.approx(brute_tau(pairs), abs=1e-12)
    assert -1.0 <= kendall_tau(pairs) <= 1.0


@given(pair_lists, st.floats(0.1, 10), st.floats(-10, 10))
def test_kendall_symmetric_and_affine_invariant(pairs, scale, shift):
    swapped = [(s, g) for g, s in pairs]
    assert kendall_tau(swapped) == pytest.approx(kendall_tau(pairs))
    moved = [(scale * g + shift, s) for g, s in pairs]
    assert kendall_tau(moved) == pytest.approx(kendall_tau(pairs))


def test_kendall_matches_scipy_without_ties():
    rng = np.random.default_rng(3)
    g, s = rng.normal(size=30), rng.normal(size=30)
    # with no ties tau-a equals scipy's tau-b
    assert kendall_tau(list(zip(g, s))) == pytest.approx(stats.kendalltau(g, s)[0], abs=1e-12)


# ---------------------------------------------------------------- Pearson r

def mp_pearson(xs, ys):
    mpmath.mp.dps = 50
    x = [mpmath.mpf(v) for v in xs]
    y = [mpmath.mpf(v) for v in ys]
    mx, my = sum(x) / len(x), sum(y) / len(y)
    num = sum((a - mx) * (b - my) for a, b in zip(x, y))
    den = mpmath.sqrt(sum((a - mx) ** 2 for a in x)) * mpmath.sqrt(sum((b - my) ** 2 for b in y))
    return float(num / den)


def test_pearson_fixed_dataset_against_high_precision():
    xs = [1.0, 2.0, 3.5, 4.0, 7.25]
    ys = [2.1, 3.9, 6.2, 8.8, 13.0]
    r, p = pearson_r(xs, ys)
    assert r == pytest.approx(mp_pearson(xs, ys), abs=1e-14)
    assert p == pytest.approx(stats.pearsonr(xs, ys)[1], rel=1e-9)


def test_pearson_exact_lines():
    xs = [0.0, 1.0, 2.0, 5.0]
    assert pearson_r(xs, [2 * x + 1 for x in xs])[0] == 1.0
    assert pearson_r(xs, [-x for x in xs])[0] == -1.0


def test_pearson_errors():
    with pytest.raises(ValueError):
        pearson_r([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson_r([1, 2], [1, 2])
    with pytest.raises(ValueError):
        pearson_r([1, 2, 3], [1, 2])


@settings(max_examples=60)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=25),
       st.floats(0.1, 10), st.floats(-10, 10))
def test_pearson_symmetric_affine_and_oracle(pts, scale, shift):
    xs, ys = map(list, zip(*pts))
    assume(np.std(xs) > 1e-3 and np.std(ys) > 1e-3)
    r, p = pearson_r(xs, ys)
    assert -1.0 <= r <= 1.0 and 0.0 <= p <= 1.0
    assert r == pytest.approx(mp_pearson(xs, ys), abs=1e-9)
    assert pearson_r(ys, xs)[0] == pytest.approx(r, abs=1e-12)
    assert pearson_r([scale * x + shift for x in xs], ys)[0] == pytest.approx(r, abs=1e-9)
    if abs(r) < 1.0 - 1e-9:
        assert p == pytest.approx(stats.pearsonr(xs, ys)[1], rel=1e-6, abs=1e-12)


def test_pearson_p_value_uses_t_tail():
    xs = np.arange(10.0)
    ys = np.array([0.3, 1.1, 1.7, 3.4, 3.9, 5.6, 5.8, 7.2, 8.1, 8.7]) + np.array([0, 1, -1, 0, 2, -2, 0, 1, -1, 0])
    r, p = pearson_r(xs, ys)
    t = r * math.sqrt(8 / (1 - r * r))
    assert p == pytest.approx(2 * stats.t.sf(abs(t), 8), rel=1e-12)
