import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from negmgan.metrics import confusion, f1_unknown, rmse, s_r2


def test_perfect_f1():
    t = [True, False, True]
    assert f1_unknown(t, t) == 1.0


def test_no_positive_predictions():
    assert f1_unknown([False] * 3, [True, False, True]) == 0.0


def test_f1_from_counts():
    pred = [True] * 10 + [False] * 2
    truth = [True] * 8 + [False] * 2 + [True] * 2
    c = confusion(pred, truth)
    assert (c.tp, c.fp, c.fn) == (8, 2, 2)
    assert c.precision == 0.8 and c.recall == 0.8
    assert f1_unknown(pred, truth) == pytest.approx(0.8, abs=1e-15)


def test_f1_length_mismatch():
    with pytest.raises(ValueError):
        f1_unknown([True], [True, False])


def test_rmse_examples():
    assert rmse([1, 2], [1, 2]) == 0.0
    assert rmse([3], [5]) == 2.0
    assert abs(rmse([1, 2, 3], [1, 2, 5]) - math.sqrt(4 / 3)) < 1e-15
    with pytest.raises(ValueError):
        rmse([], [])
    with pytest.raises(ValueError):
        rmse([1], [1, 2])


def test_s_r2_examples():
    assert s_r2(0.0, 2.0) == 1.0
    assert s_r2(1.5, 1.5) == 0.0
    assert s_r2(0.0, 0.0) == 0.0
    assert s_r2(1.0, 2.0) == 0.5
    assert s_r2(2.0, 0.0) == -1.0
    with pytest.raises(ValueError):
        s_r2(-1.0, 1.0)


nonneg = st.floats(0, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=300)
@given(nonneg, nonneg)
def test_s_r2_antisymmetric_and_bounded(a, b):
    assert abs(s_r2(a, b) + s_r2(b, a)) <= 1e-12
    assert -1.0 <= s_r2(a, b) <= 1.0


@settings(max_examples=300)
@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_s_r2_scale_invariant(a, b, c):
    assert abs(s_r2(c * a, c * b) - s_r2(a, b)) <= 1e-12


@settings(max_examples=100)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=50), st.randoms())
def test_f1_permutation_invariant(pairs, rnd):
    pred, truth = map(list, zip(*pairs))
    order = list(range(len(pairs)))
    rnd.shuffle(order)
    assert f1_unknown(pred, truth) == f1_unknown([pred[i] for i in order], [truth[i] for i in order])
    assert 0.0 <= f1_unknown(pred, truth) <= 1.0
