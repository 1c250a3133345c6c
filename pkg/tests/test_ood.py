import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from valvefdd import ood


def test_rank_examples():
    errs = np.random.default_rng(0).random(99)
    assert ood.conformal_rank(99, 0.01) == 99
    assert ood.calibrate(errs, 0.01).thr_ood == errs.max()
    errs = np.random.default_rng(1).random(199)
    assert ood.conformal_rank(199, 0.05) == 190
    assert ood.calibrate(errs, 0.05).thr_ood == np.sort(errs)[189]
    assert ood.conformal_rank(3, 0.5) == 2
    assert ood.calibrate([3.0, 1.0, 2.0], 0.5).thr_ood == 2.0


def test_too_few_samples_rejected():
    with pytest.raises(ValueError):
        ood.calibrate(np.ones(50), 0.01)
    with pytest.raises(ValueError):
        ood.calibrate([], 0.5)
    with pytest.raises(ValueError):
        ood.conformal_rank(10, 0.0)


def test_strict_inequality():
    thr = ood.calibrate(np.arange(1.0, 100.0), 0.01)
    assert thr.is_ood(0.0) is False
    assert ood.is_ood(thr, thr.thr_ood) is False
    assert ood.is_ood(thr, np.nextafter(thr.thr_ood, np.inf)) is True
    np.testing.assert_array_equal(thr.is_ood([0.0, 200.0]), [False, True])


def test_p_value():
    thr = ood.calibrate(np.arange(1.0, 20.0), 0.1)
    assert thr.p_value(100.0) == pytest.approx(1 / 20)
    assert thr.p_value(0.0) == pytest.approx(1.0)


@given(st.integers(20, 500), st.floats(0.01, 0.5), st.floats(0.01, 0.5), st.integers(0, 1000))
def test_threshold_monotone_in_alpha(n, a1, a2, seed):
    lo, hi = sorted((a1, a2))
    if ood.conformal_rank(n, lo) > n:
        return
    errs = np.random.default_rng(seed).random(n)
    assert ood.calibrate(errs, lo).thr_ood >= ood.calibrate(errs, hi).thr_ood


@given(st.integers(1, 2000), st.floats(0.001, 0.999))
def test_rank_is_ceiling(n, alpha):
    r = ood.conformal_rank(n, alpha)
    x = (n + 1) * (1 - alpha)
    assert r - 1 < x + 1e-6 and r >= x - 1e-6


def test_trajectory_warning_strict():
    s = ood.OodTrajectoryState(thr_ood_cs=100)
    for _ in range(100):
        assert not s.step(True)
    assert s.step(True)
    assert s.warn_index == 100
    s.reset()
    for _ in range(500):
        assert not ood.step_trajectory(s, False).warned


@given(st.lists(st.booleans(), max_size=60), st.integers(0, 10), st.integers(0, 59))
def test_adding_flags_never_unwarns(flags, thr, pos):
    def run(fs):
        s = ood.OodTrajectoryState(thr)
        for f in fs:
            s.step(f)
        return s

    a = run(flags)
    more = list(flags)
    if more:
        more[pos % len(more)] = True
    b = run(more)
    assert b.n_ood >= a.n_ood
    assert b.warned or not a.warned
    assert a.warned == (a.n_ood > thr)
