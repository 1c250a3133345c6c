import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from valvefdd import detect

probs = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=80)


def test_zero_input_never_triggers():
    st_ = detect.CusumState()
    for _ in range(1000):
        assert not st_.step(0.0)
    assert st_.C == 0.0


def test_hand_computed_recurrence():
    s = detect.CusumState(T_fp=0.75, T_cs=0.4, kappa=0.05)
    seen = []
    for _ in range(5):
        s.step(0.9)
        seen.append(s.C)
    np.testing.assert_allclose(seen, [0.1, 0.2, 0.3, 0.4, 0.5], rtol=0, atol=1e-12)
    assert s.triggered and s.trigger_index == 4
    assert detect.first_trigger([0.9] * 10, T_fp=0.75, T_cs=0.4, kappa=0.05) == 4


def test_degenerate_mode_without_accumulation():
    assert detect.first_trigger([0.8], T_fp=0.75, T_cs=0.0, kappa=0.0) == 0
    assert detect.first_trigger([0.75], T_fp=0.75, T_cs=0.0, kappa=0.0) is None


def test_input_validation_and_reset():
    s = detect.CusumState()
    with pytest.raises(ValueError):
        s.step(1.5)
    with pytest.raises(ValueError):
        detect.CusumState(T_fp=2.0)
    for _ in range(100):
        s.step(1.0)
    assert s.triggered
    C = s.C
    s.step(1.0)
    assert s.C == C  # frozen once triggered
    s.reset()
    assert (s.C, s.triggered, s.trigger_index, s.n_steps) == (0.0, False, None, 0)
    assert detect.step(s, 0.1) is s


@given(probs, st.floats(0, 1), st.floats(0, 5), st.floats(0, 0.3))
def test_accumulator_non_negative(xs, T_fp, T_cs, kappa):
    s = detect.CusumState(T_fp, T_cs, kappa)
    for x in xs:
        s.step(x)
        assert s.C >= 0.0


@given(st.floats(0, 1), st.floats(0, 0.3), st.floats(0, 5), st.data())
def test_no_trigger_below_reference(T_fp, kappa, T_cs, data):
    ref = min(1.0, T_fp + kappa)
    xs = data.draw(st.lists(st.floats(0.0, ref), min_size=1, max_size=100))
    assert detect.first_trigger(xs, T_fp, T_cs, kappa) is None


def _later_or_equal(a, b):
    """True when trigger index b is no earlier than a (None means never)."""
    if b is None:
        return True
    return a is not None and b >= a


@given(probs, st.floats(0, 1), st.floats(0, 1), st.floats(0, 3), st.floats(0, 0.2), st.floats(0, 0.2))
def test_trigger_index_monotone(xs, t1, t2, T_cs, k1, k2):
    lo_fp, hi_fp = sorted((t1, t2))
    lo_k, hi_k = sorted((k1, k2))
    base = detect.first_trigger(xs, lo_fp, T_cs, lo_k)
    assert _later_or_equal(base, detect.first_trigger(xs, hi_fp, T_cs, lo_k))
    assert _later_or_equal(base, detect.first_trigger(xs, lo_fp, T_cs, hi_k))
    assert _later_or_equal(base, detect.first_trigger(xs, lo_fp, T_cs + 0.5, lo_k))


def test_adapt_threshold():
    assert round(detect.adapt_threshold(0.75, 0.15), 2) == 0.83
    assert detect.adapt_threshold(0.75, 0.15) == pytest.approx(5 / 6)
    assert detect.adapt_threshold(0.3, 0.3) == 0.5
    for bad in ((0.0, 0.5), (0.5, 1.0)):
        with pytest.raises(ValueError):
            detect.adapt_threshold(*bad)


def test_default_threshold():
    assert detect.default_threshold(3) == 0.75
    assert detect.default_threshold(1) == 0.5
    assert detect.default_threshold(9) == 0.9
    assert detect.default_threshold(3, balanced=False) == 0.5
    with pytest.raises(ValueError):
        detect.default_threshold(0)
