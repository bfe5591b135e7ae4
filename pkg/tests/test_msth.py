import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from goalflow.msth import (MSTHParamError, MSTHParams, compute_schedule, distal_offsets, distal_spacing,
                           slice_trajectory)


def test_k100_example():
    s = compute_schedule(MSTHParams(K=100, P=10, r=2, M=3))
    assert list(s.distal_offsets) == [55, 81, 100]
    assert list(s.proximal_vision_offsets) == [2, 4, 6, 8, 10]
    assert list(s.proximal_action_offsets) == list(range(1, 11))
    assert s.distal_action_offsets == s.distal_offsets


def test_k100_matches_direct_evaluation():
    direct = [10 + math.floor(round(90 / math.log(4) * math.log(m + 1), 9)) for m in (1, 2, 3)]
    assert direct == [55, 81, 100]


@pytest.mark.parametrize("K,P", [(5, 1), (24, 8), (100, 10), (37, 36)])
def test_single_distal_is_k(K, P):
    assert list(compute_schedule(MSTHParams(K, P, 1, 1)).distal_offsets) == [K]


def test_nine_plus_nine_frames():
    s = compute_schedule(MSTHParams(K=18, P=9, r=1, M=9))
    assert len(s.proximal_vision_offsets) == 9 and len(s.distal_offsets) == 9
    assert list(s.distal_offsets) == list(range(10, 19))


@pytest.mark.parametrize("bad,needle", [
    (MSTHParams(10, 10, 1, 1), "K > P"),
    (MSTHParams(20, 6, 4, 1), "divide"),
    (MSTHParams(20, 2, 4, 1), "P >= r"),
    (MSTHParams(20, 4, 0, 1), "r must be >= 1"),
    (MSTHParams(20, 4, 2, 0), "M must be >= 1"),
    (MSTHParams(12, 10, 2, 3), "K - P >= M"),
])
def test_parameter_errors_name_constraint(bad, needle):
    with pytest.raises(MSTHParamError, match=needle):
        compute_schedule(bad)


def test_m0_baseline_only_when_allowed():
    s = compute_schedule(MSTHParams(24, 8, 4, 0), allow_no_distal=True)
    assert s.distal_offsets == () and s.n_actions == 8 and s.n_frames == 2


@st.composite
def valid_params(draw):
    r = draw(st.integers(1, 6))
    P = r * draw(st.integers(1, 12))
    M = draw(st.integers(1, 16))
    K = P + M + draw(st.integers(0, 300))
    return MSTHParams(K, P, r, M)


@settings(max_examples=1000, deadline=None)
@given(valid_params())
def test_schedule_invariants(p):
    s = compute_schedule(p)
    d = list(s.distal_offsets)
    assert d[-1] == p.K
    assert all(b > a for a, b in zip(d, d[1:]))
    assert all(x > p.P for x in d)
    for log in (math.log2, math.log10):
        assert distal_offsets(p.K, p.P, p.M, log) == d


@settings(max_examples=1000, deadline=None)
@given(valid_params())
def test_gaps_shrink(p):
    # exact on the real-valued spacing; flooring can make an integer gap one larger
    x = [p.P] + distal_spacing(p.K, p.P, p.M)
    real_gaps = np.diff(x)
    assert np.all(np.diff(real_gaps) <= 1e-9 * p.K)
    g = np.diff([p.P] + list(compute_schedule(p).distal_offsets))
    if p.K - p.P >= 2 * p.M:
        assert np.all(np.diff(g) <= 1)


def _counter_traj(n):
    frames = [np.full((2, 2), float(i)) for i in range(n)]
    actions = np.stack([np.array([i, -i, 1.0 if i % 2 else -1.0]) for i in range(n - 1)])
    return frames, actions


def test_counter_trajectory_oracle():
    s = compute_schedule(MSTHParams(K=100, P=10, r=2, M=3))
    frames, actions = _counter_traj(130)
    for anchor in (0, 7, 29):
        t = slice_trajectory(frames, actions, anchor, s)
        assert [f[0, 0] for f in t.visual_targets] == [v + anchor for v in [2, 4, 6, 8, 10, 55, 81, 100]]
        # action offset k produces frame anchor + k
        expect = [actions[anchor + k - 1] for k in list(range(1, 11)) + [55, 81, 100]]
        assert np.array_equal(t.action_targets, np.array(expect))
        assert t.anchor_index == anchor


def test_anchor_at_end_is_fully_clamped():
    s = compute_schedule(MSTHParams(K=24, P=8, r=4, M=2))
    frames, actions = _counter_traj(12)
    t = slice_trajectory(frames, actions, 11, s)
    assert all(f[0, 0] == 11.0 for f in t.visual_targets)
    stay = np.array([0.0, 0.0, actions[-1, 2]])
    assert np.array_equal(t.action_targets, np.tile(stay, (s.n_actions, 1)))
    assert len(t.visual_targets) == 8 // 4 + 2 and t.action_targets.shape == (10, 3)


def test_slice_is_pure_and_validates():
    s = compute_schedule(MSTHParams(K=24, P=8, r=4, M=2))
    frames, actions = _counter_traj(30)
    a = slice_trajectory(frames, actions, 3, s)
    b = slice_trajectory(frames, actions, 3, s)
    assert np.array_equal(a.action_targets, b.action_targets)
    assert all(np.array_equal(x, y) for x, y in zip(a.visual_targets, b.visual_targets))
    with pytest.raises(ValueError):
        slice_trajectory([], np.zeros((0, 3)), 0, s)
    with pytest.raises(IndexError):
        slice_trajectory(frames, actions, 30, s)
