from dataclasses import replace

import numpy as np
import pytest

from goalflow import onlinehpr as oh
from goalflow import tensorcore as tc
from goalflow.bundle import attach_adapters, make_view
from goalflow.gcwm import encode, encode_pooled
from goalflow.rollout import Transition
from goalflow.simenv import EnvConfig
from goalflow.trainkit import flow_matching_loss, load_bundle

from conftest import tiny_bundle

ENV = EnvConfig(G=8, agent_radius=0.08, block_radius=0.12)


def adapted(seed=0):
    b = tiny_bundle(seed)
    attach_adapters(b, 2, seed)
    return b


def _transition(seed=0, same=False):
    gen = np.random.default_rng(seed)
    o = gen.uniform(size=(8, 8))
    o2 = o.copy() if same else gen.uniform(size=(8, 8))
    a = np.array([[0.06, -0.03, 1.0], [0.0, 0.0, 1.0]])
    return Transition(o, np.array([0.3, 0.4, 1.0]), a, o2, False)


def test_relabel_goal_is_reached_image():
    b = adapted()
    tr = _transition()
    ex = oh.relabel(tr, b)
    view, _ = make_view(b, "none")
    assert np.array_equal(encode_pooled(view, ex["goal"]).data, encode(view, tr.o_prime).data)
    # executed rows in model units, then stay rows with the last grip
    assert ex["actions"].shape == (b.schedule.n_actions, 3)
    np.testing.assert_allclose(ex["actions"][:2], [[1.0, -0.5, 1.0], [0.0, 0.0, 1.0]], rtol=1e-15)
    assert np.array_equal(ex["actions"][2:], np.tile([0.0, 0.0, 1.0], (2, 1)))


def test_relabel_degenerate_transition():
    b = adapted()
    tr = _transition(same=True)
    tr.a = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, -1.0]])
    ex = oh.relabel(tr, b)
    assert np.array_equal(ex["goal"], ex["obs"])
    assert np.array_equal(ex["actions"], np.tile([0.0, 0.0, -1.0], (4, 1)))


def test_relabel_ignores_success_flag():
    b = adapted()
    tr = _transition()
    ex1 = oh.relabel(tr, b)
    ex2 = oh.relabel(replace(tr, success_flag=True), b)
    assert all(np.array_equal(ex1[k], ex2[k]) for k in ex1)


def test_relabeled_perfect_stub_loss_is_zero():
    ex = oh.stack_examples([oh.relabel(_transition(i), adapted()) for i in range(3)])
    a1 = ex["actions"]
    a0 = np.random.default_rng(0).normal(size=a1.shape)
    loss = flow_matching_loss(lambda at, t: tc.Tensor(a1 - a0), a1, a0, np.full(3, 0.5))
    assert float(loss.data) == 0.0


def test_buffer_and_select():
    buf = oh.ReplayBuffer(2)
    buf.add(1)
    buf.add(2)
    assert buf.full()
    with pytest.raises(OverflowError):
        buf.add(3)
    buf.clear()
    assert len(buf) == 0
    trs = [replace(_transition(), success_flag=f) for f in (True, False, False)]
    assert len(oh.select(trs, "all")) == 3
    assert len(oh.select(trs, "success_only")) == 1
    assert len(oh.select(trs, "failed_only")) == 2


def test_round_config_validation():
    with pytest.raises(ValueError, match="strategy"):
        oh.RoundConfig(strategy="best").validate()
    with pytest.raises(ValueError):
        oh.RoundConfig(N=0).validate()
    with pytest.raises(ValueError):
        oh.RoundConfig(loss="l1").validate()


def test_round_consumes_n_and_only_touches_adapters():
    b = adapted()
    before = b.base_checksum()
    ups = {k: a.up.copy() for k, a in b.adapters.items()}
    rep = oh.online_round(ENV, b, oh.RoundConfig(N=20, epochs=2, max_cycles=3), seed=1)
    assert rep.buffer_used == 20 and rep.buffer_after == 0
    assert b.base_checksum() == before == rep.base_checksum
    assert any(not np.array_equal(ups[k], a.up) for k, a in b.adapters.items())
    assert all(np.array_equal(a.base, b.params[k]) for k, a in b.adapters.items())


def test_round_needs_adapters():
    with pytest.raises(ValueError, match="adapters"):
        oh.online_round(ENV, tiny_bundle(), oh.RoundConfig(), seed=0)


def test_flipped_flags_change_nothing_under_all():
    rc = oh.RoundConfig(N=12, epochs=2, max_cycles=3)
    a, b = adapted(), adapted()
    oh.online_round(ENV, a, rc, seed=2)
    flip = lambda trs: [replace(t, success_flag=not t.success_flag) for t in trs]
    oh.online_round(ENV, b, rc, seed=2, flag_transform=flip)
    for k in a.adapters:
        assert np.array_equal(a.adapters[k].up, b.adapters[k].up)
        assert np.array_equal(a.adapters[k].down, b.adapters[k].down)


def test_empty_filter_skips_update():
    b = adapted()
    ups = {k: a.up.copy() for k, a in b.adapters.items()}
    rc = oh.RoundConfig(N=6, epochs=1, max_cycles=2, strategy="success_only")
    rep = oh.online_round(ENV, b, rc, seed=3, flag_transform=lambda trs: [replace(t, success_flag=False) for t in trs])
    assert rep.skipped and rep.buffer_used == 0 and np.isnan(rep.mean_loss)
    assert all(np.array_equal(ups[k], a.up) for k, a in b.adapters.items())


def test_zero_rounds_is_baseline_only():
    reps = oh.run_improvement(ENV, tiny_bundle(), 0, 5, oh.RoundConfig(rank=2), seed=0)
    assert [r.round for r in reps] == [0]


def test_resume_from_snapshot(tmp_path):
    rc = oh.RoundConfig(N=8, epochs=1, rank=2, max_cycles=2)
    full = oh.run_improvement(ENV, tiny_bundle(), 2, 4, rc, seed=4, out_dir=str(tmp_path))
    resumed_bundle = load_bundle(tmp_path / "round_01.a2gw")
    resumed = oh.run_improvement(ENV, resumed_bundle, 2, 4, rc, seed=4, start_round=2)
    assert [r.round for r in resumed] == [2]
    final = load_bundle(tmp_path / "round_02.a2gw")
    for k, a in final.adapters.items():
        assert np.array_equal(a.up, resumed_bundle.adapters[k].up)
    assert resumed[0].mean_loss == full[2].mean_loss
    assert resumed[0].eval_success_rate == full[2].eval_success_rate


def test_rounds_csv(tmp_path):
    reps = [oh.RoundReport(0, 0, 0, 0, float("nan"), 0.25)]
    p = tmp_path / "r.csv"
    oh.write_rounds(p, reps, "fp")
    lines = p.read_text().splitlines()
    assert lines[0] == "round,rollouts,successes,buffer_used,mean_loss,eval_success_rate"
    assert lines[1] == "0,0,0,0,nan,0.25"
    assert lines[2] == "# fingerprint=fp"
