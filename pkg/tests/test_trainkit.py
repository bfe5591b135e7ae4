import numpy as np
import pytest

from goalflow import tensorcore as tc
from goalflow import trainkit as tk
from goalflow.bundle import configs_for, init_bundle, make_view
from goalflow.msth import MSTHParams
from goalflow.simenv import EnvConfig, generate_demos
from goalflow.tensorcore import Tape, backward, rng

MSTH = MSTHParams(24, 8, 4, 2)


@pytest.fixture(scope="module")
def demos():
    return generate_demos(EnvConfig(), 10, 0)


def fresh(seed=0):
    wm, ae = configs_for(MSTH)
    return init_bundle(wm, ae, MSTH, seed=seed)


# --- loss closed forms -------------------------------------------------------------

def test_flow_loss_perfect_stub_is_zero():
    gen = np.random.default_rng(0)
    x1, x0 = gen.normal(size=(4, 3, 2)), gen.normal(size=(4, 3, 2))
    loss = tk.flow_matching_loss(lambda xt, t: tc.Tensor(x1 - x0), x1, x0, gen.uniform(size=4))
    assert float(loss.data) == 0.0


def test_flow_loss_zero_stub_is_mean_square():
    x1 = np.random.default_rng(1).normal(size=(5, 4, 3))
    loss = tk.flow_matching_loss(lambda xt, t: tc.Tensor(np.zeros_like(xt)), x1, np.zeros_like(x1), np.full(5, 0.3))
    assert float(loss.data) == pytest.approx(float(np.mean(x1 ** 2)), rel=1e-14)


def test_flow_loss_empty_batch():
    with pytest.raises(ValueError):
        tk.flow_matching_loss(lambda xt, t: tc.Tensor(xt), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))


def test_stage_total_arithmetic(monkeypatch):
    monkeypatch.setattr(tk, "loss_v", lambda *a: (tc.Tensor(np.array(1.0)), []))
    monkeypatch.setattr(tk, "loss_a", lambda *a: tc.Tensor(np.array(2.0)))
    lv, la, total = tk.stage_losses(None, None, None, None, 0.1, 1)
    assert float(total.data) == pytest.approx(1.2, abs=1e-15)
    _, _, total2 = tk.stage_losses(None, None, None, None, 0.1, 2)
    assert float(total2.data) == 2.0


def _grads(bundle, demos, lam, stage, seed=0):
    data = tk.TrainData(demos, bundle.schedule, bundle.action_scale)
    gen = rng(seed)
    batch = data.sample(gen, 8)
    with Tape() as tape:
        view, leaves = make_view(bundle, "all")
        lv, la, total = tk.stage_losses(view, bundle, batch, gen, lam, stage)
    return backward(total, tape, leaves.values()), float(lv.data), float(la.data)


def _randomized(seed=0):
    b = fresh(seed)
    gen = np.random.default_rng(5)
    # the zero-initialised output layers would hide gradient paths
    for k in ("wm.out.w", "ae.out.w"):
        b.params[k] = 0.1 * gen.normal(size=b.params[k].shape)
    return b


def test_lambda_zero_gives_no_action_expert_gradients(demos):
    g, _, _ = _grads(_randomized(), demos, 0.0, 1)
    assert all(not np.any(v) for k, v in g.items() if k.startswith("ae."))
    assert any(np.any(v) for k, v in g.items() if k.startswith("wm."))


def test_action_loss_reaches_world_model(demos):
    g, _, _ = _grads(_randomized(), demos, 0.1, 2)
    wm_norm = sum(float(np.sum(v ** 2)) for k, v in g.items() if k.startswith("wm.") and k != "wm.out.w")
    assert wm_norm > 0.0
    # the visual head is not on the action-loss path
    assert not np.any(g["wm.out.w"])


def test_losses_deterministic_per_seed(demos):
    b = _randomized()
    assert _grads(b, demos, 0.1, 1, seed=3)[1:] == _grads(b, demos, 0.1, 1, seed=3)[1:]
    assert _grads(b, demos, 0.1, 1, seed=3)[1:] != _grads(b, demos, 0.1, 1, seed=4)[1:]


def test_batches_deterministic(demos):
    data = tk.TrainData(demos, fresh().schedule, 0.06)
    a, b = data.sample(rng(9), 16), data.sample(rng(9), 16)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_batch_targets_follow_schedule(demos):
    sched = fresh().schedule
    data = tk.TrainData(demos, sched, 0.06)
    t = demos[0]
    batch = data.gather(np.array([0]), np.array([2]))
    from goalflow.gcwm import pool2
    from goalflow.msth import slice_trajectory
    ref = slice_trajectory(t.images, t.actions, 2, sched)
    np.testing.assert_array_equal(batch["frames"][0], pool2(np.array(ref.visual_targets)))
    expect = ref.action_targets.copy()
    expect[:, :2] /= 0.06
    np.testing.assert_allclose(batch["actions"][0], expect, rtol=1e-15)
    np.testing.assert_array_equal(batch["goal"][0], pool2(t.images[-1]))


# --- training runs -----------------------------------------------------------------

def test_stage1_halves_loss_and_stage2_moves_world_model(demos):
    b = fresh()
    b, trace = tk.train_stage1(demos, b, tk.TrainConfig(steps=500, batch_size=16, lr=2e-3))
    first = np.mean([s.total for s in trace[:5]])
    assert trace[-1].step == 499
    assert np.mean([s.total for s in trace[495:]]) < 0.5 * first
    assert all(s.total == pytest.approx(s.L_v + 0.1 * s.L_a, rel=1e-12) for s in trace)
    before = {k: v.copy() for k, v in b.params.items()}
    b, trace2 = tk.train_stage2(demos, b, tk.TrainConfig(steps=200, batch_size=16, lr=1e-3))
    assert b.stage == 2
    assert np.mean([s.L_a for s in trace2[-20:]]) < np.mean([s.L_a for s in trace2[:20]])
    changed = [k for k in before if k.startswith("wm.") and not np.array_equal(before[k], b.params[k])]
    assert "wm.enc.w" in changed and "wm.blk0.attn.q.w" in changed


def test_stage2_bit_reproducible_and_requires_stage1(demos):
    with pytest.raises(ValueError, match="stage-1"):
        tk.train_stage2(demos, fresh(), tk.TrainConfig(steps=1))
    runs = []
    for _ in range(2):
        b = fresh()
        b.stage = 1
        b, _ = tk.train_stage2(demos, b, tk.TrainConfig(steps=5, batch_size=4))
        runs.append(b.params)
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_reports_step(demos):
    b = fresh()
    b.params["wm.enc.w"] = b.params["wm.enc.w"] * 1e305
    with pytest.raises(tk.TrainingDivergence) as ei:
        tk.train_stage1(demos, b, tk.TrainConfig(steps=3, batch_size=4))
    assert ei.value.step == 0


def test_train_config_validation():
    with pytest.raises(ValueError):
        tk.TrainConfig(lam=-0.1).validate()


def test_trace_csv(tmp_path):
    p = tmp_path / "trace.csv"
    tk.write_trace(p, [tk.StepLosses(0, 1.0, 2.0, 1.2)], "abc")
    lines = p.read_text().splitlines()
    assert lines[0] == "step,L_v,L_a,total"
    assert lines[1] == "0,1.0,2.0,1.2"
    assert lines[-1] == "# fingerprint=abc"


# --- persistence ---------------------------------------------------------------------

def test_bundle_round_trip(tmp_path):
    from goalflow.bundle import attach_adapters
    b = fresh(3)
    attach_adapters(b, 2, seed=1)
    name = next(iter(b.adapters))
    b.adapters[name].up = np.random.default_rng(0).normal(size=b.adapters[name].up.shape)
    p = tmp_path / "b.a2gw"
    tk.save_bundle(p, b)
    c = tk.load_bundle(p, expected_fingerprint=b.fingerprint())
    assert set(c.params) == set(b.params)
    assert all(np.array_equal(b.params[k], c.params[k]) for k in b.params)
    assert all(np.array_equal(b.adapters[k].up, c.adapters[k].up) for k in b.adapters)
    assert c.config_dict() == b.config_dict() and c.stage == b.stage
    tk.save_bundle(tmp_path / "c.a2gw", c)
    assert (tmp_path / "c.a2gw").read_bytes() == p.read_bytes()


def test_bundle_errors(tmp_path):
    b = fresh()
    p = tmp_path / "b.a2gw"
    tk.save_bundle(p, b)
    raw = p.read_bytes()
    (tmp_path / "t.a2gw").write_bytes(raw[:-7])
    with pytest.raises(tk.CorruptLengthError):
        tk.load_bundle(tmp_path / "t.a2gw")
    other = MSTHParams(24, 8, 4, 1)
    wm, ae = configs_for(other)
    with pytest.raises(tk.FingerprintError):
        tk.load_bundle(p, expected_fingerprint=init_bundle(wm, ae, other).fingerprint())
    (tmp_path / "v.a2gw").write_bytes(raw[:4] + b"\x02\x00" + raw[6:])
    with pytest.raises(tk.FormatError, match="version"):
        tk.load_bundle(tmp_path / "v.a2gw")
    (tmp_path / "m.a2gw").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(tk.FormatError, match="magic"):
        tk.load_bundle(tmp_path / "m.a2gw")


def test_dataset_round_trip_and_errors(tmp_path, demos):
    p = tmp_path / "d.a2g"
    tk.save_dataset(p, demos[:3], EnvConfig())
    ds = tk.load_dataset(p)
    assert len(ds) == 3 and ds.manifest["n_trajectories"] == "3"
    assert int(ds.manifest["n_transitions"]) == sum(len(t.actions) for t in demos[:3])
    for a, b in zip(demos[:3], ds.trajectories):
        assert a.seed == b.seed
        np.testing.assert_array_equal(a.images.astype(np.float32), b.images)
        np.testing.assert_array_equal(a.actions.astype(np.float32), b.actions)
    raw = p.read_bytes()
    (tmp_path / "t.a2g").write_bytes(raw[:-10])
    with pytest.raises(tk.CorruptLengthError) as ei:
        tk.load_dataset(tmp_path / "t.a2g")
    assert ei.value.offset is not None and "offset" in str(ei.value)
    (tmp_path / "v.a2g").write_bytes(raw[:4] + b"\x07\x00" + raw[6:])
    with pytest.raises(tk.FormatError, match="version"):
        tk.load_dataset(tmp_path / "v.a2g")
    (tmp_path / "x.a2g").write_bytes(raw + b"\x00")
    with pytest.raises(tk.CorruptLengthError):
        tk.load_dataset(tmp_path / "x.a2g")
