"""Reward-free online improvement: roll out, relabel each control cycle with
the state it actually reached, fine-tune low-rank adapters, clear the buffer.

The update path sees only relabeled examples (start image, proprio, executed
block, reached image). ``success_flag`` is used for strategy filtering and
reporting, never for the loss.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .actex import ae_forward, to_model_units
from .bundle import adapter_arrays, attach_adapters, make_view, set_adapter_arrays
from .gcwm import encode_pooled, pool2, wm_forward
from .rollout import run_episodes, success_rate
from .tensorcore import OptimizerState, Tape, backward, optimizer_step, rng
from .trainkit import TrainingDivergence, flow_matching_loss, save_bundle

log = logging.getLogger(__name__)

STRATEGIES = ("all", "success_only", "failed_only")


@dataclass
class RoundConfig:
    N: int = 20  # buffer threshold
    epochs: int = 10  # passes over the buffer per round
    lr: float = 1e-3  # adapter learning rate
    rank: int = 4
    strategy: str = "all"
    max_cycles: int | None = None  # per episode before auto-reset; None = env horizon
    batch_size: int = 5
    loss: str = "flow"  # "flow" (stage-2 loss) or "regression"
    episodes_per_batch: int = 4

    def validate(self):
        if self.N < 1 or self.epochs < 1:
            raise ValueError("N >= 1 and epochs >= 1 required")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.loss not in ("flow", "regression"):
            raise ValueError(f"loss must be 'flow' or 'regression', got {self.loss!r}")
        if self.rank < 1 or self.batch_size < 1 or self.episodes_per_batch < 1:
            raise ValueError("rank, batch_size and episodes_per_batch must be >= 1")


class ReplayBuffer:
    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.transitions = []

    def add(self, tr):
        if len(self.transitions) >= self.capacity:
            raise OverflowError("replay buffer is full")
        self.transitions.append(tr)

    def full(self):
        return len(self.transitions) >= self.capacity

    def clear(self):
        self.transitions = []

    def __len__(self):
        return len(self.transitions)


@dataclass
class RoundReport:
    round: int
    rollouts: int
    successes: int
    buffer_used: int
    mean_loss: float
    eval_success_rate: float
    base_checksum: str = ""
    buffer_after: int = 0
    skipped: bool = False


# ---------------------------------------------------------------------------
# relabeling

def relabel(tr, bundle):
    """Training example with the reached image as goal.

    Action rows beyond the executed block are the stay action; every visual
    target is the reached image (the chunk-terminal state).
    """
    sched = bundle.schedule
    a = to_model_units(np.asarray(tr.a, dtype=np.float64), bundle.action_scale)
    n = len(a)
    offs = np.asarray(sched.action_offsets)
    stay = np.zeros(a.shape[1])
    stay[2:] = a[-1, 2:]
    rows = np.array([a[k - 1] if k <= n else stay for k in offs])
    reached = pool2(tr.o_prime)
    return {
        "obs": pool2(tr.o),
        "goal": reached,
        "proprio": np.asarray(tr.c_p, dtype=np.float64),
        "frames": np.repeat(reached[None], sched.n_frames, axis=0),
        "actions": rows,
    }


def stack_examples(examples):
    return {k: np.stack([e[k] for e in examples]) for k in examples[0]}


def select(transitions, strategy):
    if strategy == "all":
        return list(transitions)
    want = strategy == "success_only"
    return [t for t in transitions if bool(t.success_flag) == want]


# ---------------------------------------------------------------------------
# losses on relabeled batches

def _features(view, bundle, batch, noisy, t):
    z_t = encode_pooled(view, batch["obs"])
    z_g = encode_pooled(view, batch["goal"])
    return wm_forward(view, bundle.wm_cfg, noisy, z_t, z_g, t)


def relabel_loss(view, bundle, batch, gen, kind="flow"):
    """``flow``: the stage-2 action flow-matching loss. ``regression``: a
    deterministic one-step prediction from zero noise regressed onto the
    executed actions."""
    b = batch["obs"].shape[0]
    wm = bundle.wm_cfg
    if kind == "regression":
        zeros_t = np.zeros(b)
        _, feats = _features(view, bundle, batch, np.zeros((b, wm.n_frames, wm.d_z)), zeros_t)
        pred = ae_forward(view, bundle.ae_cfg, np.zeros(batch["actions"].shape), feats, batch["proprio"],
                          zeros_t, wm.t_dim)
        return tc.mse(pred, batch["actions"])
    w = view["wm.enc.w"].data
    z1 = batch["frames"] @ w.T + view["wm.enc.b"].data
    z0 = gen.standard_normal(z1.shape)
    t = gen.uniform(size=b)
    _, feats = _features(view, bundle, batch, (1 - t)[:, None, None] * z0 + t[:, None, None] * z1, t)
    a1 = batch["actions"]
    a0 = gen.standard_normal(a1.shape)
    ta = gen.uniform(size=b)
    return flow_matching_loss(
        lambda at, tt: ae_forward(view, bundle.ae_cfg, at, feats, batch["proprio"], tt, wm.t_dim), a1, a0, ta)


def train_on_examples(bundle, examples, rcfg: RoundConfig, seed):
    """Adapter-only epochs over relabeled examples; returns mean loss."""
    n = len(examples)
    opt = OptimizerState(lr=rcfg.lr)
    losses = []
    step = 0
    for epoch in range(rcfg.epochs):
        order = rng(seed, 0xE90C, epoch).permutation(n)
        for start in range(0, n, rcfg.batch_size):
            idx = order[start:start + rcfg.batch_size]
            batch = stack_examples([examples[i] for i in idx])
            gen = rng(seed, 0x5EB, step)
            try:
                with Tape() as tape:
                    # adapter products must be recorded, so the view is built on the tape
                    view, leaves = make_view(bundle, "adapters")
                    loss = relabel_loss(view, bundle, batch, gen, rcfg.loss)
                val = float(loss.data)
                grads = backward(loss, tape, leaves.values())
                new = optimizer_step(adapter_arrays(bundle), grads, opt)
            except tc.NonFiniteError as e:
                raise TrainingDivergence(step) from e
            set_adapter_arrays(bundle, new)
            losses.append(val)
            step += 1
    return float(np.mean(losses)) if losses else float("nan")


# ---------------------------------------------------------------------------
# rounds

def _rollout_seed(seed, rnd, k):
    return int(rng(seed, 0x0B11, rnd, k).integers(2 ** 62))


def eval_seeds(seed, n):
    return [int(rng(seed, 0xE7A1, i).integers(2 ** 62)) for i in range(n)]


def collect(env_cfg, bundle, rcfg: RoundConfig, seed, rnd, buffer: ReplayBuffer):
    """Fill ``buffer`` with control-cycle transitions from fresh episodes.

    Episodes auto-reset on success or after ``max_cycles``. Returns
    ``(rollouts, successes)`` over the episodes that contributed.
    """
    rollouts = successes = 0
    k = 0
    view, _ = make_view(bundle, "none")
    while not buffer.full():
        seeds = [_rollout_seed(seed, rnd, k + j) for j in range(rcfg.episodes_per_batch)]
        k += len(seeds)
        for res in run_episodes(bundle, env_cfg, seeds, record=True, max_cycles=rcfg.max_cycles, view=view):
            if buffer.full():
                break
            if not res.transitions:
                continue
            rollouts += 1
            successes += res.success
            for tr in res.transitions:
                if buffer.full():
                    break
                buffer.add(tr)
    return rollouts, successes


def online_round(env_cfg, bundle, rcfg: RoundConfig, seed, rnd=1, flag_transform=None):
    """One collect / relabel / adapter-update / clear cycle.

    ``flag_transform`` maps the collected transition list before filtering
    (used by the reward-freedom probe). Returns a :class:`RoundReport` with
    ``eval_success_rate`` unset (NaN).
    """
    rcfg.validate()
    if not bundle.adapters:
        raise ValueError("online_round needs adapters attached (see bundle.attach_adapters)")
    buffer = ReplayBuffer(rcfg.N)
    rollouts, successes = collect(env_cfg, bundle, rcfg, seed, rnd, buffer)
    transitions = buffer.transitions
    if flag_transform is not None:
        transitions = flag_transform(transitions)
    chosen = select(transitions, rcfg.strategy)
    examples = [relabel(tr, bundle) for tr in chosen]
    if examples:
        mean_loss = train_on_examples(bundle, examples, rcfg, int(rng(seed, 0x7A1, rnd).integers(2 ** 62)))
    else:
        log.info("round %d: no transitions left after %s filter; update skipped", rnd, rcfg.strategy)
        mean_loss = float("nan")
    buffer.clear()
    return RoundReport(rnd, rollouts, successes, len(examples), mean_loss, float("nan"),
                       bundle.base_checksum(), len(buffer), not examples)


def evaluate(env_cfg, bundle, seeds, max_cycles=None):
    return success_rate(run_episodes(bundle, env_cfg, seeds, max_cycles=max_cycles))


def run_improvement(env_cfg, bundle, rounds, eval_episodes, rcfg: RoundConfig, seed,
                    out_dir=None, start_round=1):
    """Alternate online rounds with frozen-policy evaluation on fixed seeds.

    Round 0 is the baseline (evaluated only when ``start_round == 1``).
    With ``out_dir``, adapter snapshots are written per round. Returns the
    list of :class:`RoundReport`.
    """
    rcfg.validate()
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    if not bundle.adapters:
        attach_adapters(bundle, rcfg.rank, seed)
    seeds = eval_seeds(seed, eval_episodes)
    reports = []
    if start_round == 1:
        reports.append(RoundReport(0, 0, 0, 0, float("nan"), evaluate(env_cfg, bundle, seeds),
                                   bundle.base_checksum()))
    for rnd in range(start_round, rounds + 1):
        rep = online_round(env_cfg, bundle, rcfg, seed, rnd)
        rep.eval_success_rate = evaluate(env_cfg, bundle, seeds)
        reports.append(rep)
        log.info("round %d: used %d, loss %.4f, eval %.3f", rnd, rep.buffer_used, rep.mean_loss,
                 rep.eval_success_rate)
        if out_dir is not None:
            save_bundle(os.path.join(out_dir, f"round_{rnd:02d}.a2gw"), bundle)
    return reports


ROUND_COLUMNS = ("round", "rollouts", "successes", "buffer_used", "mean_loss", "eval_success_rate")


def write_rounds(path_or_file, reports, fingerprint):
    own = isinstance(path_or_file, (str, os.PathLike))
    f = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ROUND_COLUMNS)
        for r in reports:
            w.writerow([r.round, r.rollouts, r.successes, r.buffer_used, repr(r.mean_loss),
                        repr(r.eval_success_rate)])
        f.write(f"# fingerprint={fingerprint}\n")
    finally:
        if own:
            f.close()
