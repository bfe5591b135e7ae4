"""Receding-horizon execution of a policy bundle in the simulated worlds.

Episodes are stepped in lockstep so that every control cycle is one batched
forward pass. Per-episode noise comes from the episode seed, so an
episode's actions do not depend on which other episodes share the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import simenv
from .actex import act_batch, cycle_noise, to_env_units
from .bundle import make_view
from .simenv import Action
from .tensorcore import rng


@dataclass
class Transition:
    """One control cycle: start observation/proprio, executed block, end observation."""

    o: np.ndarray  # image at cycle start
    c_p: np.ndarray
    a: np.ndarray  # [p_exec, action_dim] env units
    o_prime: np.ndarray  # image at cycle end
    success_flag: bool = False  # episode outcome against its original goal; filtering/reporting only


@dataclass
class EpisodeResult:
    seed: int
    success: bool
    cycles: int
    steps: int
    disturbed: bool
    n_waypoints: int = 0
    transitions: list = field(default_factory=list)


def pad_block(executed, p_exec):
    """Executed rows padded to ``p_exec`` with the stay action (zero motion,
    gripper held)."""
    executed = np.asarray(executed, dtype=np.float64).reshape(-1, 3)
    if len(executed) >= p_exec:
        return executed[:p_exec]
    stay = np.zeros((p_exec - len(executed), executed.shape[1]))
    stay[:, 2] = executed[-1, 2] if len(executed) else -1.0
    return np.concatenate([executed, stay])


def _noise_seed(seed, salt):
    if salt is None:
        return seed
    return int(rng(salt, seed & 0xFFFFFFFF, seed >> 32).integers(2 ** 62))


def run_episodes(bundle, cfg, seeds, disturb=False, record=False, max_cycles=None, view=None,
                 disturb_cycle=1, noise_seed=None):
    """Roll out one episode per seed; returns a list of :class:`EpisodeResult`.

    ``max_cycles`` defaults to ``ceil(t_max / p_exec)``. With ``disturb`` a
    block is teleported once, after ``disturb_cycle`` cycles. ``noise_seed``
    salts the policy noise (defaults to the episode seed).
    """
    p_exec = bundle.ae_cfg.p_exec
    n_prox = bundle.msth.P
    if max_cycles is None:
        max_cycles = math.ceil(cfg.t_max / p_exec)
    if view is None:
        view, _ = make_view(bundle, "none")
    seeds = [int(s) for s in seeds]
    states, goals = [], []
    for s in seeds:
        st, goal, _ = simenv.reset(cfg, s)
        states.append(st)
        goals.append(goal)
    results = [EpisodeResult(s, simenv.success(st, g, cfg), 0, 0, False, len(st.waypoints))
               for s, st, g in zip(seeds, states, goals)]
    active = [i for i, r in enumerate(results) if not r.success]
    for cycle in range(max_cycles):
        if not active:
            break
        if disturb and cycle == disturb_cycle:
            for i in active:
                states[i] = simenv.inject_disturbance(states[i], cfg, seeds[i])
                results[i].disturbed = True
        imgs = np.array([simenv.render(states[i], cfg) for i in active])
        props = np.array([simenv.proprio(states[i]) for i in active])
        gimgs = np.array([goals[i].goal_image for i in active])
        noises = [cycle_noise(bundle, _noise_seed(seeds[i], noise_seed), cycle) for i in active]
        rows = act_batch(view, bundle, imgs, gimgs, props,
                         np.array([n[0] for n in noises]), np.array([n[1] for n in noises]))
        acts = to_env_units(rows, bundle.action_scale)
        still = []
        for j, i in enumerate(active):
            res = results[i]
            s = states[i]
            executed = []
            for k in range(p_exec):
                assert k < n_prox, "distal rows are never executed"
                s = simenv.step(s, Action.from_vector(acts[j, k], cfg.a_max), cfg)
                executed.append(acts[j, k])
                res.steps += 1
                if simenv.success(s, goals[i], cfg):
                    res.success = True
                    break
            res.cycles += 1
            if record:
                res.transitions.append(Transition(imgs[j], props[j], pad_block(executed, p_exec),
                                                  simenv.render(s, cfg)))
            states[i] = s
            if not res.success:
                still.append(i)
        active = still
    for res in results:
        # the flag describes the rollout (episode), not the individual chunk
        for tr in res.transitions:
            tr.success_flag = res.success
    return results


def success_rate(results):
    return float(np.mean([r.success for r in results])) if results else 0.0
