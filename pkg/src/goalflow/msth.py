"""Multi-scale temporal schedule: dense proximal offsets plus log-spaced distal
anchors, and slicing of recorded trajectories into training targets."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class MSTHParamError(ValueError):
    pass


@dataclass(frozen=True)
class MSTHParams:
    K: int  # total imagined horizon
    P: int  # proximal horizon
    r: int  # vision stride inside the proximal segment
    M: int  # number of distal anchors (0 = fixed-horizon chunking)

    def validate(self, allow_no_distal=False):
        K, P, r, M = self.K, self.P, self.r, self.M
        if not r >= 1:
            raise MSTHParamError(f"stride r must be >= 1 (r={r})")
        if not P >= r:
            raise MSTHParamError(f"need P >= r (P={P}, r={r})")
        if P % r:
            raise MSTHParamError(f"r must divide P (P={P}, r={r})")
        if M == 0 and allow_no_distal:
            return
        if not M >= 1:
            raise MSTHParamError(f"distal count M must be >= 1 (M={M})")
        if not K > P:
            raise MSTHParamError(f"need K > P (K={K}, P={P})")
        if not K - P >= M:
            raise MSTHParamError(f"need K - P >= M so distal offsets are distinct (K={K}, P={P}, M={M})")


@dataclass(frozen=True)
class MSTHSchedule:
    params: MSTHParams
    proximal_vision_offsets: tuple
    distal_offsets: tuple
    proximal_action_offsets: tuple

    @property
    def distal_action_offsets(self):
        return self.distal_offsets

    @property
    def vision_offsets(self):
        return self.proximal_vision_offsets + self.distal_offsets

    @property
    def action_offsets(self):
        return self.proximal_action_offsets + self.distal_offsets

    @property
    def n_frames(self):
        return len(self.vision_offsets)

    @property
    def n_actions(self):
        return len(self.action_offsets)


def distal_spacing(K, P, M, log=math.log):
    """Real-valued distal offsets ``P + (K-P) * log(m+1) / log(M+1)``, before flooring."""
    denom = log(M + 1)
    return [P + (K - P) * (log(m + 1) / denom) for m in range(1, M + 1)]


def distal_offsets(K, P, M, log=math.log):
    """``P + floor((K-P) / log(M+1) * log(m+1))`` for m = 1..M.

    Collisions after flooring are resolved by bumping the later index up by
    one, then pulling indices back below their successor so that the last
    offset stays at K. Needs ``K - P >= M``.
    """
    out = []
    for x in distal_spacing(K, P, M, log):
        # exact integers (e.g. 10 + 90 * ln2/ln4 = 55) must not floor one below
        nearest = round(x)
        d = nearest if abs(x - nearest) < 1e-9 * max(1.0, abs(x)) else math.floor(x)
        if out and d <= out[-1]:
            d = out[-1] + 1
        out.append(d)
    out[-1] = K
    for i in range(len(out) - 2, -1, -1):
        out[i] = min(out[i], out[i + 1] - 1)
    return out


def compute_schedule(p: MSTHParams, allow_no_distal=False) -> MSTHSchedule:
    """Schedule for ``p``. ``allow_no_distal`` admits M = 0 (dense-only baseline)."""
    p.validate(allow_no_distal=allow_no_distal)
    prox_v = tuple(k * p.r for k in range(1, p.P // p.r + 1))
    dist = tuple(distal_offsets(p.K, p.P, p.M)) if p.M else ()
    return MSTHSchedule(p, prox_v, dist, tuple(range(1, p.P + 1)))


@dataclass
class MSTHTarget:
    visual_targets: list  # frames, one per vision offset
    action_targets: np.ndarray  # [n_actions, action_dim]
    anchor_index: int


def stay_action(actions: np.ndarray) -> np.ndarray:
    """Zero motion, gripper held at its last commanded state."""
    stay = np.zeros(actions.shape[1])
    if actions.shape[1] > 2 and len(actions):
        stay[2:] = actions[-1, 2:]
    return stay


def gather_indices(anchor, offsets, n_frames, n_actions):
    """Clamped frame indices and action indices (-1 means stay) for one anchor.

    Action offset k refers to the action that produces frame anchor + k,
    i.e. ``actions[anchor + k - 1]``.
    """
    offs = np.asarray(offsets)
    frames = np.minimum(anchor + offs, n_frames - 1)
    acts = anchor + offs - 1
    acts = np.where(acts < n_actions, acts, -1)
    return frames, acts


def slice_trajectory(frames, actions, anchor_t: int, sched: MSTHSchedule) -> MSTHTarget:
    """Targets for one anchor: frames past the end repeat the terminal frame,
    actions past the end become the stay action."""
    n = len(frames)
    if n == 0:
        raise ValueError("slice_trajectory: empty trajectory")
    if not 0 <= anchor_t < n:
        raise IndexError(f"slice_trajectory: anchor {anchor_t} outside trajectory of length {n}")
    actions = np.asarray(actions, dtype=np.float64)
    fidx, _ = gather_indices(anchor_t, sched.vision_offsets, n, len(actions))
    _, aidx = gather_indices(anchor_t, sched.action_offsets, n, len(actions))
    stay = stay_action(actions)
    rows = [actions[i] if i >= 0 else stay for i in aidx]
    return MSTHTarget([frames[i] for i in fidx], np.array(rows).reshape(len(aidx), -1), anchor_t)
