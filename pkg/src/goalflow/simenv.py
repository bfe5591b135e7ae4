"""Deterministic 2-D manipulation worlds with low-resolution rendering.

PushWorld: carry blocks to goal positions (grip, transport, release).
TraceWorld: visit a sequence of waypoints in order, leaving a drawn trail.

States are immutable values; :func:`step` is a pure function.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from .tensorcore import rng

AGENT_INTENSITY = 1.0
BLOCK_INTENSITY = 0.6
TRAIL_INTENSITY = 0.3

# block spawn regions (x range, y range); goals always use GOAL_REGION
ID_SPAWN = ((0.15, 0.55), (0.15, 0.85))
OOD_SPAWN = ((0.70, 0.88), (0.15, 0.85))
GOAL_REGION = ((0.15, 0.85), (0.15, 0.85))

LENGTH_CLASSES = {"short": 3, "medium": 5, "long": 8}
TRACE_GRID = (0.2, 0.4, 0.6, 0.8)
TRACE_LIBRARY_SIZE = 200
TRACE_LIBRARY_SEED = 20240611


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    task: str = "push"  # "push" | "trace"
    G: int = 16
    a_max: float = 0.06
    success_eps: float = 0.08
    n_blocks: int = 1
    contact_radius: float = 0.08
    agent_radius: float = 0.05
    block_radius: float = 0.08
    trail_half_width: float = 0.03
    t_max: int = 60
    # out-of-domain switches
    shifted_spawn: bool = False
    novel_shape: bool = False
    distractors: int = 0
    ood_patterns: bool = False
    # trace: fixed length class, or None for a mix of all classes
    length_class: str | None = None
    disturb_bound: float = 0.15

    def validate(self):
        if self.task not in ("push", "trace"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.G < 8:
            raise ValueError(f"render resolution G must be >= 8 (G={self.G})")
        if not self.success_eps > 0:
            raise ValueError("success_eps must be positive")
        if not self.a_max > 0:
            raise ValueError("a_max must be positive")
        if self.task == "push" and self.n_blocks < 1:
            raise ValueError("push task needs at least one block")
        if self.length_class is not None and self.length_class not in LENGTH_CLASSES:
            raise ValueError(f"unknown length class {self.length_class!r}")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")


@dataclass(frozen=True)
class WorldState:
    agent_pos: tuple
    block_poses: tuple = ()
    carrying: int | None = None
    waypoint_progress: int = 0
    waypoints: tuple = ()

    def validate(self):
        pts = [self.agent_pos, *self.block_poses, *self.waypoints]
        for x, y in pts:
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise ValueError(f"position {(x, y)} outside the unit workspace")
        if self.carrying is not None and not 0 <= self.carrying < len(self.block_poses):
            raise ValueError(f"carrying index {self.carrying} invalid")


@dataclass(frozen=True)
class Action:
    delta: tuple
    grip: bool = False

    def to_vector(self):
        return np.array([self.delta[0], self.delta[1], 1.0 if self.grip else -1.0])

    @classmethod
    def from_vector(cls, vec, a_max):
        dx = float(np.clip(vec[0], -a_max, a_max))
        dy = float(np.clip(vec[1], -a_max, a_max))
        return cls((dx, dy), bool(vec[2] > 0.0))


@dataclass
class Observation:
    image: np.ndarray  # [G, G] in [0, 1]
    proprio: np.ndarray  # [x, y, carrying]


@dataclass
class GoalSpec:
    goal_state: WorldState
    goal_image: np.ndarray


def _clip01(v):
    return min(1.0, max(0.0, v))


def _dist(a, b):
    return math.hypot(a[0] - b[0], a[1] - b[1])


def step(s: WorldState, a: Action, cfg: EnvConfig) -> WorldState:
    """Grip update, then a clipped move; a held block follows the agent rigidly."""
    am = cfg.a_max
    dx = min(am, max(-am, a.delta[0]))
    dy = min(am, max(-am, a.delta[1]))
    carrying = s.carrying
    blocks = list(s.block_poses)
    if not a.grip:
        carrying = None
    elif carrying is None and blocks:
        best, best_d = None, cfg.contact_radius
        for i, b in enumerate(blocks):
            d = _dist(s.agent_pos, b)
            if d <= best_d:
                best, best_d = i, d
        carrying = best
    ax = _clip01(s.agent_pos[0] + dx)
    ay = _clip01(s.agent_pos[1] + dy)
    if carrying is not None:
        mx, my = ax - s.agent_pos[0], ay - s.agent_pos[1]
        bx, by = blocks[carrying]
        blocks[carrying] = (_clip01(bx + mx), _clip01(by + my))
    progress = s.waypoint_progress
    if s.waypoints and progress < len(s.waypoints):
        if _dist((ax, ay), s.waypoints[progress]) <= cfg.success_eps:
            progress += 1
    return WorldState((ax, ay), tuple(blocks), carrying, progress, s.waypoints)


def render(s: WorldState, cfg: EnvConfig) -> np.ndarray:
    img = np.zeros((cfg.G, cfg.G))
    if s.waypoints and s.waypoint_progress > 1:
        pts = np.array(s.waypoints[: s.waypoint_progress])
        K.draw_segments(img, pts[:-1, 0].copy(), pts[:-1, 1].copy(), pts[1:, 0].copy(), pts[1:, 1].copy(),
                        cfg.trail_half_width, TRAIL_INTENSITY)
    if s.block_poses:
        b = np.array(s.block_poses)
        K.draw_discs(img, b[:, 0].copy(), b[:, 1].copy(), cfg.block_radius, BLOCK_INTENSITY, cfg.novel_shape)
    K.draw_discs(img, np.array([s.agent_pos[0]]), np.array([s.agent_pos[1]]), cfg.agent_radius,
                 AGENT_INTENSITY, False)
    return img


def proprio(s: WorldState) -> np.ndarray:
    return np.array([s.agent_pos[0], s.agent_pos[1], 0.0 if s.carrying is None else 1.0])


def observe(s: WorldState, cfg: EnvConfig) -> Observation:
    return Observation(render(s, cfg), proprio(s))


def success(s: WorldState, g: GoalSpec, cfg: EnvConfig) -> bool:
    """Closed-ball test: distance <= success_eps counts."""
    if cfg.task == "trace":
        return s.waypoint_progress >= len(s.waypoints)
    return all(_dist(b, gb) <= cfg.success_eps for b, gb in zip(s.block_poses, g.goal_state.block_poses))


def _clip_delta(vx, vy, am):
    return (min(am, max(-am, vx)), min(am, max(-am, vy)))


def scripted_expert(s: WorldState, g: GoalSpec, cfg: EnvConfig) -> Action:
    """Proportional controller toward the current sub-goal."""
    am = cfg.a_max
    if cfg.task == "trace":
        if s.waypoint_progress >= len(s.waypoints):
            return Action((0.0, 0.0), False)
        wx, wy = s.waypoints[s.waypoint_progress]
        return Action(_clip_delta(wx - s.agent_pos[0], wy - s.agent_pos[1], am), False)
    tol = 0.5 * cfg.success_eps
    goals = g.goal_state.block_poses
    if s.carrying is not None:
        i = s.carrying
        bx, by = s.block_poses[i]
        gx, gy = goals[i]
        if _dist((bx, by), (gx, gy)) <= tol:
            return Action((0.0, 0.0), False)
        return Action(_clip_delta(gx - bx, gy - by, am), True)
    for i, (b, gb) in enumerate(zip(s.block_poses, goals)):
        if _dist(b, gb) > tol:
            # approach with the gripper already closed so step attaches on first
            # contact, unless that would pick up a different block
            grip = not any(_dist(s.agent_pos, o) <= cfg.contact_radius
                           for j, o in enumerate(s.block_poses) if j != i)
            return Action(_clip_delta(b[0] - s.agent_pos[0], b[1] - s.agent_pos[1], am), grip)
    return Action((0.0, 0.0), False)


def inject_disturbance(s: WorldState, cfg: EnvConfig, seed, bound=None) -> WorldState:
    """Teleport one block (the agent in TraceWorld) by a bounded uniform offset.

    A teleported block is dropped if it was held.
    """
    b = cfg.disturb_bound if bound is None else bound
    gen = rng(seed, 0xD157)
    off = gen.uniform(-b, b, size=2)
    if not s.block_poses:
        ax, ay = s.agent_pos
        return replace(s, agent_pos=(_clip01(ax + off[0]), _clip01(ay + off[1])))
    i = int(gen.integers(len(s.block_poses)))
    blocks = list(s.block_poses)
    bx, by = blocks[i]
    blocks[i] = (_clip01(bx + off[0]), _clip01(by + off[1]))
    carrying = None if s.carrying == i else s.carrying
    return replace(s, block_poses=tuple(blocks), carrying=carrying)


# ---------------------------------------------------------------------------
# instance generation

def _trace_neighbors(p):
    i, j = p
    n = len(TRACE_GRID)
    return [(i + di, j + dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)
            if (di or dj) and 0 <= i + di < n and 0 <= j + dj < n]


def _segments_cross(a, b, c, d):
    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    if len({a, b, c, d}) < 4:
        return False
    return (orient(a, b, c) * orient(a, b, d) < 0) and (orient(c, d, a) * orient(c, d, b) < 0)


def sample_pattern(gen, n_points):
    """Self-avoiding, non-crossing king-move walk on the waypoint grid."""
    n = len(TRACE_GRID)
    for _ in range(1000):
        path = [(int(gen.integers(n)), int(gen.integers(n)))]
        while len(path) < n_points:
            opts = [q for q in _trace_neighbors(path[-1]) if q not in path]
            opts = [q for q in opts
                    if not any(_segments_cross(path[-1], q, path[k], path[k + 1]) for k in range(len(path) - 2))]
            if not opts:
                break
            path.append(opts[int(gen.integers(len(opts)))])
        if len(path) == n_points:
            return tuple(path)
    raise GenerationError(f"could not sample a {n_points}-point pattern")


_LIBRARY = None


def pattern_library():
    """Fixed in-domain word library, split evenly across length classes."""
    global _LIBRARY
    if _LIBRARY is None:
        gen = rng(TRACE_LIBRARY_SEED)
        lib = {c: [] for c in LENGTH_CLASSES}
        seen = set()
        classes = list(LENGTH_CLASSES)
        i = 0
        while sum(len(v) for v in lib.values()) < TRACE_LIBRARY_SIZE:
            c = classes[i % len(classes)]
            pat = sample_pattern(gen, LENGTH_CLASSES[c])
            if pat not in seen:
                seen.add(pat)
                lib[c].append(pat)
                i += 1
        _LIBRARY = {c: tuple(v) for c, v in lib.items()}
    return _LIBRARY


def _grid_to_pos(pat):
    return tuple((TRACE_GRID[i], TRACE_GRID[j]) for i, j in pat)


def length_class_of(n_waypoints):
    for name, n in LENGTH_CLASSES.items():
        if n == n_waypoints:
            return name
    return "other"


def _sample_trace(cfg, gen):
    cls = cfg.length_class or list(LENGTH_CLASSES)[int(gen.integers(len(LENGTH_CLASSES)))]
    lib = pattern_library()
    if cfg.ood_patterns:
        known = set(lib[cls])
        while True:
            pat = sample_pattern(gen, LENGTH_CLASSES[cls])
            if pat not in known:
                break
    else:
        pat = lib[cls][int(gen.integers(len(lib[cls])))]
    wps = _grid_to_pos(pat)
    start = WorldState(wps[0], (), None, 1, wps)
    target = WorldState(wps[-1], (), None, len(wps), wps)
    return start, target


def _sample_push(cfg, gen):
    spawn = OOD_SPAWN if cfg.shifted_spawn else ID_SPAWN
    min_sep = 2.5 * cfg.contact_radius
    n_move = cfg.n_blocks
    n_total = n_move + cfg.distractors
    for _ in range(200):
        blocks = []
        while len(blocks) < n_total:
            region = spawn if len(blocks) < n_move else GOAL_REGION
            p = (float(gen.uniform(*region[0])), float(gen.uniform(*region[1])))
            if all(_dist(p, q) >= min_sep for q in blocks):
                blocks.append(p)
            elif len(blocks) and gen.uniform() < 0.01:
                break
        if len(blocks) < n_total:
            continue
        goals = []
        ok = True
        for i in range(n_move):
            for _ in range(100):
                q = (float(gen.uniform(*GOAL_REGION[0])), float(gen.uniform(*GOAL_REGION[1])))
                others = blocks[n_move:] + goals
                if _dist(q, blocks[i]) >= 0.25 and all(_dist(q, o) >= min_sep for o in others):
                    goals.append(q)
                    break
            else:
                ok = False
                break
        if not ok:
            continue
        agent = (float(gen.uniform(0.1, 0.9)), float(gen.uniform(0.1, 0.9)))
        start = WorldState(agent, tuple(blocks))
        target = WorldState(goals[-1], tuple(goals) + tuple(blocks[n_move:]))
        return start, target
    raise GenerationError("could not place blocks and goals")


def expert_rollout(s: WorldState, g: GoalSpec, cfg: EnvConfig, t_max=None):
    """Run the scripted expert until success or ``t_max`` steps; returns (states, actions)."""
    t_max = cfg.t_max if t_max is None else t_max
    states, actions = [s], []
    for _ in range(t_max):
        if success(s, g, cfg):
            break
        a = scripted_expert(s, g, cfg)
        s = step(s, a, cfg)
        states.append(s)
        actions.append(a)
    return states, actions


def reset(cfg: EnvConfig, seed, max_attempts=50):
    """Sample a solvable instance. The goal state is the expert's terminal state."""
    cfg.validate()
    gen = rng(seed, 0x5E7)
    for _ in range(max_attempts):
        if cfg.task == "trace":
            start, target = _sample_trace(cfg, gen)
        else:
            start, target = _sample_push(cfg, gen)
        probe = GoalSpec(target, None)
        states, _ = expert_rollout(start, probe, cfg)
        if success(states[-1], probe, cfg):
            final = states[-1]
            if cfg.task == "push":
                final = replace(final, carrying=None)
            goal = GoalSpec(final, render(final, cfg))
            return start, goal, observe(start, cfg)
    raise GenerationError(f"no solvable instance for seed {seed} after {max_attempts} attempts")


@dataclass
class Trajectory:
    images: np.ndarray  # [T+1, G, G]
    proprio: np.ndarray  # [T+1, 3]
    actions: np.ndarray  # [T, 3]; columns dx, dy, grip (+1 closed / -1 open)
    goal_image: np.ndarray  # [G, G]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    @property
    def observations(self):
        return [Observation(i, p) for i, p in zip(self.images, self.proprio)]


def demo_trajectory(cfg: EnvConfig, seed) -> Trajectory:
    """One expert demonstration; goal image is its terminal frame."""
    s, goal, _ = reset(cfg, seed)
    states, actions = expert_rollout(s, goal, cfg)
    if not success(states[-1], goal, cfg):
        raise GenerationError(f"expert failed on seed {seed}")
    images = np.array([render(x, cfg) for x in states])
    return Trajectory(images, np.array([proprio(x) for x in states]),
                      np.array([a.to_vector() for a in actions]).reshape(-1, 3),
                      images[-1].copy(), int(seed),
                      {"n_waypoints": len(s.waypoints)})


def generate_demos(cfg: EnvConfig, n_episodes: int, seed, path=None):
    """Expert trajectories for episode seeds derived from ``seed``; written to
    ``path`` in the dataset format when given."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    trajs = [demo_trajectory(cfg, episode_seed(seed, i)) for i in range(n_episodes)]
    if path is not None:
        from .trainkit import save_dataset
        save_dataset(path, trajs, cfg)
    return trajs


def episode_seed(seed, i):
    return int(rng(seed, 0xE9, i).integers(2 ** 62))
