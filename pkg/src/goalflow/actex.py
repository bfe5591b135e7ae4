"""Action expert: flow-matching vector field over the scheduled action rows,
reading world-model layer features through per-layer cross-attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .bundle import make_view
from .gcwm import dense, encode, euler_sample, mha, mlp, norm, time_features, wm_generate


def ae_forward(p, cfg, noisy_actions, c_w, c_p, flow_t, t_dim=16):
    """Velocity [B, A, action_dim].

    ``c_w``: list of L world-model features [B, F, W]; block l cross-attends to
    ``c_w[l]`` only. ``c_p``: proprio [B, proprio_dim].
    """
    noisy_actions, c_p = tc.as_tensor(noisy_actions), tc.as_tensor(c_p)
    if len(c_w) != cfg.L:
        raise tc.ShapeError(f"ae_forward: got {len(c_w)} feature layers, expected {cfg.L}")
    if noisy_actions.ndim != 3 or noisy_actions.shape[1:] != (cfg.n_actions, cfg.action_dim):
        raise tc.ShapeError(f"ae_forward: actions {noisy_actions.shape}, expected "
                            f"[B, {cfg.n_actions}, {cfg.action_dim}]")
    b = noisy_actions.shape[0]
    temb = tc.reshape(dense(p, "ae.temb", time_features(np.broadcast_to(flow_t, (b,)), t_dim)), (b, 1, cfg.width))
    prop = dense(p, "ae.prop_in", tc.reshape(c_p, (b, 1, cfg.proprio_dim)))
    acts = dense(p, "ae.act_in", noisy_actions)
    h = tc.add(tc.concat([prop, acts], axis=1), temb)
    if cfg.pos_emb:
        h = tc.add(h, p["ae.pos"])
    for l in range(cfg.L):
        pre = f"ae.blk{l}"
        x = norm(p, pre + ".ln1", h)
        h = tc.add(h, mha(p, pre + ".attn", x, x, cfg.heads))
        mem = tc.layer_norm(c_w[l], 1e-5)
        h = tc.add(h, mha(p, pre + ".xattn", norm(p, pre + ".lnx", h), mem, cfg.heads))
        h = tc.add(h, mlp(p, pre + ".mlp", norm(p, pre + ".ln2", h)))
    out = tc.take(h, (slice(None), slice(1, None)))
    return dense(p, "ae.out", norm(p, "ae.ln_out", out))


def ae_generate(p, cfg, c_w, c_p, n_a=None, seed=None, noise=None, t_dim=16):
    """Euler-integrate action rows from standard-normal noise."""
    n_a = cfg.n_a if n_a is None else n_a
    c_p = np.asarray(tc.as_tensor(c_p).data)
    if c_p.ndim == 1:
        c_p = c_p[None]
    b = c_p.shape[0]
    if noise is None:
        noise = tc.rng(0 if seed is None else seed, 0xAC).standard_normal((b, cfg.n_actions, cfg.action_dim))
    c_w = [tc.Tensor(f.data) for f in c_w]

    def field(a, t):
        return ae_forward(p, cfg, a, c_w, c_p, np.full(b, t), t_dim).data

    a, _ = euler_sample(field, noise, n_a)
    return a


@dataclass
class PolicyOutput:
    actions: np.ndarray  # [A, action_dim] in env units, clipped
    executed: np.ndarray  # first p_exec proximal rows
    n_proximal: int

    @property
    def distal(self):
        return self.actions[self.n_proximal:]


def to_env_units(a, action_scale):
    """Model rows (motion in units of a_max, grip +-1) -> clipped env vectors."""
    out = np.array(a, dtype=np.float64)
    out[..., :2] = np.clip(out[..., :2], -1.0, 1.0) * action_scale
    out[..., 2:] = np.where(out[..., 2:] > 0.0, 1.0, -1.0)
    return out


def to_model_units(a, action_scale):
    out = np.array(a, dtype=np.float64)
    out[..., :2] = out[..., :2] / action_scale
    return out


def act_batch(view, bundle, images, goal_images, proprios, wm_noise, ae_noise):
    """Batched control cycle. Returns model-space rows [B, A, action_dim]."""
    wm, ae = bundle.wm_cfg, bundle.ae_cfg
    z_t = encode(view, images).data
    z_g = encode(view, goal_images).data
    _, feats = wm_generate(view, wm, z_t, z_g, noise=wm_noise)
    return ae_generate(view, ae, feats, proprios, noise=ae_noise, t_dim=wm.t_dim)


def cycle_noise(bundle, seed, cycle):
    wm, ae = bundle.wm_cfg, bundle.ae_cfg
    zn = tc.rng(seed, cycle, 1).standard_normal((wm.n_frames, wm.d_z))
    an = tc.rng(seed, cycle, 2).standard_normal((ae.n_actions, ae.action_dim))
    return zn, an


def act(obs, goal, bundle, seed, cycle=0, view=None) -> PolicyOutput:
    """Encode, imagine, denoise actions; executed rows are the first p_exec."""
    if view is None:
        view, _ = make_view(bundle, "none")
    zn, an = cycle_noise(bundle, seed, cycle)
    rows = act_batch(view, bundle, obs.image[None], goal.goal_image[None], obs.proprio[None], zn[None], an[None])[0]
    acts = to_env_units(rows, bundle.action_scale)
    return PolicyOutput(acts, acts[: bundle.ae_cfg.p_exec].copy(), bundle.msth.P)
