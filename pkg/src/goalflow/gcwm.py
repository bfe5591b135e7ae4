"""Goal-conditioned world model: a flow-matching vector field over the stack of
scheduled latent frames, conditioned on the current and goal latents.

Token layout per sample: ``[current, goal, frame_1 .. frame_F]``. Hidden
states of the frame tokens after every block are exposed as layer features
for the action expert.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensorcore as tc


class DivergenceError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# shared building blocks (also used by the action expert)

def time_features(flow_t, dim):
    """Sinusoidal embedding of flow time; ``flow_t`` is [B] in [0, 1]."""
    flow_t = np.asarray(flow_t, dtype=np.float64).reshape(-1)
    if np.any(flow_t < 0.0) or np.any(flow_t > 1.0):
        raise ValueError("flow time must lie in [0, 1]")
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(200.0), half))
    ang = flow_t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def dense(p, name, x):
    return tc.linear(x, p[name + ".w"], p.get(name + ".b"))


def norm(p, name, x):
    return tc.add(tc.mul(tc.layer_norm(x, 1e-5), p[name + ".g"]), p[name + ".b"])


def _heads(x, h):
    b, t, w = x.shape
    return tc.transpose(tc.reshape(x, (b, t, h, w // h)), (0, 2, 1, 3))


def _merge(x):
    b, h, t, d = x.shape
    return tc.reshape(tc.transpose(x, (0, 2, 1, 3)), (b, t, h * d))


def mha(p, prefix, xq, xkv, heads):
    q = _heads(dense(p, prefix + ".q", xq), heads)
    k = _heads(dense(p, prefix + ".k", xkv), heads)
    v = _heads(dense(p, prefix + ".v", xkv), heads)
    return dense(p, prefix + ".o", _merge(tc.attention(q, k, v)))


def mlp(p, prefix, x):
    return dense(p, prefix + ".fc2", tc.gelu_act(dense(p, prefix + ".fc1", x)))


def euler_sample(field, z0, n_steps):
    """Integrate ``dz/dt = field(z, t)`` from t=0 to 1 with ``n_steps`` Euler steps.

    ``field`` returns either a velocity array or ``(velocity, aux)``; the aux
    value of the final call is returned alongside the endpoint.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    z0 = np.array(z0, dtype=np.float64)
    z = z0
    # z_n = z_0 + (v_0 + ... + v_{n-1}) / N: the Euler recursion with a single
    # rounding of the offset, so a constant field lands on z_0 + c exactly
    acc = np.zeros_like(z0)
    aux = None
    for n in range(n_steps):
        out = field(z, n / n_steps)
        if isinstance(out, tuple):
            v, aux = out
        else:
            v = out
        acc = acc + np.asarray(v)
        z = z0 + acc / n_steps
        if not np.all(np.isfinite(z)):
            raise DivergenceError(f"non-finite state after Euler step {n + 1}")
    return z, aux


# ---------------------------------------------------------------------------
# world model

def pool2(images):
    """2x2 average pooling, flattened: [..., G, G] -> [..., (G/2)^2]."""
    images = np.asarray(images, dtype=np.float64)
    g = images.shape[-1]
    lead = images.shape[:-2]
    x = images.reshape(*lead, g // 2, 2, g // 2, 2).mean(axis=(-3, -1))
    return x.reshape(*lead, (g // 2) ** 2)


def encode(p, images):
    """Latent for [..., G, G] images: fixed 2x pooling then the learned affine map."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim < 2 or images.shape[-1] != images.shape[-2]:
        raise tc.ShapeError(f"encode: expected square images, got {images.shape}")
    return encode_pooled(p, pool2(images))


def encode_pooled(p, pooled):
    pooled = tc.as_tensor(pooled)
    if pooled.shape[-1] != p["wm.enc.w"].shape[1]:
        raise tc.ShapeError(f"encode: pooled size {pooled.shape[-1]} does not match encoder "
                            f"{p['wm.enc.w'].shape}")
    return tc.linear(pooled, p["wm.enc.w"], p["wm.enc.b"])


def wm_forward(p, cfg, noisy, z_t, z_g, flow_t):
    """Velocity [B, F, d_z] and per-layer frame features (list of L [B, F, W]).

    ``noisy``: [B, F, d_z]; ``z_t``, ``z_g``: [B, d_z]; ``flow_t``: [B].
    """
    noisy, z_t, z_g = tc.as_tensor(noisy), tc.as_tensor(z_t), tc.as_tensor(z_g)
    if noisy.ndim != 3 or noisy.shape[1:] != (cfg.n_frames, cfg.d_z):
        raise tc.ShapeError(f"wm_forward: noisy frames {noisy.shape}, expected [B, {cfg.n_frames}, {cfg.d_z}]")
    if z_t.shape != (noisy.shape[0], cfg.d_z) or z_g.shape != z_t.shape:
        raise tc.ShapeError(f"wm_forward: condition latents {z_t.shape}/{z_g.shape} mismatch")
    b = noisy.shape[0]
    temb = dense(p, "wm.temb", time_features(np.broadcast_to(flow_t, (b,)), cfg.t_dim))
    cond = dense(p, "wm.cond_in", tc.concat([tc.reshape(z_t, (b, 1, -1)), tc.reshape(z_g, (b, 1, -1))], axis=1))
    frames = tc.add(dense(p, "wm.frame_in", noisy), tc.reshape(temb, (b, 1, cfg.width)))
    h = tc.concat([cond, frames], axis=1)
    if cfg.pos_emb:
        h = tc.add(h, p["wm.pos"])
    feats = []
    for l in range(cfg.L):
        pre = f"wm.blk{l}"
        x = norm(p, pre + ".ln1", h)
        h = tc.add(h, mha(p, pre + ".attn", x, x, cfg.heads))
        h = tc.add(h, mlp(p, pre + ".mlp", norm(p, pre + ".ln2", h)))
        feats.append(tc.take(h, (slice(None), slice(2, None))))
    vel = dense(p, "wm.out", norm(p, "wm.ln_out", feats[-1]))
    return vel, feats


def wm_generate(p, cfg, z_t, z_g, n_v=None, seed=None, noise=None):
    """Euler-integrate the frame stack from standard-normal noise.

    Returns ``(frames [B, F, d_z], feats)`` where feats come from the final
    denoising forward pass. Pass ``noise`` explicitly or a ``seed``.
    """
    n_v = cfg.n_v if n_v is None else n_v
    z_t = np.asarray(tc.as_tensor(z_t).data)
    z_g = np.asarray(tc.as_tensor(z_g).data)
    if z_t.ndim == 1:
        z_t, z_g = z_t[None], z_g[None]
    b = z_t.shape[0]
    if noise is None:
        noise = tc.rng(0 if seed is None else seed, 0x3A).standard_normal((b, cfg.n_frames, cfg.d_z))

    def field(z, t):
        v, feats = wm_forward(p, cfg, z, z_t, z_g, np.full(b, t))
        return v.data, feats

    return euler_sample(field, noise, n_v)
