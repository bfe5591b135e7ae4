"""Model configuration, parameter initialisation and parameter views.

Parameters live in one flat dict ``name -> ndarray``; world-model names start
with ``wm.``, action-expert names with ``ae.``. Forward functions read from a
*view*: the same names mapped to Tensors, built in one of three modes:

* ``"none"``: constants (inference)
* ``"all"``: every parameter is a leaf that receives gradients
* ``"adapters"``: base parameters are constants; each adapted weight is
  ``base + scale * up @ down`` with ``up``/``down`` as leaves
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .msth import MSTHParams, compute_schedule
from .tensorcore import AdapterizedWeight, Tensor, adapter_effective, init_adapter, rng


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WMConfig:
    G: int = 16
    d_z: int = 32
    L: int = 2
    width: int = 64
    heads: int = 4
    n_frames: int = 4
    n_v: int = 4
    mlp_ratio: int = 2
    t_dim: int = 16
    pos_emb: bool = True

    @property
    def pooled_dim(self):
        return (self.G // 2) ** 2

    def validate(self):
        if self.L < 1:
            raise ConfigError("world model needs L >= 1 blocks")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.G % 2:
            raise ConfigError("G must be even for 2x pooling")
        if self.n_v < 1:
            raise ConfigError("n_v must be >= 1")


@dataclass(frozen=True)
class AEConfig:
    L: int = 2
    width: int = 32
    heads: int = 4
    action_dim: int = 3
    proprio_dim: int = 3
    n_actions: int = 10
    n_a: int = 8
    p_exec: int = 6
    mlp_ratio: int = 2
    pos_emb: bool = True

    def validate(self):
        if self.width % self.heads:
            raise ConfigError(f"action width {self.width} not divisible by heads {self.heads}")
        if self.n_a < 1:
            raise ConfigError("n_a must be >= 1")


def check_consistency(wm: WMConfig, ae: AEConfig, msth: MSTHParams):
    wm.validate()
    ae.validate()
    sched = compute_schedule(msth, allow_no_distal=True)
    if ae.L != wm.L:
        raise ConfigError(f"action expert L={ae.L} must equal world model L={wm.L}")
    if ae.width >= wm.width:
        raise ConfigError("action expert must be narrower than the world model")
    if wm.n_frames != sched.n_frames:
        raise ConfigError(f"world model frames {wm.n_frames} != schedule frames {sched.n_frames}")
    if ae.n_actions != sched.n_actions:
        raise ConfigError(f"action rows {ae.n_actions} != schedule actions {sched.n_actions}")
    if not 1 <= ae.p_exec <= msth.P:
        raise ConfigError(f"p_exec must be in [1, P={msth.P}] (p_exec={ae.p_exec})")
    return sched


def configs_for(msth: MSTHParams, G=16, **overrides):
    """World-model and action-expert configs sized for a schedule."""
    sched = compute_schedule(msth, allow_no_distal=True)
    wm_kw = {k[3:]: v for k, v in overrides.items() if k.startswith("wm_")}
    ae_kw = {k[3:]: v for k, v in overrides.items() if k.startswith("ae_")}
    wm = WMConfig(G=G, n_frames=sched.n_frames, **wm_kw)
    ae = AEConfig(L=wm.L, n_actions=sched.n_actions, **ae_kw)
    return wm, ae


# ---------------------------------------------------------------------------
# initialisation

def _linear(params, gen, name, d_in, d_out, zero=False, bias=True):
    if zero:
        params[name + ".w"] = np.zeros((d_out, d_in))
    else:
        params[name + ".w"] = gen.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_out, d_in))
    if bias:
        params[name + ".b"] = np.zeros(d_out)


def _norm(params, name, d):
    params[name + ".g"] = np.ones(d)
    params[name + ".b"] = np.zeros(d)


def _block(params, gen, prefix, width, mlp_ratio, cross_in=None):
    _norm(params, prefix + ".ln1", width)
    for p in ("q", "k", "v"):
        _linear(params, gen, f"{prefix}.attn.{p}", width, width, bias=False)
    _linear(params, gen, prefix + ".attn.o", width, width)
    if cross_in is not None:
        _norm(params, prefix + ".lnx", width)
        _linear(params, gen, prefix + ".xattn.q", width, width, bias=False)
        _linear(params, gen, prefix + ".xattn.k", cross_in, width, bias=False)
        _linear(params, gen, prefix + ".xattn.v", cross_in, width, bias=False)
        _linear(params, gen, prefix + ".xattn.o", width, width)
    _norm(params, prefix + ".ln2", width)
    _linear(params, gen, prefix + ".mlp.fc1", width, mlp_ratio * width)
    _linear(params, gen, prefix + ".mlp.fc2", mlp_ratio * width, width)


def init_wm_params(cfg: WMConfig, gen) -> dict:
    p = {}
    # pooled pixels are sparse and in [0,1]; this scale gives O(1) latents
    p["wm.enc.w"] = gen.normal(0.0, 0.5, size=(cfg.d_z, cfg.pooled_dim))
    p["wm.enc.b"] = np.zeros(cfg.d_z)
    _linear(p, gen, "wm.cond_in", cfg.d_z, cfg.width)
    _linear(p, gen, "wm.frame_in", cfg.d_z, cfg.width)
    _linear(p, gen, "wm.temb", cfg.t_dim, cfg.width)
    p["wm.pos"] = gen.normal(0.0, 0.02, size=(2 + cfg.n_frames, cfg.width))
    for l in range(cfg.L):
        _block(p, gen, f"wm.blk{l}", cfg.width, cfg.mlp_ratio)
    _norm(p, "wm.ln_out", cfg.width)
    _linear(p, gen, "wm.out", cfg.width, cfg.d_z, zero=True)
    return p


def init_ae_params(cfg: AEConfig, wm: WMConfig, gen) -> dict:
    p = {}
    _linear(p, gen, "ae.prop_in", cfg.proprio_dim, cfg.width)
    _linear(p, gen, "ae.act_in", cfg.action_dim, cfg.width)
    _linear(p, gen, "ae.temb", wm.t_dim, cfg.width)
    p["ae.pos"] = gen.normal(0.0, 0.02, size=(1 + cfg.n_actions, cfg.width))
    for l in range(cfg.L):
        _block(p, gen, f"ae.blk{l}", cfg.width, cfg.mlp_ratio, cross_in=wm.width)
    _norm(p, "ae.ln_out", cfg.width)
    _linear(p, gen, "ae.out", cfg.width, cfg.action_dim, zero=True)
    return p


@dataclass
class ModelBundle:
    wm_cfg: WMConfig
    ae_cfg: AEConfig
    msth: MSTHParams
    params: dict
    action_scale: float = 0.06  # env a_max; actions are modelled in units of a_max
    adapters: dict = field(default_factory=dict)  # weight name -> AdapterizedWeight
    stage: int = 0

    @property
    def schedule(self):
        return compute_schedule(self.msth, allow_no_distal=True)

    def config_dict(self):
        return {"wm": asdict(self.wm_cfg), "ae": asdict(self.ae_cfg), "msth": asdict(self.msth),
                "action_scale": self.action_scale}

    def fingerprint(self):
        return config_fingerprint(self.config_dict())

    def copy(self):
        return ModelBundle(self.wm_cfg, self.ae_cfg, self.msth,
                           {k: v.copy() for k, v in self.params.items()}, self.action_scale,
                           {k: AdapterizedWeight(a.base, a.down.copy(), a.up.copy(), a.scale)
                            for k, a in self.adapters.items()}, self.stage)

    def base_checksum(self):
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


def config_fingerprint(d) -> str:
    text = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def init_bundle(wm: WMConfig, ae: AEConfig, msth: MSTHParams, seed=0, action_scale=0.06) -> ModelBundle:
    check_consistency(wm, ae, msth)
    params = init_wm_params(wm, rng(seed, 1))
    params.update(init_ae_params(ae, wm, rng(seed, 2)))
    return ModelBundle(wm, ae, msth, params, action_scale)


def adaptable_weights(params) -> list:
    """Names of every linear weight matrix (the encoder included)."""
    return sorted(k for k, v in params.items() if k.endswith(".w") and v.ndim == 2)


def attach_adapters(bundle: ModelBundle, rank: int, seed=0) -> ModelBundle:
    gen = rng(seed, 0xADA)
    bundle.adapters = {name: init_adapter(bundle.params[name], min(rank, *bundle.params[name].shape), gen)
                       for name in adaptable_weights(bundle.params)}
    return bundle


def adapter_arrays(bundle: ModelBundle) -> dict:
    out = {}
    for name, a in bundle.adapters.items():
        out[name + ".lora_down"] = a.down
        out[name + ".lora_up"] = a.up
    return out


def set_adapter_arrays(bundle: ModelBundle, arrays: dict):
    for name, a in bundle.adapters.items():
        a.down = arrays[name + ".lora_down"]
        a.up = arrays[name + ".lora_up"]


def make_view(bundle: ModelBundle, mode="none"):
    """Returns ``(view, leaves)``: name -> Tensor for the forward pass and the
    dict of gradient-receiving leaves (empty in ``"none"`` mode)."""
    view, leaves = {}, {}
    if mode == "all":
        if bundle.adapters and any(np.any(a.up) for a in bundle.adapters.values()):
            raise ConfigError("full training with non-trivial adapters attached is not supported")
        for k, v in bundle.params.items():
            view[k] = leaves[k] = Tensor.param(v, k)
        return view, leaves
    for k, v in bundle.params.items():
        view[k] = Tensor(v, name=k)
    if mode == "adapters":
        if not bundle.adapters:
            raise ConfigError("adapter training requested but no adapters are attached")
        for name, a in bundle.adapters.items():
            d = leaves[name + ".lora_down"] = Tensor.param(a.down, name + ".lora_down")
            u = leaves[name + ".lora_up"] = Tensor.param(a.up, name + ".lora_up")
            view[name] = adapter_effective(a, d, u)
    elif mode == "none":
        for name, a in bundle.adapters.items():
            view[name] = Tensor(a.base + a.scale * (a.up @ a.down)) if np.any(a.up) else view[name]
    else:
        raise ValueError(f"unknown view mode {mode!r}")
    return view, leaves
