"""Datasets, flow-matching losses, the two offline training stages and
checkpoint persistence."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensorcore as tc
from .actex import ae_forward, to_model_units
from .bundle import (AEConfig, ModelBundle, WMConfig, adapter_arrays, config_fingerprint, make_view,
                     set_adapter_arrays)
from .gcwm import encode_pooled, pool2, wm_forward
from .msth import MSTHParams
from .simenv import EnvConfig, Trajectory
from .tensorcore import AdapterizedWeight, OptimizerState, Tape, backward, optimizer_step, rng

log = logging.getLogger(__name__)

DATASET_MAGIC = b"A2G1"
DATASET_VERSION = 1
CKPT_MAGIC = b"A2GW"
CKPT_VERSION = 1


class FormatError(ValueError):
    """Malformed or incompatible dataset/checkpoint file."""

    def __init__(self, msg, offset=None):
        super().__init__(msg if offset is None else f"{msg} (at byte offset {offset})")
        self.offset = offset


class CorruptLengthError(FormatError):
    pass


class FingerprintError(FormatError):
    pass


class TrainingDivergence(FloatingPointError):
    def __init__(self, step):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# binary helpers

class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptLengthError(f"truncated file: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def array(self, dtype):
        (rank,) = self.unpack("<B")
        shape = self.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        itemsize = np.dtype(dtype).itemsize
        data = self.take(n * itemsize)
        return np.frombuffer(data, dtype=dtype).reshape(shape)


def _pack_array(out, arr, dtype):
    arr = np.ascontiguousarray(arr, dtype=dtype)
    out.write(struct.pack("<B", arr.ndim))
    if arr.ndim:
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(arr.astype(np.dtype(dtype).newbyteorder("<"), copy=False).tobytes())


# ---------------------------------------------------------------------------
# dataset files

@dataclass
class Dataset:
    manifest: dict
    trajectories: list

    def __len__(self):
        return len(self.trajectories)


_TRAJ_FIELDS = ("images", "proprio", "actions", "goal_image")


def env_fingerprint(cfg: EnvConfig) -> str:
    return config_fingerprint(asdict(cfg))


def save_dataset(path, trajs, cfg: EnvConfig):
    buf = io.BytesIO()
    manifest = {
        "format_version": DATASET_VERSION,
        "n_trajectories": len(trajs),
        "n_transitions": sum(len(t.actions) for t in trajs),
        "task": cfg.task,
        "G": cfg.G,
        "a_max": repr(cfg.a_max),
        "env_fingerprint": env_fingerprint(cfg),
    }
    header = "".join(f"{k}={v}\n" for k, v in manifest.items()).encode("utf-8")
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<HI", DATASET_VERSION, len(header)))
    buf.write(header)
    for t in trajs:
        buf.write(struct.pack("<Q", int(t.seed) & 0xFFFFFFFFFFFFFFFF))
        for name in _TRAJ_FIELDS:
            _pack_array(buf, getattr(t, name), "<f4")
        _pack_array(buf, np.array([t.meta.get("n_waypoints", 0)]), "<f4")
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _parse_manifest(text, offset):
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"bad manifest line {line!r}", offset)
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != DATASET_MAGIC:
        raise FormatError("not a dataset file (bad magic)", 0)
    version, hlen = r.unpack("<HI")
    if version != DATASET_VERSION:
        raise FormatError(f"dataset format version {version}, expected {DATASET_VERSION}", 4)
    hstart = r.pos
    try:
        manifest = _parse_manifest(r.take(hlen).decode("utf-8"), hstart)
    except UnicodeDecodeError:
        raise FormatError("manifest is not UTF-8", hstart) from None
    try:
        n = int(manifest["n_trajectories"])
    except (KeyError, ValueError):
        raise FormatError("manifest lacks n_trajectories", hstart) from None
    trajs = []
    for i in range(n):
        start = r.pos
        (seed,) = r.unpack("<Q")
        arrs = {name: r.array("<f4").astype(np.float64) for name in _TRAJ_FIELDS}
        meta = r.array("<f4")
        t = Trajectory(seed=int(seed), meta={"n_waypoints": int(meta[0])}, **arrs)
        if t.images.ndim != 3 or len(t.actions) != len(t.images) - 1 or len(t.proprio) != len(t.images):
            raise FormatError(f"trajectory {i} has inconsistent field lengths", start)
        trajs.append(t)
    if r.pos != len(r.buf):
        raise CorruptLengthError(f"{len(r.buf) - r.pos} trailing bytes after {n} trajectories", r.pos)
    if int(manifest.get("n_transitions", -1)) != sum(len(t.actions) for t in trajs):
        raise FormatError("manifest transition count does not match records", hstart)
    return Dataset(manifest, trajs)


# ---------------------------------------------------------------------------
# checkpoints

def save_bundle(path, bundle: ModelBundle):
    buf = io.BytesIO()
    meta = {"config": bundle.config_dict(), "fingerprint": bundle.fingerprint(), "stage": bundle.stage,
            "adapters": {k: a.scale for k, a in sorted(bundle.adapters.items())}}
    mtext = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = dict(sorted(bundle.params.items()))
    for name, a in sorted(bundle.adapters.items()):
        tensors[name + ".lora_down"] = a.down
        tensors[name + ".lora_up"] = a.up
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HI", CKPT_VERSION, len(mtext)))
    buf.write(mtext)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        _pack_array(buf, arr, "<f8")
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def bundle_from_config(d, params, stage=0) -> ModelBundle:
    return ModelBundle(WMConfig(**d["wm"]), AEConfig(**d["ae"]), MSTHParams(**d["msth"]), params,
                       float(d["action_scale"]), {}, stage)


def load_bundle(path, expected_fingerprint=None) -> ModelBundle:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", 0)
    version, mlen = r.unpack("<HI")
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint format version {version}, expected {CKPT_VERSION}", 4)
    meta = json.loads(r.take(mlen).decode("utf-8"))
    fp = config_fingerprint(meta["config"])
    if fp != meta["fingerprint"]:
        raise FingerprintError("stored fingerprint does not match stored config")
    if expected_fingerprint is not None and fp != expected_fingerprint:
        raise FingerprintError(f"checkpoint fingerprint {fp} != expected {expected_fingerprint} "
                               "(model or schedule configuration differs)")
    (n,) = r.unpack("<I")
    tensors = {}
    for _ in range(n):
        (nl,) = r.unpack("<H")
        name = r.take(nl).decode("utf-8")
        tensors[name] = r.array("<f8").astype(np.float64)
    if r.pos != len(r.buf):
        raise CorruptLengthError(f"{len(r.buf) - r.pos} trailing bytes", r.pos)
    params = {k: v for k, v in tensors.items() if not k.endswith((".lora_down", ".lora_up"))}
    bundle = bundle_from_config(meta["config"], params, meta["stage"])
    for name, scale in meta["adapters"].items():
        bundle.adapters[name] = AdapterizedWeight(params[name], tensors[name + ".lora_down"],
                                                  tensors[name + ".lora_up"], float(scale))
    return bundle


# ---------------------------------------------------------------------------
# batches

class TrainData:
    """Demonstrations flattened for vectorised anchor sampling."""

    def __init__(self, trajs, sched, action_scale):
        if not trajs:
            raise ValueError("empty dataset")
        self.sched = sched
        self.n_obs = np.array([len(t.images) for t in trajs])
        self.n_act = self.n_obs - 1
        self.obs_start = np.concatenate([[0], np.cumsum(self.n_obs)[:-1]])
        self.act_start = np.concatenate([[0], np.cumsum(self.n_act)[:-1]])
        self.pooled = pool2(np.concatenate([t.images for t in trajs]))
        self.proprio = np.concatenate([t.proprio for t in trajs])
        self.actions = to_model_units(np.concatenate([t.actions for t in trajs]), action_scale)
        self.goal = pool2(np.array([t.goal_image for t in trajs]))
        self.stay = np.zeros((len(trajs), self.actions.shape[1]))
        for i in range(len(trajs)):
            if self.n_act[i]:
                self.stay[i, 2:] = self.actions[self.act_start[i] + self.n_act[i] - 1, 2:]

    def __len__(self):
        return len(self.n_obs)

    def sample(self, gen, batch_size):
        ti = gen.integers(len(self), size=batch_size)
        # anchors uniform over [0, len - 2]: every anchor has at least one action
        anchor = np.floor(gen.uniform(size=batch_size) * np.maximum(self.n_act[ti], 1)).astype(np.int64)
        return self.gather(ti, anchor)

    def gather(self, ti, anchor):
        s = self.sched
        vo = np.asarray(s.vision_offsets)
        ao = np.asarray(s.action_offsets)
        fidx = np.minimum(anchor[:, None] + vo[None, :], self.n_obs[ti, None] - 1) + self.obs_start[ti, None]
        araw = anchor[:, None] + ao[None, :] - 1
        valid = araw < self.n_act[ti, None]
        aidx = np.where(valid, araw, 0) + self.act_start[ti, None]
        acts = np.where(valid[..., None], self.actions[aidx], self.stay[ti][:, None, :])
        return {
            "obs": self.pooled[self.obs_start[ti] + anchor],
            "goal": self.goal[ti],
            "proprio": self.proprio[self.obs_start[ti] + anchor],
            "frames": self.pooled[fidx],
            "actions": acts,
        }


# ---------------------------------------------------------------------------
# losses

def flow_matching_loss(predict, x1, x0, t):
    """``mean ||predict(x_t, t) - (x1 - x0)||^2`` on the linear path
    ``x_t = (1 - t) x0 + t x1``. ``predict`` returns a Tensor."""
    x1 = np.asarray(x1, dtype=np.float64)
    if x1.shape[0] == 0:
        raise ValueError("empty batch")
    tt = np.asarray(t, dtype=np.float64).reshape(-1, *([1] * (x1.ndim - 1)))
    xt = (1.0 - tt) * x0 + tt * x1
    return tc.mse(predict(xt, np.asarray(t).reshape(-1)), x1 - x0)


def _const_encode(view, pooled):
    w, b = view["wm.enc.w"].data, view["wm.enc.b"].data
    return pooled @ w.T + b


def loss_v(view, bundle, batch, gen):
    """Visual flow-matching loss. Returns ``(L_v, feats)``; feats are the
    world-model layer features of the same forward pass (input to ``loss_a``).

    Target latents use the encoder as a fixed map (no gradient).
    """
    wm = bundle.wm_cfg
    b = batch["obs"].shape[0]
    if b == 0:
        raise ValueError("empty batch")
    z_t = encode_pooled(view, batch["obs"])
    z_g = encode_pooled(view, batch["goal"])
    z1 = _const_encode(view, batch["frames"])
    z0 = gen.standard_normal(z1.shape)
    t = gen.uniform(size=b)
    feats = []

    def predict(xt, tt):
        v, f = wm_forward(view, wm, xt, z_t, z_g, tt)
        feats.extend(f)
        return v

    return flow_matching_loss(predict, z1, z0, t), feats


def loss_a(view, bundle, batch, feats, gen):
    """Action flow-matching loss over all scheduled rows (proximal and distal
    weighted equally)."""
    a1 = batch["actions"]
    a0 = gen.standard_normal(a1.shape)
    t = gen.uniform(size=a1.shape[0])
    return flow_matching_loss(
        lambda at, tt: ae_forward(view, bundle.ae_cfg, at, feats, batch["proprio"], tt, bundle.wm_cfg.t_dim),
        a1, a0, t)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    lam: float = 0.1
    batch_size: int = 64
    steps: int = 2000
    lr: float = 1e-3
    lr_final_frac: float = 0.1  # cosine decay to lr * lr_final_frac
    seed: int = 0
    log_every: int = 0

    def validate(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size >= 1 and steps >= 0 required")


@dataclass
class StepLosses:
    step: int
    L_v: float
    L_a: float
    total: float


def _lr_at(cfg, step):
    if cfg.steps <= 1:
        return cfg.lr
    frac = step / (cfg.steps - 1)
    return cfg.lr * (cfg.lr_final_frac + (1 - cfg.lr_final_frac) * 0.5 * (1 + math.cos(math.pi * frac)))


def stage_losses(view, bundle, batch, gen, lam, stage):
    lv, feats = loss_v(view, bundle, batch, gen)
    la = loss_a(view, bundle, batch, feats, gen)
    if stage == 1:
        total = tc.add(lv, tc.scale(la, lam))
    else:
        total = la
    return lv, la, total


def fit(bundle, sample, cfg: TrainConfig, stage, mode="all", opt=None, stream=0):
    """Generic optimisation loop; ``sample(gen)`` returns a batch dict.

    Returns the list of per-step losses. ``bundle`` is updated in place.
    """
    cfg.validate()
    opt = opt or OptimizerState(lr=cfg.lr)
    trace = []
    for step in range(cfg.steps):
        gen = rng(cfg.seed, 0xBA7C, stream, step)
        batch = sample(gen)
        try:
            with Tape() as tape:
                view, leaves = make_view(bundle, mode)
                lv, la, total = stage_losses(view, bundle, batch, gen, cfg.lam, stage)
            vals = (float(lv.data), float(la.data), float(total.data))
            if not all(map(math.isfinite, vals)):
                raise TrainingDivergence(step)
            grads = backward(total, tape, leaves.values())
            opt.lr = _lr_at(cfg, step)
            if mode == "adapters":
                new = optimizer_step(adapter_arrays(bundle), grads, opt)
            else:
                new = optimizer_step(bundle.params, grads, opt)
        except tc.NonFiniteError as e:
            raise TrainingDivergence(step) from e
        if mode == "adapters":
            set_adapter_arrays(bundle, new)
        else:
            bundle.params = new
            for name, a in bundle.adapters.items():
                a.base = bundle.params[name]
        trace.append(StepLosses(step, *vals))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("stage %d step %d L_v=%.4f L_a=%.4f total=%.4f", stage, step, *vals)
    return trace


def train_stage1(dataset, bundle: ModelBundle, cfg: TrainConfig):
    """Joint training of both networks on ``L_v + lam * L_a``."""
    if not len(dataset):
        raise ValueError("empty dataset")
    data = TrainData(dataset.trajectories if isinstance(dataset, Dataset) else dataset,
                     bundle.schedule, bundle.action_scale)
    trace = fit(bundle, lambda g: data.sample(g, cfg.batch_size), cfg, stage=1, stream=1)
    bundle.stage = 1
    return bundle, trace


def train_stage2(dataset, bundle: ModelBundle, cfg: TrainConfig):
    """End-to-end fine-tuning of both networks on ``L_a`` alone."""
    if bundle.stage < 1:
        raise ValueError("stage 2 needs a stage-1 bundle")
    if not len(dataset):
        raise ValueError("empty dataset")
    data = TrainData(dataset.trajectories if isinstance(dataset, Dataset) else dataset,
                     bundle.schedule, bundle.action_scale)
    trace = fit(bundle, lambda g: data.sample(g, cfg.batch_size), cfg, stage=2, stream=2)
    bundle.stage = 2
    return bundle, trace


def write_trace(path_or_file, trace, fingerprint):
    own = isinstance(path_or_file, str) or hasattr(path_or_file, "__fspath__")
    f = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "L_v", "L_a", "total"])
        for s in trace:
            w.writerow([s.step, repr(s.L_v), repr(s.L_a), repr(s.total)])
        f.write(f"# fingerprint={fingerprint}\n")
    finally:
        if own:
            f.close()
