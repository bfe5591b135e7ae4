"""Run configuration, experiment orchestration and CSV reports.

A run configuration is a text file of ``section.key = value`` lines. Sections
map onto the library's config dataclasses; unknown keys are rejected and all
cross-config invariants are checked before anything runs.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import simenv
from .bundle import AEConfig, ConfigError, WMConfig, check_consistency, config_fingerprint, configs_for, init_bundle
from .msth import MSTHParamError, MSTHParams
from .onlinehpr import RoundConfig, eval_seeds, run_improvement, write_rounds
from .rollout import run_episodes
from .simenv import EnvConfig
from .trainkit import (TrainConfig, load_bundle, load_dataset, save_bundle, train_stage1, train_stage2,
                       write_trace)

log = logging.getLogger(__name__)

VARIANTS = ("id", "ood")


class RunConfigError(ValueError):
    """Unknown key, unparsable value, or violated cross-config invariant."""


# fields that are derived rather than configured
_DERIVED = {"wm": {"G", "n_frames"}, "ae": {"L", "n_actions"}, "stage1": {"seed"}, "stage2": {"seed"}}


@dataclass
class RunSettings:
    seed: int = 0
    n_demos: int = 500
    episodes: int = 50
    eval_max_cycles: int | None = None


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    msth: MSTHParams = field(default_factory=lambda: MSTHParams(24, 8, 4, 2))
    wm: dict = field(default_factory=dict)  # WMConfig overrides
    ae: dict = field(default_factory=dict)  # AEConfig overrides
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(steps=4000, lr=2e-3))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(steps=4000, lr=1e-3))
    online: RoundConfig = field(default_factory=RoundConfig)
    ood: dict = field(default_factory=dict)  # EnvConfig overrides for the OOD variant
    run: RunSettings = field(default_factory=RunSettings)

    # -- derived pieces ------------------------------------------------------
    def model_configs(self, msth=None):
        kw = {f"wm_{k}": v for k, v in self.wm.items()}
        kw.update({f"ae_{k}": v for k, v in self.ae.items()})
        return configs_for(msth or self.msth, G=self.env.G, **kw)

    def env_for(self, variant):
        if variant not in VARIANTS:
            raise RunConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
        if variant == "id":
            return self.env
        ood = self.ood or ({"ood_patterns": True} if self.env.task == "trace" else {"shifted_spawn": True})
        return replace(self.env, **ood)

    def train_config(self, stage):
        return replace(self.stage1 if stage == 1 else self.stage2, seed=self.run.seed)

    def to_dict(self):
        return {"env": dataclasses.asdict(self.env), "msth": dataclasses.asdict(self.msth), "wm": dict(self.wm),
                "ae": dict(self.ae), "stage1": dataclasses.asdict(self.stage1),
                "stage2": dataclasses.asdict(self.stage2), "online": dataclasses.asdict(self.online),
                "ood": dict(self.ood), "run": dataclasses.asdict(self.run)}

    def fingerprint(self):
        return config_fingerprint(self.to_dict())

    def validate(self):
        try:
            self.env.validate()
            self.env_for("ood").validate()
            wm, ae = self.model_configs()
            check_consistency(wm, ae, self.msth)
            self.stage1.validate()
            self.stage2.validate()
            self.online.validate()
        except (ConfigError, MSTHParamError, ValueError, TypeError) as e:
            raise RunConfigError(str(e)) from e
        if self.run.n_demos < 1 or self.run.episodes < 1:
            raise RunConfigError("run.n_demos and run.episodes must be >= 1")
        return self


_SECTIONS = {"env": EnvConfig, "msth": MSTHParams, "wm": WMConfig, "ae": AEConfig, "stage1": TrainConfig,
             "stage2": TrainConfig, "online": RoundConfig, "ood": EnvConfig, "run": RunSettings}


def _coerce(type_text, raw, key):
    t = str(type_text).replace(" ", "")
    optional = "None" in t.split("|")
    if optional and raw.lower() in ("none", "null", ""):
        return None
    base = [p for p in t.split("|") if p != "None"][0]
    try:
        if base == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
        if base == "str":
            return raw
    except ValueError:
        raise RunConfigError(f"{key}: cannot parse {raw!r} as {base}") from None
    raise RunConfigError(f"{key}: unsupported field type {type_text}")


def parse_config(text) -> RunConfig:
    values = {s: {} for s in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise RunConfigError(f"line {lineno}: expected 'section.key = value'")
        key, raw = (x.strip() for x in line.split("=", 1))
        if "." not in key:
            raise RunConfigError(f"line {lineno}: key {key!r} lacks a section prefix")
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise RunConfigError(f"line {lineno}: unknown section {section!r}")
        fields = {f.name: f for f in dataclasses.fields(_SECTIONS[section])}
        if name not in fields or name in _DERIVED.get(section, ()):
            raise RunConfigError(f"line {lineno}: unknown key {key!r}")
        if name in values[section]:
            raise RunConfigError(f"line {lineno}: duplicate key {key!r}")
        values[section][name] = _coerce(fields[name].type, raw, key)
    rc = RunConfig()
    try:
        rc.env = replace(rc.env, **values["env"])
        rc.msth = replace(rc.msth, **values["msth"])
        rc.stage1 = replace(rc.stage1, **values["stage1"])
        rc.stage2 = replace(rc.stage2, **values["stage2"])
        rc.online = replace(rc.online, **values["online"])
        rc.run = replace(rc.run, **values["run"])
    except TypeError as e:
        raise RunConfigError(str(e)) from e
    rc.wm, rc.ae, rc.ood = values["wm"], values["ae"], values["ood"]
    return rc


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


# ---------------------------------------------------------------------------
# CSV helpers

def _finish_csv(f, fingerprint):
    f.write(f"# fingerprint={fingerprint}\n")


def write_csv(path, header, rows, fingerprint):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    _finish_csv(buf, fingerprint)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(buf.getvalue())


# ---------------------------------------------------------------------------
# commands

def gen_demos(rc: RunConfig, n, out, variant="id"):
    return simenv.generate_demos(rc.env_for(variant), n, rc.run.seed, out)


def new_bundle(rc: RunConfig, msth=None):
    msth = msth or rc.msth
    wm, ae = rc.model_configs(msth)
    return init_bundle(wm, ae, msth, seed=rc.run.seed, action_scale=rc.env.a_max)


def train(rc: RunConfig, stage, trajectories, bundle=None, msth=None):
    """Stage 1 from scratch (or ``bundle``) / stage 2 from a stage-1 bundle."""
    if stage == 1:
        bundle = bundle or new_bundle(rc, msth)
        return train_stage1(trajectories, bundle, rc.train_config(1))
    if bundle is None:
        raise ValueError("stage 2 needs a stage-1 bundle")
    return train_stage2(trajectories, bundle, rc.train_config(2))


def train_file(rc: RunConfig, stage, dataset_path, out, bundle_path=None, trace_path=None):
    data = load_dataset(dataset_path)
    bundle = None
    if bundle_path is not None:
        wm, ae = rc.model_configs()
        bundle = load_bundle(bundle_path)
        if (bundle.wm_cfg, bundle.ae_cfg, bundle.msth) != (wm, ae, rc.msth):
            raise RunConfigError("bundle configuration does not match the run configuration")
    bundle, trace = train(rc, stage, data.trajectories, bundle)
    save_bundle(out, bundle)
    write_trace(trace_path or out + ".trace.csv", trace, rc.fingerprint())
    return bundle, trace


EPISODE_COLUMNS = ("seed", "task", "variant", "length_class", "cycles", "steps", "success", "disturbed")


def evaluate(rc: RunConfig, bundle, episodes, variant="id", disturb=False, seed=None):
    """Episode rows and the success rate over a fixed seed block."""
    cfg = rc.env_for(variant)
    seeds = eval_seeds(rc.run.seed if seed is None else seed, episodes)
    results = run_episodes(bundle, cfg, seeds, disturb=disturb, max_cycles=rc.run.eval_max_cycles)
    rows = []
    for r in results:
        cls = simenv.length_class_of(r.n_waypoints) if cfg.task == "trace" else "-"
        rows.append([r.seed, cfg.task, variant, cls, r.cycles, r.steps, int(r.success), int(r.disturbed)])
    rate = float(np.mean([r.success for r in results]))
    return rows, rate


def eval_report(rc: RunConfig, bundle, episodes, variant, disturb, out):
    rows, rate = evaluate(rc, bundle, episodes, variant, disturb)
    cycles = float(np.mean([r[4] for r in rows]))
    summary = ["summary", rc.env.task, variant, "all", repr(cycles), "", repr(rate), int(disturb)]
    write_csv(out, EPISODE_COLUMNS, rows + [summary], rc.fingerprint())
    return rate


ABLATION_COLUMNS = ("policy", "variant", "length_class", "episodes", "successes", "success_rate")


def ablate_msth(rc: RunConfig, out, trajectories=None, episodes=None):
    """Train the scheduled policy and its fixed-horizon (M = 0) twin on the
    same demos with the same budget; evaluate per length class and variant."""
    if rc.env.task != "trace":
        raise RunConfigError("ablate-msth runs on the trace task (env.task = trace)")
    episodes = episodes or rc.run.episodes
    if trajectories is None:
        trajectories = simenv.generate_demos(rc.env, rc.run.n_demos, rc.run.seed)
    baseline = replace(rc.msth, M=0)
    rows, bundles = [], {}
    for name, msth in (("msth", rc.msth), ("fixed", baseline)):
        bundle, _ = train(rc, 1, trajectories, msth=msth)
        bundle, _ = train(rc, 2, trajectories, bundle)
        bundles[name] = bundle
        for variant in VARIANTS:
            for cls in simenv.LENGTH_CLASSES:
                cfg = replace(rc.env_for(variant), length_class=cls)
                seeds = eval_seeds(rc.run.seed + 1, episodes)
                res = run_episodes(bundle, cfg, seeds, max_cycles=rc.run.eval_max_cycles)
                wins = sum(r.success for r in res)
                rows.append([name, variant, cls, episodes, wins, repr(wins / episodes)])
    if out is not None:
        write_csv(out, ABLATION_COLUMNS, rows, rc.fingerprint())
    return rows, bundles


def online_improve(rc: RunConfig, bundle, rounds, out_dir, strategy=None, episodes=None, variant="ood"):
    rcfg = replace(rc.online, strategy=strategy) if strategy else rc.online
    rcfg.validate()
    episodes = episodes or rc.run.episodes
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    reports = run_improvement(rc.env_for(variant), bundle, rounds, episodes, rcfg, rc.run.seed, out_dir)
    if out_dir is not None:
        write_rounds(os.path.join(out_dir, "curve.csv"), reports, rc.fingerprint())
    return reports
