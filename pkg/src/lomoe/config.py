"""YAML run configuration with a closed schema.

Unknown keys anywhere are errors. A config looks like::

    profile: desk            # desk | paper-dims
    mode: task               # task | class
    seed: 0
    out: runs/demo
    model: {rank: 8}         # overrides on top of the profile
    optim: {base_lr: 0.003, warmup_epochs: 2, weight_decay: 1.0e-6}
    gating: {supervision: 1.0, provider: deterministic-hash}
    steps:
      - {task: A, classes: [1, 2], profile: cardiac, epochs: 10}
      - {task: B, classes: [3], profile: dermoscopy}

A step may point at folder datasets instead of synthesising data with
``data: {train: path, test: path}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import TaskSpec
from .errors import ConfigError
from .model import PROFILES, ModelConfig, profile_config
from .training import RunPlan, StepPlan

TOP_KEYS = {"profile", "mode", "seed", "out", "model", "optim", "gating", "steps", "warm_start",
            "support_shots", "cache_inputs", "checkpoint_every"}
OPTIM_KEYS = {"base_lr", "min_lr", "warmup_epochs", "weight_decay"}
GATING_KEYS = {"supervision", "margin_scale", "provider", "embeddings"}
STEP_KEYS = {"task", "classes", "profile", "modality", "epochs", "batch_size", "prompt", "n_train",
             "n_val", "n_test", "seed", "data"}
MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"mode", "seed"}

DEFAULT_EPOCHS = 30
DEFAULT_BATCH = 8


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    bad = sorted(set(d) - allowed)
    if bad:
        raise ConfigError(f"{where}: unknown keys {', '.join(bad)} (allowed: {', '.join(sorted(allowed))})")


@dataclass
class RunConfig:
    model: ModelConfig
    plan: RunPlan
    out: str = "runs/out"
    profile: str = "desk"
    provider: dict = field(default_factory=lambda: {"kind": "deterministic-hash"})
    data_dirs: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)


def parse_steps(items, image_size, seed, where="steps"):
    if not isinstance(items, list) or not items:
        raise ConfigError(f"{where}: need a non-empty list of steps")
    steps, dirs = [], {}
    for i, s in enumerate(items):
        _check_keys(s, STEP_KEYS, f"{where}[{i}]")
        for req in ("task", "classes"):
            if req not in s:
                raise ConfigError(f"{where}[{i}]: missing required key {req!r}")
        spec = TaskSpec(
            task_id=str(s["task"]),
            classes=tuple(s["classes"]),
            profile=s.get("profile", "cardiac"),
            modality=s.get("modality"),
            n_train=int(s.get("n_train", 200)),
            n_val=int(s.get("n_val", 0)),
            n_test=int(s.get("n_test", 50)),
            image_size=image_size,
            seed=int(s.get("seed", seed)),
        )
        if "data" in s:
            _check_keys(s["data"], {"train", "test"}, f"{where}[{i}].data")
            dirs[spec.task_id] = {k: str(v) for k, v in s["data"].items()}
        steps.append(StepPlan(spec, epochs=int(s.get("epochs", DEFAULT_EPOCHS)),
                              batch_size=int(s.get("batch_size", DEFAULT_BATCH)), prompt=s.get("prompt")))
    return steps, dirs


def plan_kwargs(raw, seed):
    optim = raw.get("optim", {}) or {}
    _check_keys(optim, OPTIM_KEYS, "optim")
    gating = raw.get("gating", {}) or {}
    _check_keys(gating, GATING_KEYS, "gating")
    kw = {k: optim[k] for k in OPTIM_KEYS if k in optim}
    if "supervision" in gating:
        kw["gate_supervision"] = float(gating["supervision"])
    if "margin_scale" in gating:
        kw["gate_margin_scale"] = float(gating["margin_scale"])
    for k in ("warm_start", "support_shots", "cache_inputs", "checkpoint_every"):
        if k in raw:
            kw[k] = raw[k]
    kw["seed"] = seed
    provider = {"kind": gating.get("provider", "deterministic-hash")}
    if "embeddings" in gating:
        provider["path"] = str(gating["embeddings"])
    return kw, provider


def from_dict(raw, seed=None, profile=None, out=None):
    """Validate a parsed config; CLI overrides win over file values."""
    _check_keys(raw, TOP_KEYS, "config")
    profile = profile or raw.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {', '.join(PROFILES)}")
    seed = int(raw.get("seed", 0) if seed is None else seed)
    mode = raw.get("mode", "task")
    overrides = raw.get("model", {}) or {}
    _check_keys(overrides, MODEL_KEYS, "model")
    model = profile_config(profile, mode=mode, seed=seed, **overrides)
    steps, dirs = parse_steps(raw.get("steps"), model.image_size, seed)
    kw, provider = plan_kwargs(raw, seed)
    plan = RunPlan(steps, mode=mode, **kw)
    return RunConfig(model, plan, out=str(out or raw.get("out", "runs/out")), profile=profile,
                     provider=provider, data_dirs=dirs, raw=raw)


def read_yaml(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return {} if raw is None else raw


def load_config(path, **overrides):
    return from_dict(read_yaml(path), **overrides)
