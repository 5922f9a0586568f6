"""Experiment configuration: one nested YAML file, one master seed."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from finer.ensemble import SCENARIOS
from finer.explainers import EXPLAINERS, ExplainerConfig, sub_seed
from finer.finetune import FinetuneConfig
from finer.metrics import DEFAULT_K_GRID, DEFAULT_P_GRID
from finer.net import ARCHITECTURES, TrainConfig
from finer.task import TaskSpec, TaskSpecError

SEED_LABELS = ("data", "embed", "model", "train", "finetune", "explain", "mask", "weight", "eval")


class ConfigError(ValueError):
    pass


# benchmark defaults; see README for what each knob does
DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "runs/default",
    "task": {},
    "model": {"arch": "cnn", "channels": 16, "kernel": 3, "hidden": 16},
    "train": {"lr": 0.05, "batch_size": 32, "epochs": 40, "momentum": 0.9},
    "finetune": {"lambdas": [0.5, 0.5, 0.5], "percentile": 30.0, "surrogate": "gradients",
                 "epochs": 5, "lr": 0.01, "batch_size": 32, "momentum": 0.9, "frozen": None,
                 "patience": 3, "plateau_tol": 0.01, "val_percentile": 20.0},
    "explain": {},
    "scenarios": list(SCENARIOS),
    "explainers": list(EXPLAINERS),
    "k": 3,
    "weight_k": None,
    "k_grid": list(DEFAULT_K_GRID),
    "p_grid": list(DEFAULT_P_GRID),
    "max_explain": None,
    "jobs": 1,
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key not in ("task", "explain"):
            if not isinstance(val, dict):
                raise ConfigError(f"{where} must be a mapping")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        self.validate()

    # construction -----------------------------------------------------------
    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        return cls(_merge(DEFAULTS, data))

    @classmethod
    def load(cls, path: str | Path | None) -> "ExperimentConfig":
        if path is None:
            return cls.from_dict({})
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"bad YAML in {path}: {exc}") from exc
        return cls.from_dict(data)

    def override(self, **kw) -> "ExperimentConfig":
        """Apply CLI flag overrides; ``None`` values are ignored."""
        return ExperimentConfig.from_dict({**self.raw, **{k: v for k, v in kw.items() if v is not None}})

    # checks -------------------------------------------------------------------
    def validate(self) -> None:
        r = self.raw
        try:
            self.task_spec()
            self.train_config()
            self.finetune_config()
            self.explainer_config()
        except (TypeError, ValueError, TaskSpecError) as exc:
            raise ConfigError(str(exc)) from exc
        if not isinstance(r["seed"], int) or r["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        if r["model"]["arch"] not in ARCHITECTURES:
            raise ConfigError(f"model.arch must be one of {', '.join(ARCHITECTURES)}")
        for s in r["scenarios"]:
            if s not in SCENARIOS:
                raise ConfigError(f"unknown scenario {s!r}")
        for e in r["explainers"]:
            if e not in EXPLAINERS:
                raise ConfigError(f"unknown explainer {e!r}")
        if not isinstance(r["k"], int) or r["k"] < 1:
            raise ConfigError("k must be a positive integer")
        for name in ("k_grid", "p_grid"):
            g = r[name]
            if not g or any(b <= a for a, b in zip(g, g[1:])):
                raise ConfigError(f"{name} must be non-empty and strictly increasing")
        if not isinstance(r["jobs"], int) or r["jobs"] < 1:
            raise ConfigError("jobs must be >= 1")
        if r["max_explain"] is not None and (not isinstance(r["max_explain"], int) or r["max_explain"] < 1):
            raise ConfigError("max_explain must be a positive integer or null")

    # derived pieces -------------------------------------------------------------
    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def out(self) -> Path:
        return Path(self.raw["out"])

    def seeds(self) -> dict[str, int]:
        return {label: sub_seed(self.seed, label) for label in SEED_LABELS}

    def task_spec(self) -> TaskSpec:
        s = self.seeds()
        kw = {"seed": s["data"], "embed_seed": s["embed"], **self.raw["task"]}
        for key, val in kw.items():
            if isinstance(val, list):
                kw[key] = tuple(val)
        names = {f.name for f in fields(TaskSpec)}
        bad = set(kw) - names
        if bad:
            raise ConfigError(f"unknown task keys: {', '.join(sorted(bad))}")
        return TaskSpec(**kw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seeds()["train"], **self.raw["train"])

    def finetune_config(self) -> FinetuneConfig:
        kw = dict(self.raw["finetune"])
        kw["lambdas"] = tuple(kw["lambdas"])
        if kw.get("frozen") is not None:
            kw["frozen"] = tuple(bool(v) for v in kw["frozen"])
        return FinetuneConfig(seed=self.seeds()["finetune"], **kw)

    def explainer_config(self) -> ExplainerConfig:
        names = {f.name for f in fields(ExplainerConfig)}
        bad = set(self.raw["explain"]) - names
        if bad:
            raise ConfigError(f"unknown explain keys: {', '.join(sorted(bad))}")
        return ExplainerConfig(**self.raw["explain"])

    def model_kwargs(self) -> dict:
        return {k: v for k, v in self.raw["model"].items() if k != "arch"}

    def canonical(self) -> str:
        body = {k: v for k, v in self.raw.items() if k not in ("out", "jobs")}
        # resolved values, so changed library defaults also change the hash
        body["task"] = self.task_spec().to_dict()
        body["explain"] = asdict(self.explainer_config())
        return json.dumps(body, sort_keys=True, separators=(",", ":"), default=list)

    def hash(self) -> str:
        """Short digest of everything that affects results (not the output path or job count)."""
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)
