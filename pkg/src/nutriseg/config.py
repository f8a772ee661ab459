"""Run configuration: one YAML document, every default filled in, unknown keys rejected."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .datamodel import LOSS_PROFILES, LossWeights
from .instruction_forge import ReferMixPolicy
from .model import ModelConfig
from .training import StagePlan, stage1_plan, stage2_plan


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    corpus: str = "corpus"  # directory holding manifest.json
    shards: str = "shards"  # forged conversations
    out: str = "runs"  # checkpoints, logs, reports
    init_checkpoint: str | None = None  # stage-2 starting point


@dataclass
class Optimizer:
    steps: int = 2000
    batch_size: int | None = None  # stage default when unset
    lr: float = 3e-4
    weight_decay: float = 0.0
    warmup_steps: int = 100
    grad_clip: float = 1.0
    checkpoint_every: int = 0


@dataclass
class Ratios:
    """Group ratios and per-dataset (group, weight) pairs; empty means the stage default."""

    groups: dict[str, float] = field(default_factory=dict)
    datasets: dict[str, list] = field(default_factory=dict)


@dataclass
class Forge:
    backend: str = "mock"
    retries: int = 3
    max_indices: int = 20


@dataclass
class Synth:
    per_dataset: int = 8
    ingredient_range: tuple[int, int] = (1, 5)
    image_size: int = 64
    test_fraction: float = 0.0


@dataclass
class Eval:
    split: str = "train"
    max_per_task: int = 0  # 0 means every conversation


@dataclass
class RunConfig:
    seed: int = 0
    stage: int = 1
    profile: str = "main-text-lambdas"
    paths: Paths = field(default_factory=Paths)
    optimizer: Optimizer = field(default_factory=Optimizer)
    ratios: Ratios = field(default_factory=Ratios)
    model: dict[str, Any] = field(default_factory=dict)
    loss: dict[str, float] = field(default_factory=dict)
    refer: dict[str, Any] = field(default_factory=dict)
    forge: Forge = field(default_factory=Forge)
    synth: Synth = field(default_factory=Synth)
    eval: Eval = field(default_factory=Eval)

    def loss_weights(self) -> LossWeights:
        base = LOSS_PROFILES[self.profile]
        return dataclasses.replace(base, **self.loss)

    def refer_policy(self, mask_complete: bool = True) -> ReferMixPolicy:
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in self.refer.items()}
        return ReferMixPolicy(**{"mask_complete": mask_complete, **kw})

    def model_config(self, vocab_size: int) -> ModelConfig:
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in self.model.items()}
        kw.setdefault("init_seed", self.seed)
        return ModelConfig(**{**kw, "vocab_size": vocab_size})

    def stage_plan(self) -> StagePlan:
        opt = dataclasses.asdict(self.optimizer)
        if opt["batch_size"] is None:
            del opt["batch_size"]
        plan = (stage1_plan if self.stage == 1 else stage2_plan)(**opt)
        if self.ratios.groups or self.ratios.datasets:
            plan = dataclasses.replace(
                plan,
                group_ratios=self.ratios.groups or plan.group_ratios,
                datasets={k: (v[0], float(v[1])) for k, v in self.ratios.datasets.items()} or plan.datasets,
            )
        return plan

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["synth"]["ingredient_range"] = list(d["synth"]["ingredient_range"])
        d["resolved"] = {
            "loss": dataclasses.asdict(self.loss_weights()),
            "model": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.model_config(0).to_json().items() if k != "vocab_size"},
            "refer": {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self.refer_policy()).items()},
        }
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)


_SECTIONS = {"paths": Paths, "optimizer": Optimizer, "ratios": Ratios, "forge": Forge, "synth": Synth, "eval": Eval}
_FREE_SECTIONS = {"model": ModelConfig, "loss": LossWeights, "refer": ReferMixPolicy}


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def from_dict(doc: Mapping[str, Any] | None) -> RunConfig:
    doc = dict(doc or {})
    doc.pop("resolved", None)  # allow feeding --print-config output back in
    unknown = set(doc) - _fields(RunConfig)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    kw: dict[str, Any] = {}
    for k, v in doc.items():
        if k in _SECTIONS:
            if not isinstance(v, Mapping):
                raise ConfigError(f"section {k} must be a mapping")
            bad = set(v) - _fields(_SECTIONS[k])
            if bad:
                raise ConfigError(f"unknown key(s) in {k}: {', '.join(sorted(bad))}")
            sec = dict(v)
            if k == "synth" and "ingredient_range" in sec:
                sec["ingredient_range"] = tuple(sec["ingredient_range"])
            kw[k] = _SECTIONS[k](**sec)
        elif k in _FREE_SECTIONS:
            if not isinstance(v, Mapping):
                raise ConfigError(f"section {k} must be a mapping")
            allowed = _fields(_FREE_SECTIONS[k]) - {"vocab_size"}
            bad = set(v) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in {k}: {', '.join(sorted(bad))}")
            kw[k] = dict(v)
        else:
            kw[k] = v
    cfg = RunConfig(**kw)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {cfg.stage}")
    if cfg.profile not in LOSS_PROFILES:
        raise ConfigError(f"unknown profile {cfg.profile!r}; choose from {sorted(LOSS_PROFILES)}")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if cfg.optimizer.steps < 0:
        raise ConfigError("optimizer.steps must be ≥ 0")
    try:
        cfg.loss_weights()
        cfg.refer_policy()
        cfg.model_config(1)
        cfg.stage_plan()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the YAML file, then flat command-line overrides."""
    doc: dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if loaded is not None and not isinstance(loaded, Mapping):
            raise ConfigError("config root must be a mapping")
        doc = dict(loaded or {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "steps":
            doc.setdefault("optimizer", {})["steps"] = value
        elif key == "out":
            doc.setdefault("paths", {})["out"] = value
        else:
            doc[key] = value
    return from_dict(doc)
