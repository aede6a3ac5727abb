"""Run configuration documents: strict JSON <-> dataclasses, plus named presets."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .envs import ENV_REGISTRY
from .errors import ConfigError
from .evaluate import EvalConfig
from .iql import IqlConfig
from .policy import VcsConfig


@dataclass(frozen=True)
class ProbeConfig:
    """Settings for the OMRR, profile and spread probes."""

    bins: int = 25  # action bins per dimension
    n_pairs: int = 60
    state_bins: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.bins < 2 or self.n_pairs < 1 or self.state_bins < 1:
            raise ConfigError("bins >= 2, n_pairs >= 1 and state_bins >= 1 are required")


_SECTIONS = {"iql": IqlConfig, "vcs": VcsConfig, "eval": EvalConfig, "probe": ProbeConfig}


@dataclass(frozen=True)
class RunConfig:
    env: str = "reach2d"
    seeds: tuple[int, ...] = (0,)
    output_dir: str | None = None
    iql: IqlConfig = field(default_factory=IqlConfig)
    vcs: VcsConfig = field(default_factory=VcsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        if self.env not in ENV_REGISTRY:
            raise ConfigError(f"unknown environment {self.env!r}; known: {sorted(ENV_REGISTRY)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.eval.checkpoint_interval != self.vcs.checkpoint_every:
            raise ConfigError("eval.checkpoint_interval must equal vcs.checkpoint_every")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        _check_keys(doc, cls, "")
        kw = {k: v for k, v in doc.items() if k not in _SECTIONS}
        for name, section in _SECTIONS.items():
            if name in doc:
                sub = doc[name]
                if not isinstance(sub, dict):
                    raise ConfigError(f"section {name!r} must be a JSON object")
                _check_keys(sub, section, name + ".")
                try:
                    kw[name] = section(**sub)
                except TypeError as exc:
                    raise ConfigError(f"bad value in section {name!r}: {exc}") from exc
        return cls(**kw)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self,
            seeds=(seed,),
            iql=dataclasses.replace(self.iql, seed=seed),
            vcs=dataclasses.replace(self.vcs, seed=seed),
            eval=dataclasses.replace(self.eval, seed=seed),
        )


def _check_keys(doc: dict, cls, prefix: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(prefix + k for k in unknown)}")


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return RunConfig.from_dict(doc)


# Desk-scale settings that the acceptance suite and the demo rely on.
PRESETS: dict[str, dict] = {
    "stitch-grid": {
        "env": "stitch-grid",
        "iql": {"expectile": 0.99, "gamma": 1.0, "lr": 1e-3, "batch_size": 32, "steps": 10000, "hidden": [32, 32]},
        "vcs": {"K": 1, "lam": 10.0, "steps": 2000, "lr": 1e-3, "warmup": 100, "batch_size": 16,
                "hidden": [32, 32], "weight_decay": 0.0, "multipliers": [1.0], "checkpoint_every": 200},
        "eval": {"episodes_per_checkpoint": 1, "checkpoint_interval": 200, "multipliers": [1.0]},
    },
    "reach2d": {
        "env": "reach2d",
        "iql": {"steps": 3000, "lr": 1e-3},
        "vcs": {"K": 1, "lam": 1.0, "steps": 2000, "lr": 1e-3, "warmup": 100, "batch_size": 64,
                "rtg_scale": 10.0, "multipliers": [1.0, 0.5], "checkpoint_every": 200},
        "eval": {"checkpoint_interval": 200, "multipliers": [1.0, 0.5]},
    },
}


def preset(name: str) -> RunConfig:
    try:
        return RunConfig.from_dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None
