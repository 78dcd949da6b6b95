"""Pipeline configuration: one JSON document with a nested section per stage."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .diffusion import DiffusionConfig
from .envs import ENV_IDS, EnvConfig
from .errors import ConfigurationError
from .evaluation import POLICY_KINDS, evaluation_seeds
from .ppo import EVAL_SEED_BASE, PPOConfig
from .trajstore import MIN_SUCCESS_EPISODES


def _section(cls, name: str, d: dict | None):
    d = dict(d or {})
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigurationError(f"unknown {name} config keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigurationError(f"bad {name} config: {exc}") from None


@dataclass
class HarvestConfig:
    # any unset rule is ignored; at least one must be set
    episodes: int | None = None
    success_target: int | None = 1000
    max_env_steps: int | None = 100_000
    min_success_warning: int = MIN_SUCCESS_EPISODES
    tee: bool = False

    def __post_init__(self):
        if self.episodes is None and self.success_target is None and self.max_env_steps is None:
            raise ConfigurationError("harvest needs episodes, success_target or max_env_steps")
        for name in ("episodes", "success_target", "max_env_steps"):
            v = getattr(self, name)
            if v is not None and int(v) < 1:
                raise ConfigurationError(f"harvest.{name} must be >= 1")


@dataclass
class EvaluationConfig:
    episodes: int = 200
    seed_offset: int = 0
    seeds: list[int] | None = None
    policies: list[str] = field(default_factory=lambda: list(POLICY_KINDS))

    def __post_init__(self):
        if self.seeds is not None:
            self.seeds = [int(s) for s in self.seeds]
            if not self.seeds:
                raise ConfigurationError("evaluation.seeds must not be empty")
        elif self.episodes < 1:
            raise ConfigurationError("evaluation.episodes must be >= 1")
        if self.seed_offset < 0:
            raise ConfigurationError("evaluation.seed_offset must be >= 0")
        bad = [p for p in self.policies if p not in POLICY_KINDS]
        if bad or not self.policies:
            raise ConfigurationError(f"evaluation.policies must be drawn from {POLICY_KINDS}, got {bad}")

    def episode_seeds(self) -> list[int]:
        return list(self.seeds) if self.seeds is not None else evaluation_seeds(self.episodes, self.seed_offset)


@dataclass
class PipelineConfig:
    env_id: str = "ReachServe-v0"
    seed: int = 0
    out_dir: str = "runs"
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    harvest: HarvestConfig = field(default_factory=HarvestConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.env_id not in ENV_IDS:
            raise ConfigurationError(f"unknown env_id {self.env_id!r}; expected one of {sorted(ENV_IDS)}")
        if not 0 <= int(self.seed) < EVAL_SEED_BASE:
            raise ConfigurationError(f"seed must be in [0, 2**62), got {self.seed}")
        # training and harvest episodes draw seeds below EVAL_SEED_BASE
        overlap = [s for s in self.evaluation.episode_seeds() if s < EVAL_SEED_BASE]
        if overlap:
            raise ConfigurationError(
                f"evaluation seeds must be >= 2**62 to stay disjoint from training seeds; got {overlap[:3]}")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigurationError("config must be a JSON object")
        d = dict(d)
        nested = {
            "env": EnvConfig.from_dict,
            "ppo": PPOConfig.from_dict,
            "diffusion": DiffusionConfig.from_dict,
            "harvest": lambda s: _section(HarvestConfig, "harvest", s),
            "evaluation": lambda s: _section(EvaluationConfig, "evaluation", s),
        }
        for key, parse in nested.items():
            try:
                d[key] = parse(d.get(key))
            except TypeError as exc:
                raise ConfigurationError(f"bad {key} config: {exc}") from None
        return _section(cls, "top-level", d)

    def to_dict(self) -> dict:
        return {
            "env_id": self.env_id,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "env": self.env.to_dict(),
            "ppo": self.ppo.to_dict(),
            "diffusion": self.diffusion.to_dict(),
            "harvest": asdict(self.harvest),
            "evaluation": asdict(self.evaluation),
        }


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
    return PipelineConfig.from_dict(doc)
