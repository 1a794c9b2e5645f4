"""Run configuration: nested dataclasses loaded from JSON with strict keys."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .controller import DistillConfig, NoiseSpec
from .errors import ConfigError
from .sim import TaskConfig

TREATMENTS = ("standard", "no_migration", "pollination")
NEIGHBORHOODS = ("von_neumann", "moore")


@dataclass(frozen=True)
class TreatmentConfig:
    treatment: str = "standard"
    generations: int = 300
    no_migration_after: int = 50
    parents_per_gen: int = 20
    evals_per_individual: int = 5
    body_vs_brain_prob: float = 0.5
    bootstrap_size: int = 20
    master_seed: int = 0

    def __post_init__(self):
        if self.treatment not in TREATMENTS:
            raise ValueError(f"treatment must be one of {TREATMENTS}")
        if not 0.0 <= self.body_vs_brain_prob <= 1.0:
            raise ValueError("body_vs_brain_prob must be in [0, 1]")
        if self.generations < 1 or self.parents_per_gen < 1 or self.evals_per_individual < 1:
            raise ValueError("generations, parents_per_gen and evals_per_individual must be >= 1")
        if self.treatment == "no_migration" and not 0 <= self.no_migration_after < self.generations:
            raise ValueError("no_migration_after must be below generations")


@dataclass(frozen=True)
class PollinationConfig:
    frequency: int = 50
    episodes_per_teacher: int = 5
    tolerance: float = 0.05
    neighborhood: str = "von_neumann"

    def __post_init__(self):
        if self.frequency < 1:
            raise ValueError("frequency must be >= 1")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        if self.episodes_per_teacher < 1:
            raise ValueError("episodes_per_teacher must be >= 1")
        if self.neighborhood not in NEIGHBORHOODS:
            raise ValueError(f"neighborhood must be one of {NEIGHBORHOODS}")


_SECTIONS = {
    "task": TaskConfig,
    "treatment": TreatmentConfig,
    "pollination": PollinationConfig,
    "distill": DistillConfig,
    "noise": NoiseSpec,
}

# keys that do not change results and are left out of the config hash
_UNHASHED = ("out_dir", "workers")


@dataclass(frozen=True)
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    treatment: TreatmentConfig = field(default_factory=TreatmentConfig)
    pollination: PollinationConfig = field(default_factory=PollinationConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    box: tuple = (5, 5)
    archive_dims: tuple = (5, 5)
    checkpoint_interval: int = 100
    out_dir: str = "runs/run"
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "box", tuple(int(v) for v in self.box))
        object.__setattr__(self, "archive_dims", tuple(int(v) for v in self.archive_dims))
        if len(self.box) != 2 or min(self.box) < 1:
            raise ValueError("box must be two positive integers [W, H]")
        if len(self.archive_dims) != 2 or min(self.archive_dims) < 1:
            raise ValueError("archive_dims must be two positive integers [D1, D2]")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                value = {k: list(v) if isinstance(v, tuple) else v
                         for k, v in dataclasses.asdict(value).items()}
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    def hash(self) -> str:
        data = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        blob = json.dumps(data, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def header(self) -> str:
        return f"qdvox {__version__} config={self.hash()}"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def override(self, section: str, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kwargs = {}
        try:
            for key, value in data.items():
                if key in _SECTIONS:
                    section_cls = _SECTIONS[key]
                    if not isinstance(value, dict):
                        raise ConfigError(f"section {key!r} must be an object")
                    allowed = {f.name for f in dataclasses.fields(section_cls)}
                    bad = sorted(set(value) - allowed)
                    if bad:
                        raise ConfigError(f"unknown keys in {key!r}: {bad}")
                    value = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
                    kwargs[key] = section_cls(**value)
                else:
                    kwargs[key] = value
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def full_scale() -> RunConfig:
    """The paper-scale setting: 10x10 box and archive, 10,000 generations."""
    return RunConfig(
        task=TaskConfig(episode_steps=500, goal_x=60.0),
        treatment=TreatmentConfig(generations=10_000, no_migration_after=100),
        pollination=PollinationConfig(frequency=500),
        box=(10, 10),
        archive_dims=(10, 10),
    )
