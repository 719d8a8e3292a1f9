"""Run configuration: one JSON file with fixed sections, unknown keys rejected."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .architecture import SplitFlowConfig
from .energy import ToyForceField
from .evaluation import EvaluationConfig
from .geometry import ReferenceGeometry, Topology
from .io import load_forcefield, load_topology
from .systems import toy_chain
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_frames: int = 10_000
    burn_in: int = 50_000
    thin: int = 10
    chains: int = 64
    step_size: float = 0.02
    seed: int = 0


@dataclass
class SystemConfig:
    """Built-in toy system used instead of topology and force-field files."""

    kind: str = "toy_chain"
    n_residues: int = 8


@dataclass
class RunConfig:
    system: SystemConfig | None = None
    topology: str | None = None
    forcefield: str | None = None
    temperature: float = 300.0
    dataset: str | None = None
    output: str = "run"
    data: DataConfig = field(default_factory=DataConfig)
    architecture: SplitFlowConfig = field(default_factory=SplitFlowConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    heldout_fraction: float = 0.2
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def dataset_path(self) -> Path:
        """The configured dataset, or data.bgic in the output directory."""
        return self.resolve(self.dataset) if self.dataset else self.resolve(self.output) / "data.bgic"

    def to_json(self) -> dict:
        return {
            "system": asdict(self.system) if self.system else None,
            "topology": self.topology,
            "forcefield": self.forcefield,
            "temperature": self.temperature,
            "dataset": self.dataset,
            "output": self.output,
            "data": asdict(self.data),
            "architecture": self.architecture.to_json(),
            "training": self.training.to_json(),
            "evaluation": self.evaluation.to_json(),
            "heldout_fraction": self.heldout_fraction,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    def validate(self, need_dataset: bool = False) -> None:
        if self.system is None and (self.topology is None or self.forcefield is None):
            raise ConfigError("give either a built-in system or topology and forcefield paths")
        if self.system is not None and self.system.kind != "toy_chain":
            raise ConfigError(f"unknown system kind {self.system.kind!r}")
        if self.system is not None and self.system.n_residues < 1:
            raise ConfigError("n_residues must be positive")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ConfigError("heldout_fraction must lie in (0, 1)")
        for name in ("topology", "forcefield"):
            p = self.resolve(getattr(self, name))
            if p is not None and not p.exists():
                raise ConfigError(f"{name} file {p} does not exist")
        if need_dataset:
            p = self.dataset_path()
            if not p.exists():
                raise ConfigError(f"dataset file {p} does not exist; run generate-data first")
        try:
            self.architecture.validate()
            self.training.validate()
            self.evaluation.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def build_system(self) -> tuple[Topology, ReferenceGeometry, ToyForceField]:
        if self.system is not None:
            s = toy_chain(self.system.n_residues, self.temperature)
            return s.topology, s.reference, s.forcefield
        topo, ref = load_topology(self.resolve(self.topology))
        if ref is None:
            raise ConfigError("topology file needs a reference geometry section")
        return topo, ref, load_forcefield(self.resolve(self.forcefield))


def _strict(cls, d: dict, section: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    return cls(**d)


def config_from_json(d: dict, base_dir: Path | str = ".") -> RunConfig:
    d = dict(d)
    allowed = set(RunConfig.__dataclass_fields__) - {"base_dir"}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    try:
        system = _strict(SystemConfig, d.pop("system"), "system") if d.get("system") else None
        d.pop("system", None)
        data = _strict(DataConfig, d.pop("data", {}), "data")
        arch = SplitFlowConfig.from_json(d.pop("architecture", {}))
        train = TrainConfig.from_json(d.pop("training", {}))
        ev = _strict(EvaluationConfig, d.pop("evaluation", {}), "evaluation")
    except (KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(system=system, data=data, architecture=arch, training=train, evaluation=ev,
                     base_dir=Path(base_dir), **d)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_json(d, path.parent)


def desk_config(n_residues: int = 8) -> RunConfig:
    """Defaults used by the demos and acceptance runs."""
    return RunConfig(system=SystemConfig("toy_chain", n_residues))
