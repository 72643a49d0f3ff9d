"""JSON experiment configuration.

Every section is a frozen dataclass. Unknown keys are rejected, tuples are
written as lists and read back as tuples, so ``load(dump(cfg)) == cfg``.
Relative paths resolve against the directory holding the config file.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

from ..addt import ADDTConfig
from ..attacks import AttackConfig
from ..diffusion import PurifyConfig, Sampler, Schedule, make_linear_schedule
from ..errors import ConfigError


@dataclass(frozen=True)
class DatasetSection:
    seed: int = 1
    test_seed: int = 2
    n_train: int = 4000
    n_test: int = 512
    image_size: int = 16
    num_classes: int = 4
    style: str = "strokes"
    noise_std: float = 0.02
    amplitude: Tuple[float, float] = (0.4, 0.6)
    brightness: Tuple[float, float] = (0.05, 0.15)
    period: Tuple[float, float] = (4.0, 8.0)
    length: Tuple[float, float] = (5.0, 9.0)
    width: float = 0.6

    def generator_kwargs(self) -> dict:
        return dict(image_size=self.image_size, num_classes=self.num_classes, style=self.style,
                    noise_std=self.noise_std, amplitude=self.amplitude, brightness=self.brightness,
                    period=self.period, length=self.length, width=self.width)


@dataclass(frozen=True)
class ScheduleSection:
    T: int = 100
    beta_start: Optional[float] = None
    beta_end: Optional[float] = None

    def build(self) -> Schedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class PurifySection:
    sampler: str = "ddpm"
    t_star: Optional[int] = None     # None means round(0.1 T)
    nfe: Optional[int] = None        # None means one evaluation per timestep

    def build(self, schedule: Schedule) -> PurifyConfig:
        t_star = int(round(0.1 * schedule.T)) if self.t_star is None else self.t_star
        return PurifyConfig.make(Sampler(self.sampler), t_star, self.nfe)


@dataclass(frozen=True)
class ClassifierSection:
    hidden: int = 64
    depth: int = 2
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    noise_aug: float = 0.1


@dataclass(frozen=True)
class DiffusionSection:
    hidden: int = 256
    depth: int = 3
    time_dim: int = 16
    epochs: int = 60
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0
    loss_threshold: Optional[float] = None


@dataclass(frozen=True)
class AttackSection:
    norm: str = "linf"
    radius: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 20
    eot_samples: int = 10
    random_start: bool = False
    seed: int = 0

    def build(self, knowledge: str = "white_box", eot_samples: Optional[int] = None) -> AttackConfig:
        return AttackConfig(self.norm, self.radius, self.step_size, self.steps,
                            self.eot_samples if eot_samples is None else eot_samples,
                            knowledge, self.random_start, self.seed)


@dataclass(frozen=True)
class EvalSection:
    n_samples: int = 256
    settings: Tuple[str, ...] = ("clean", "pgd_noeot", "pgd_eot", "dw_fwd", "dw_rev", "dw_both", "dw_semi-8")
    victim_seed: int = 99
    chunk_size: int = 64
    workers: int = 1
    repeats: int = 1


@dataclass(frozen=True)
class ADDTSection:
    lambda_unit: float = 0.1
    lambda_min: float = 0.0
    lambda_max: float = 0.5
    cgpo_steps: int = 5
    perturbation_mode: str = "rbgm"
    objective: str = "classifier_ce"
    epochs: int = 20
    batch_size: int = 64
    lr: float = 5e-4
    seed: int = 0
    t_max: Optional[int] = 20        # None samples fine-tuning timesteps from the whole schedule

    def build(self) -> ADDTConfig:
        return ADDTConfig(self.lambda_unit, self.lambda_min, self.lambda_max, self.cgpo_steps,
                          self.perturbation_mode, self.objective)


@dataclass(frozen=True)
class AnalysisSection:
    eot_sweep: Tuple[int, ...] = (1, 2, 5, 10, 20)
    sweep_samples: int = 128
    sweep_steps: int = 10
    variance_ns: Tuple[int, ...] = (1, 4, 16)
    variance_repeats: int = 32
    variance_samples: int = 4
    landscape_index: int = 0
    landscape_resolution: int = 21
    landscape_extent: Optional[float] = None   # None means 1.5x the longer final perturbation
    seed: int = 0


@dataclass(frozen=True)
class PathsSection:
    classifier: str = "classifier.dbpt"
    denoiser: str = "denoiser.dbpt"
    addt_denoiser: str = "denoiser_addt.dbpt"


SECTIONS = {
    "dataset": DatasetSection, "schedule": ScheduleSection, "purify": PurifySection,
    "classifier": ClassifierSection, "diffusion": DiffusionSection, "attack": AttackSection,
    "eval": EvalSection, "addt": ADDTSection, "analysis": AnalysisSection, "paths": PathsSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    purify: PurifySection = field(default_factory=PurifySection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)
    addt: ADDTSection = field(default_factory=ADDTSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    paths: PathsSection = field(default_factory=PathsSection)
    base_dir: str = field(default=".", compare=False)

    def to_dict(self) -> dict:
        return {name: _section_to_dict(getattr(self, name)) for name in SECTIONS}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)


def _section_to_dict(sec) -> dict:
    out = {}
    for f in dataclasses.fields(sec):
        v = getattr(sec, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _section_from_dict(cls, data) -> object:
    if not isinstance(data, dict):
        raise ConfigError(f"section {cls.__name__} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys in {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        default = getattr(cls(), k)
        kwargs[k] = tuple(v) if isinstance(default, tuple) and isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {cls.__name__}: {exc}") from None


def from_dict(data: dict, base_dir: str = ".") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {name: _section_from_dict(cls, data.get(name, {})) for name, cls in SECTIONS.items()}
    cfg = ExperimentConfig(**kwargs, base_dir=str(base_dir))
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Build every derived object once so bad values fail early as ConfigError."""
    try:
        s = cfg.schedule.build()
        cfg.purify.build(s)
        cfg.attack.build()
        cfg.addt.build()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.eval.n_samples < 1 or cfg.eval.n_samples > cfg.dataset.n_test:
        raise ConfigError("eval.n_samples must lie in [1, dataset.n_test]")
    if cfg.eval.chunk_size < 1 or cfg.eval.workers < 1 or cfg.eval.repeats < 1:
        raise ConfigError("eval chunk_size, workers and repeats must be >= 1")
    if cfg.addt.t_max is not None and not 1 <= cfg.addt.t_max <= cfg.schedule.T:
        raise ConfigError("addt.t_max must lie in [1, schedule.T]")
    if min(cfg.analysis.eot_sweep, default=1) < 1:
        raise ConfigError("eot_sweep entries must be >= 1")


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return from_dict(data, base_dir=str(path.parent))


def dump(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(cfg.dumps())
