"""Run configuration: flat ``key = value`` pairs grouped in INI sections.

Example::

    [world]
    mode = labeled_mixture
    num_labels = 4
    label_noise = 0.3

    [schedule]
    T = 200
    beta_end = 0.05

Unknown sections or keys are rejected. Empty values mean "use the
default". ``RunConfig.to_ini()`` writes every key back, so a snapshot
alone reproduces a run.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .denoiser import MlpDenoiser, TrainConfig
from .gaussian_world import GaussianWorld, ring_means
from .pipeline import PipelineConfig
from .sampler import SamplerConfig, task_seed
from .schedule import ScheduleError, build_schedule


class ConfigError(ValueError):
    pass


@dataclass
class WorldSection:
    mode: str = "labeled_mixture"
    dim: int = 2
    num_labels: int = 4
    radius: float = 2.0
    data_sigma: float = 0.3
    label_noise: float = 0.3
    rho: float = 0.5


@dataclass
class ScheduleSection:
    T: int = 200
    beta_start: float = 5e-4
    beta_end: float = 0.05
    kind: str = "linear"


@dataclass
class DenoiserSection:
    hidden: tuple = (64, 64)
    time_dim: int = 16
    cond_dim: int = 8


@dataclass
class TrainSection:
    lr: float = 1e-3
    batch_size: int = 256
    iterations: int = 3000
    p_drop: float = 0.1
    t_lo: int = 1
    t_hi: int | None = None
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    adam_eps: float = 1e-8


@dataclass
class FinetuneSection(TrainSection):
    batch_size: int = 64
    iterations: int = 300
    t_lo: int | None = None  # None means T // 2


@dataclass
class AdapterSection:
    rank: int = 4
    scale: float = 4.0
    variant: str = "magnitude_normalized"
    layers: tuple | None = None


@dataclass
class SamplerSection:
    guidance: float = 2.0


@dataclass
class PipelineSection:
    M: int = 50
    k: int = 1
    rounds: int = 1
    prompts_per_label: int = 64
    real_mix_fraction: float = 0.0
    eval_per_label: int = 1000
    eval_guidance: float = 1.0
    score_guided: bool = False


@dataclass
class MiSection:
    n_per_label: int = 200
    n_mc: int = 16
    guidance: float = 1.0


@dataclass
class AgreementSection:
    n_prompts: int = 100
    M: int = 50
    guidance: float = 1.0


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 1


SECTIONS = {
    "world": WorldSection, "schedule": ScheduleSection, "denoiser": DenoiserSection,
    "train": TrainSection, "finetune": FinetuneSection, "adapter": AdapterSection,
    "sampler": SamplerSection, "pipeline": PipelineSection, "mi": MiSection,
    "agreement": AgreementSection, "run": RunSection,
}


def _parse_value(raw: str, default, name: str):
    raw = raw.strip()
    if raw == "" or raw.lower() == "none":
        return None
    kind = type(default)
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple) or default is None and name in ("hidden", "layers"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if isinstance(default, int) or default is None:
            return int(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def _format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunConfig:
    world: WorldSection = field(default_factory=WorldSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    train: TrainSection = field(default_factory=TrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    adapter: AdapterSection = field(default_factory=AdapterSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    mi: MiSection = field(default_factory=MiSection)
    agreement: AgreementSection = field(default_factory=AgreementSection)
    run: RunSection = field(default_factory=RunSection)

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> RunConfig:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as e:
            raise ConfigError(f"{source}: {e}") from None
        cfg = cls()
        for name in parser.sections():
            if name not in SECTIONS:
                raise ConfigError(f"{source}: unknown section [{name}]")
            section = getattr(cfg, name)
            known = {f.name: f for f in fields(section)}
            for key, raw in parser.items(name):
                if key not in known:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
                default = known[key].default
                setattr(section, key, _parse_value(raw, default, key))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(), str(path))

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for f in fields(getattr(self, name)):
                lines.append(f"{f.name} = {_format_value(getattr(getattr(self, name), f.name))}")
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, seed: int | None = None, threads: int | None = None) -> RunConfig:
        cfg = dataclasses.replace(self, run=dataclasses.replace(self.run))
        if seed is not None:
            cfg.run.seed = seed
        if threads is not None:
            cfg.run.threads = threads
        return cfg

    # builders -----------------------------------------------------------

    def build_schedule(self):
        sc = self.schedule
        try:
            return build_schedule(sc.T, sc.beta_start, sc.beta_end, sc.kind)
        except ScheduleError as e:
            raise ConfigError(f"[schedule] {e}") from None

    def build_world(self) -> GaussianWorld:
        w = self.world
        try:
            if w.mode == "correlated_gaussian":
                return GaussianWorld.correlated(w.dim, w.rho)
            if w.mode != "labeled_mixture":
                raise ValueError(f"unknown world mode {w.mode!r}")
            return GaussianWorld.mixture(ring_means(w.num_labels, w.dim, w.radius),
                                         w.data_sigma, w.label_noise)
        except ValueError as e:
            raise ConfigError(f"[world] {e}") from None

    def build_net(self) -> MlpDenoiser:
        d = self.denoiser
        return MlpDenoiser(self.world.dim, self.world.num_labels, d.hidden, d.time_dim,
                           d.cond_dim, seed=task_seed(self.run.seed, 1))

    def train_config(self) -> TrainConfig:
        return _train_config(self.train, self.schedule.T, task_seed(self.run.seed, 2))

    def finetune_config(self) -> TrainConfig:
        return _train_config(self.finetune, self.schedule.T, 0)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.sampler.guidance, task_seed(self.run.seed, 3))

    def pipeline_config(self) -> PipelineConfig:
        p, a = self.pipeline, self.adapter
        prompts = list(range(self.world.num_labels)) * p.prompts_per_label
        return PipelineConfig(
            prompts=prompts, M=p.M, k=p.k, rounds=p.rounds,
            real_mix_fraction=p.real_mix_fraction, finetune=self.finetune_config(),
            sampler=self.sampler_config(), adapter_rank=a.rank, adapter_scale=a.scale,
            adapter_variant=a.variant, adapter_layers=None if a.layers is None else list(a.layers),
            score_guided=p.score_guided, eval_per_label=p.eval_per_label,
            eval_guidance=p.eval_guidance, seed=task_seed(self.run.seed, 4),
            threads=self.run.threads)

    def validate(self) -> None:
        s = self.build_schedule()
        self.build_world()
        try:
            self.train_config().validate(s.T)
            self.finetune_config().validate(s.T)
            if self.world.mode == "labeled_mixture":
                self.pipeline_config().validate()
            if self.adapter.variant not in ("plain", "magnitude_normalized"):
                raise ValueError(f"unknown adapter variant {self.adapter.variant!r}")
            if self.pipeline.prompts_per_label < 1:
                raise ValueError("prompts_per_label must be >= 1")
        except ValueError as e:
            raise ConfigError(str(e)) from None


def _train_config(sec: TrainSection, T: int, seed: int) -> TrainConfig:
    t_lo = sec.t_lo if sec.t_lo is not None else max(1, T // 2)
    return TrainConfig(lr=sec.lr, batch_size=sec.batch_size, iterations=sec.iterations,
                       p_drop=sec.p_drop, t_lo=t_lo, t_hi=sec.t_hi, grad_clip=sec.grad_clip,
                       beta1=sec.beta1, beta2=sec.beta2, weight_decay=sec.weight_decay,
                       adam_eps=sec.adam_eps, seed=seed)
