"""Run configuration: nested dataclasses read from and written to YAML."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import yaml

from vlinknet.critics import CriticConfig
from vlinknet.generator import GeneratorConfig
from vlinknet.losses import LossWeights


@dataclass
class PretrainConfig:
    lr: float = 5e-4  # RMSprop
    rho: float = 0.9
    steps: int = 1000


@dataclass
class AdversarialConfig:
    lr: float = 1e-4  # Adam
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 100
    steps: int | None = None  # overrides epochs when set


@dataclass
class FinetuneConfig:
    lr: float = 1e-5
    steps: int = 1000


@dataclass
class TestTimeConfig:
    enabled: bool = False
    iters: int = 50
    lr: float = 0.05
    perturbation_range: float = 1.0


@dataclass
class DataConfig:
    images: str | None = None
    masks: str | None = None
    mask_white_is_hole: bool = True


@dataclass
class LogConfig:
    loss_csv: str | None = None
    checkpoint_dir: str | None = None
    checkpoint_every: int = 0
    history: int = 256


@dataclass
class ExtractorConfig:
    kind: str = "random"  # "random" or "identity"
    seed: int = 20220318
    weights_path: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    resolution: int = 64
    batch_size: int = 5
    n_critic: int = 1
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adversarial: AdversarialConfig = field(default_factory=AdversarialConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    test_time: TestTimeConfig = field(default_factory=TestTimeConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    data: DataConfig = field(default_factory=DataConfig)
    log: LogConfig = field(default_factory=LogConfig)

    def __post_init__(self):
        # working resolution is owned here and pushed into the network configs
        self.generator.input_resolution = self.resolution
        self.critic.input_resolution = self.resolution
        self.generator.__post_init__()

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        return _build(cls, data or {})

    def with_seed(self, seed: int) -> "RunConfig":
        d = self.to_dict()
        d["seed"] = seed
        return RunConfig.from_dict(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls.__name__, name))
        kwargs[name] = _build(sub, value) if sub is not None and isinstance(value, dict) else value
    return cls(**kwargs)


_NESTED = {
    ("RunConfig", "pretrain"): PretrainConfig,
    ("RunConfig", "adversarial"): AdversarialConfig,
    ("RunConfig", "finetune"): FinetuneConfig,
    ("RunConfig", "test_time"): TestTimeConfig,
    ("RunConfig", "generator"): GeneratorConfig,
    ("RunConfig", "critic"): CriticConfig,
    ("RunConfig", "losses"): LossWeights,
    ("RunConfig", "extractor"): ExtractorConfig,
    ("RunConfig", "data"): DataConfig,
    ("RunConfig", "log"): LogConfig,
}


def load_config(path) -> RunConfig:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return RunConfig.from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def desk_config(**overrides) -> RunConfig:
    """Small CPU configuration: 32x32 images, base width 8, full-width decoder."""
    base = {"resolution": 32, "generator": {"base_channels": 8, "decoder_mults": (8, 8, 8, 8, 8)}}
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return RunConfig.from_dict(base)
