"""Configuration dataclasses, dataset presets and the flat ``key = value`` file format.

Keys in a config file are ``<section>.<field>`` with sections ``model``,
``train``, ``policy`` and ``data``; anything else is rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    glimpse_size: int = 8
    stride: int = 4
    num_classes: int = 10
    feature_dim: int = 64
    hidden_dim: int = 128
    latent_dim: int = 32
    glimpse_channels: int = 32
    decoder_channels: int = 32
    n_s: int = 4
    posterior: str = "flows"
    dropout: float = 0.5
    slope: float = 0.01

    def __post_init__(self):
        if (self.image_size - self.glimpse_size) % self.stride:
            raise ValueError("glimpse grid does not tile the image")
        if self.glimpse_size < 4 or self.glimpse_size % 2:
            raise ValueError("glimpse size must be even and at least 4")
        if self.posterior not in ("flows", "gaussian"):
            raise ValueError(f"unknown posterior {self.posterior!r}")
        if self.grid_side % 2 == 0:
            raise ValueError("decoder needs an odd grid side")

    @property
    def n_g(self) -> int:
        # k=3 valid convs shrink by 2 each, the final k=2 conv takes 2x2 to 1x1
        return (self.glimpse_size - 2) // 2

    @property
    def grid_side(self) -> int:
        return (self.image_size - self.glimpse_size) // self.stride + 1

    @property
    def flow_layers(self) -> int:
        return self.n_s if self.posterior == "flows" else 0


# Benchmark-scale dimensionalities; the desk preset is the CPU-sized configuration.
PRESETS = {
    "svhn": dict(feature_dim=128, hidden_dim=512, latent_dim=256, n_s=4, glimpse_channels=128,
                 decoder_channels=128),
    "cinic10": dict(feature_dim=128, hidden_dim=512, latent_dim=256, n_s=4, glimpse_channels=128,
                    decoder_channels=128),
    "cifar10": dict(feature_dim=128, hidden_dim=512, latent_dim=256, n_s=4, glimpse_channels=128,
                    decoder_channels=128),
    "cifar100": dict(feature_dim=512, hidden_dim=2048, latent_dim=1024, n_s=6, num_classes=100,
                     glimpse_channels=256, decoder_channels=256),
    "tinyimagenet": dict(image_size=64, glimpse_size=16, stride=8, feature_dim=512, hidden_dim=2048,
                         latent_dim=1024, n_s=6, num_classes=200, glimpse_channels=256,
                         decoder_channels=256),
    "desk": dict(),
}

# CE weights per dataset; custom datasets are free to choose.
BETA = {"svhn": 32.0, "cinic10": 16.0, "cifar10": 16.0, "cifar100": 8.0, "tinyimagenet": 8.0}


def model_preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


@dataclass
class TrainConfig:
    dataset: str = "desk"
    epochs1: int = 12
    epochs2: int = 12
    epochs3: int = 8
    batch_size: int = 64
    alpha: float = 0.0
    beta: float = 16.0
    lr1: float = 1e-3
    lr2: float = 1e-3
    lr3: float = 1e-3
    T: int = 7
    train_P: int = 1
    augment_crop: bool = False
    augment_scale: bool = False
    augment_flip: bool = False
    augment_jitter: bool = False
    early_stop_patience: int = 10
    target_mode: str = "live"
    nll_reduction: str = "sum"
    seed: int = 0
    max_batches: int = 0

    def __post_init__(self):
        if self.target_mode not in ("live", "frozen"):
            raise ValueError("target_mode must be 'live' or 'frozen'")
        if self.nll_reduction not in ("sum", "mean"):
            raise ValueError("nll_reduction must be 'sum' or 'mean'")

    def alpha_for(self, latent_dim: int) -> float:
        """PVAE weight; 0 means the default 1/dim(z)."""
        return self.alpha if self.alpha > 0 else 1.0 / latent_dim

    def lr_for(self, phase: int) -> float:
        return {1: self.lr1, 2: self.lr2, 3: self.lr3}[phase]

    @property
    def any_augment(self) -> bool:
        return self.augment_crop or self.augment_scale or self.augment_flip or self.augment_jitter


def benchmark_train_config(dataset: str, **overrides) -> TrainConfig:
    """Loss weights and learning rates as reported for the five benchmark datasets."""
    small_lr = dataset in ("cifar100", "tinyimagenet")
    base = dict(dataset=dataset, beta=BETA[dataset], lr1=1e-3,
                lr2=1e-4 if small_lr else 1e-3, lr3=1e-4 if small_lr else 1e-3,
                augment_crop=True, augment_scale=True, augment_flip=True, augment_jitter=True)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class PolicyConfig:
    P: int = 20
    T: int = 7
    kl_epsilon: float = 1e-12

    def __post_init__(self):
        if self.P < 1 or self.T < 1:
            raise ValueError("P and T must be at least 1")


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    path: str = ""
    image_size: int = 32
    channels: int = 3
    num_classes: int = 10
    n_train: int = 10000
    n_val: int = 1000
    n_test: int = 1000
    seed: int = 0
    checksum: str = ""

    def __post_init__(self):
        if self.source not in ("synthetic", "idx", "cifar", "imagedir"):
            raise ValueError(f"unknown dataset source {self.source!r}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)


class ConfigError(ValueError):
    pass


def _coerce(raw: str, typ):
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    values: dict[str, dict[str, str]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        values.setdefault(section, {})[name] = raw
    base = base or RunConfig()
    sections = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    updated = {}
    for section, items in values.items():
        if section not in sections:
            raise ConfigError(f"unknown config section {section!r}")
        obj = sections[section]
        types = {f.name: f.type for f in dataclasses.fields(obj)}
        unknown = sorted(set(items) - set(types))
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {unknown}")
        kwargs = {k: _coerce(v, types[k]) for k, v in items.items()}
        updated[section] = dataclasses.replace(obj, **kwargs)
    return dataclasses.replace(base, **updated)


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def format_config(cfg: RunConfig) -> str:
    lines = []
    for section in dataclasses.fields(cfg):
        obj = getattr(cfg, section.name)
        for f in dataclasses.fields(obj):
            lines.append(f"{section.name}.{f.name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"
