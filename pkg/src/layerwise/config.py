"""Training configuration, named presets and the INI-style config file.

The file format is standard ``configparser`` INI with four sections::

    [network]   layers, k, width, aux_width, final_aux_width, widths, downsample,
                downsample_kind, input_downsample, batchnorm, aux_pre_pool, class_count
    [optimizer] lr, momentum, lr_decay, lr_period, epochs_per_layer, batch_size
    [train]     augment, identity_candidate, ensemble, prune_width, prune_epochs,
                prune_criterion
    [run]       preset, dataset, data_dir, seed, cache, cache_dir, max_train, max_test

Command-line overrides use dotted keys (``network.k=3``). Precedence is
override > file > preset > defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, fields

from .errors import ConfigError

DATASET_SHAPES = {
    "cifar10": (3, 32, 32),
    "mnist": (1, 28, 28),
    "imagenet": (3, 224, 224),
}

SECTIONS = {
    "network": (
        "layers", "k", "width", "aux_width", "final_aux_width", "widths", "downsample",
        "downsample_kind", "input_downsample", "batchnorm", "aux_pre_pool", "class_count",
    ),
    "optimizer": ("lr", "momentum", "lr_decay", "lr_period", "epochs_per_layer", "batch_size"),
    "train": ("augment", "identity_candidate", "ensemble", "prune_width", "prune_epochs", "prune_criterion"),
    "run": ("preset", "dataset", "data_dir", "seed", "cache", "cache_dir", "max_train", "max_test"),
}


def dataset_shape(name):
    try:
        return DATASET_SHAPES[name]
    except KeyError:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {sorted(DATASET_SHAPES)}") from None


@dataclass(frozen=True)
class TrainConfig:
    # network
    layers: int = 5
    k: int = 1
    width: int = 256
    aux_width: int = 256
    final_aux_width: int | None = None
    widths: tuple | None = None
    downsample: tuple = (2, 3)
    downsample_kind: str = "invertible"
    input_downsample: bool = True
    batchnorm: str = "none"
    aux_pre_pool: bool = False
    class_count: int = 10
    # optimizer
    lr: float = 0.1
    momentum: float = 0.9
    lr_decay: float = 0.2
    lr_period: int = 15
    epochs_per_layer: int = 50
    batch_size: int = 128
    # training procedure
    augment: bool = True
    identity_candidate: bool = True
    ensemble: str = "prob"
    prune_width: int | None = None
    prune_epochs: int = 20
    prune_criterion: str = "taylor"
    # run
    preset: str = "custom"
    dataset: str = "cifar10"
    data_dir: str = ""
    seed: int = 0
    cache: str = "mem"
    cache_dir: str = ""
    max_train: int | None = None
    max_test: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("layers", "k", "width", "aux_width", "epochs_per_layer", "batch_size", "lr_period", "class_count"):
            value = getattr(self, name)
            if name == "epochs_per_layer":
                if value < 0:
                    raise ConfigError("epochs_per_layer must be >= 0")
            elif value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.ensemble not in ("prob", "logit"):
            raise ConfigError("ensemble must be 'prob' or 'logit'")
        if self.cache not in ("mem", "disk"):
            raise ConfigError("cache must be 'mem' or 'disk'")
        if self.prune_criterion not in ("taylor", "l1"):
            raise ConfigError("prune_criterion must be 'taylor' or 'l1'")
        if self.prune_width is not None and self.prune_width >= self.width:
            raise ConfigError("prune_width must be smaller than width")
        dataset_shape(self.dataset)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def input_shape(self):
        return dataset_shape(self.dataset)

    # -- serialization ---------------------------------------------------------------

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, keys in SECTIONS.items():
            parser[section] = {key: _format(getattr(self, key)) for key in keys}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: dict):
        return cls(**{k: _coerce(k, v) for k, v in values.items()})


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_KEY_SECTION = {key: section for section, keys in SECTIONS.items() for key in keys}


def _format(value):
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(key, raw):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(raw, list) else raw
    kind = _FIELD_TYPES[key]
    text = raw.strip()
    optional = "None" in kind
    if text == "" and (optional or kind.startswith("tuple")):
        return None if optional else ()
    try:
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
        if kind.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind.startswith("tuple"):
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
    return text


# -- presets -----------------------------------------------------------------------------------

_CIFAR = dict(dataset="cifar10", input_downsample=True, lr=0.1, lr_decay=0.2, lr_period=15,
              epochs_per_layer=50, batch_size=128, augment=True)
# desk-scale: 20 epochs/layer, decay period scaled by 20/50
_CIFAR_REDUCED = dict(_CIFAR, layers=3, width=64, aux_width=64, downsample=(), epochs_per_layer=20, lr_period=6)
_IMAGENET = dict(dataset="imagenet", input_downsample=True, lr=0.1, lr_decay=0.1, lr_period=20,
                 epochs_per_layer=45, batch_size=256, class_count=1000)

PRESETS = {
    "cifar-k1": dict(_CIFAR, layers=5, k=1, width=256, downsample=(2, 3), batchnorm="none"),
    "cifar-k2": dict(_CIFAR, layers=4, k=2, width=128, aux_width=256, downsample=(2,), batchnorm="both"),
    "cifar-k3": dict(_CIFAR, layers=4, k=3, width=128, aux_width=256, downsample=(2,), batchnorm="both"),
    "cifar-k3-prune": dict(_CIFAR, layers=3, k=3, width=128, aux_width=128, final_aux_width=64, downsample=(),
                           batchnorm="both", prune_width=64, prune_epochs=20),
    "cifar-k1-reduced": dict(_CIFAR_REDUCED, k=1, batchnorm="none"),
    "cifar-k2-reduced": dict(_CIFAR_REDUCED, k=2, batchnorm="both"),
    "cifar-k3-reduced": dict(_CIFAR_REDUCED, k=3, batchnorm="both"),
    "cifar-k3-prune-reduced": dict(_CIFAR_REDUCED, k=3, batchnorm="both", prune_width=32, prune_epochs=10),
    "mnist-k1-reduced": dict(dataset="mnist", layers=3, k=1, width=32, aux_width=32, downsample=(),
                             input_downsample=True, batchnorm="none", augment=False,
                             lr=0.05, lr_decay=0.2, lr_period=4, epochs_per_layer=5, batch_size=64),
    "imagenet-k1": dict(_IMAGENET, layers=8, k=1, width=256, downsample=(2, 3, 4, 6), batchnorm="none"),
    "imagenet-k23": dict(_IMAGENET, layers=8, k=3, width=128, aux_width=256, final_aux_width=2048,
                         downsample=(2, 4, 6), batchnorm="both"),
    "vgg11-k3": dict(_IMAGENET, layers=8, k=3, width=64, aux_width=256,
                     widths=(64, 128, 256, 256, 512, 512, 512, 512), downsample=(1, 2, 4, 6),
                     downsample_kind="max", input_downsample=False, aux_pre_pool=True, batchnorm="both"),
}


def from_preset(name, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    values = dict(PRESETS[name], preset=name)
    values.update(overrides)
    return TrainConfig.from_dict(values)


def parse_ini(text) -> dict:
    """Flat ``{key: raw_string}`` mapping from config text; unknown keys rejected."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser[section].items():
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = raw
    return values


def parse_overrides(items) -> dict:
    """``["network.k=3", ...]`` to ``{"k": "3", ...}``."""
    values = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, key = key.split(".", 1)
            if _KEY_SECTION.get(key) != section:
                raise ConfigError(f"unknown config key {section}.{key}")
        elif key not in _KEY_SECTION:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = raw
    return values


def load_config(preset=None, config_text=None, overrides=None) -> TrainConfig:
    values = {}
    file_values = parse_ini(config_text) if config_text else {}
    name = preset or file_values.get("preset", "").strip() or None
    if name and name != "custom":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
        values.update(PRESETS[name])
        values["preset"] = name
    values.update(file_values)
    values.update(overrides or {})
    if name and name != "custom":
        values["preset"] = name
    return TrainConfig.from_dict(values)
