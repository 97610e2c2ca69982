"""Experiment configuration: a sectioned key-value text file.

Example::

    [experiment]
    seed = 0
    repetitions = 5
    k = 10
    strategy = on_demand

    [client.0]
    brightness_shift = 0.2
    rotation_deg = 12

Every ``[client.N]`` section adds one client with its own target domain.
Overrides use ``section.key=value`` strings.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields, replace

from ..data import DomainConfig
from ..errors import ConfigError
from ..federation.server import STRATEGIES

TRANSPORTS = ("in_process", "socket")
DEFAULT_TARGET = DomainConfig(brightness_shift=0.2, contrast_scale=0.7, noise_std=0.06, rotation_deg=12.0, seed=7)
DEFAULT_SOURCE = DomainConfig(noise_std=0.03, seed=3)


@dataclass
class ExperimentConfig:
    seed: int = 0
    repetitions: int = 5
    k: int = 10
    k_values: tuple[int, ...] = (0, 3, 5, 10)
    class_subset: int = 10
    redraw_support: bool = True
    strategy: str = "on_demand"
    sampling_enabled: bool = False
    upstream: bool = True
    transport: str = "in_process"
    rounds: int = 1
    host: str = "127.0.0.1"
    port: int = 0
    out_dir: str = "runs"

    image_size: int = 16
    n_classes: int = 10
    hidden: tuple[int, ...] = (128,)
    embed_dim: int = 32
    linear_std: float = 0.01
    bn_momentum: float = 0.1

    server_lr: float = 0.01
    server_batch: int = 128
    server_epochs: int = 150
    momentum: float = 0.9
    weight_decay: float = 1e-3
    label_smoothing: float = 0.1
    patience: int | None = None

    client_lr: float = 0.1
    client_batch: int = 32
    client_epochs: int = 200
    sampler_budget: float = 0.3

    source_per_class: int = 60
    target_per_class: int = 60
    test_fraction: float = 0.5

    source: DomainConfig = DEFAULT_SOURCE
    targets: tuple[DomainConfig, ...] = (DEFAULT_TARGET,)

    @property
    def in_dim(self) -> int:
        return self.image_size * self.image_size

    def validate(self) -> "ExperimentConfig":
        bad = []
        if self.strategy not in STRATEGIES:
            bad.append("experiment.strategy")
        if self.transport not in TRANSPORTS:
            bad.append("experiment.transport")
        if self.repetitions < 1:
            bad.append("experiment.repetitions")
        if self.k < 0 or any(k < 0 for k in self.k_values):
            bad.append("experiment.k")
        if not 1 <= self.class_subset <= self.n_classes:
            bad.append("experiment.class_subset")
        if self.rounds < 1:
            bad.append("experiment.rounds")
        if self.n_classes < 1:
            bad.append("model.n_classes")
        if self.embed_dim < 1 or any(h < 1 for h in self.hidden):
            bad.append("model.embed_dim")
        for key in ("server_lr", "client_lr"):
            if getattr(self, key) <= 0:
                bad.append(_location(key))
        if not 0 <= self.momentum < 1:
            bad.append("optim.momentum")
        if not 0 <= self.label_smoothing < 1:
            bad.append("optim.label_smoothing")
        if not 0 < self.sampler_budget <= 1:
            bad.append("client.sampler_budget")
        if not 0 < self.test_fraction < 1:
            bad.append("data.test_fraction")
        if not self.targets:
            bad.append("client.N")
        if bad:
            raise ConfigError("invalid configuration keys: " + ", ".join(bad))
        return self


# section -> keys; field names are unique across sections
SECTIONS = {
    "experiment": ("seed", "repetitions", "k", "k_values", "class_subset", "redraw_support", "strategy",
                   "sampling_enabled", "upstream", "transport", "rounds", "host", "port", "out_dir"),
    "model": ("image_size", "n_classes", "hidden", "embed_dim", "linear_std", "bn_momentum"),
    "server": ("server_lr", "server_batch", "server_epochs"),
    "optim": ("momentum", "weight_decay", "label_smoothing", "patience"),
    "client": ("client_lr", "client_batch", "client_epochs", "sampler_budget"),
    "data": ("source_per_class", "target_per_class", "test_fraction"),
}
ALIASES = {"server": {"lr": "server_lr", "batch_size": "server_batch", "epochs": "server_epochs"},
           "client": {"lr": "client_lr", "batch_size": "client_batch", "epochs": "client_epochs"}}
DOMAIN_KEYS = tuple(f.name for f in fields(DomainConfig))


def _location(name: str) -> str:
    for section, keys in SECTIONS.items():
        if name in keys:
            return f"{section}.{name}"
    return name


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    if name == "patience":
        return None if raw.lower() in ("", "none", "off") else int(raw)
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _domain(section, base: DomainConfig, bad: list, label: str) -> DomainConfig:
    values = {}
    for key, raw in section.items():
        if key not in DOMAIN_KEYS:
            bad.append(f"{label}.{key}")
            continue
        try:
            values[key] = int(raw) if key == "seed" else float(raw)
        except ValueError:
            bad.append(f"{label}.{key}")
    return replace(base, **values)


def parse_config(text: str, overrides=()) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
        for item in overrides:
            key, _, value = item.partition("=")
            section, dot, name = key.strip().rpartition(".")
            if not section or not dot:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, name, value)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable configuration: {exc}") from exc

    cfg = ExperimentConfig()
    defaults = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    values, bad = {}, []
    clients = {}
    for section in parser.sections():
        if section == "source":
            values["source"] = _domain(parser[section], DEFAULT_SOURCE, bad, section)
            continue
        if section.startswith("client."):
            try:
                clients[int(section.split(".", 1)[1])] = _domain(parser[section], DEFAULT_TARGET, bad, section)
            except ValueError:
                bad.append(section)
            continue
        if section not in SECTIONS:
            bad.append(section)
            continue
        for key, raw in parser[section].items():
            name = ALIASES.get(section, {}).get(key, key)
            if name not in SECTIONS[section]:
                bad.append(f"{section}.{key}")
                continue
            try:
                values[name] = _parse_value(name, raw, defaults[name])
            except ValueError:
                bad.append(f"{section}.{key}")
    if bad:
        raise ConfigError("invalid configuration keys: " + ", ".join(bad))
    if clients:
        values["targets"] = tuple(clients[i] for i in sorted(clients))
    return replace(cfg, **values).validate()


def load_config(path, overrides=()) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    """Inverse of ``parse_config`` for every field."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, keys in SECTIONS.items():
        parser.add_section(section)
        for key in keys:
            v = getattr(cfg, key)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            parser.set(section, key, "none" if v is None else str(v))

    def put(name, dom):
        parser.add_section(name)
        for key in DOMAIN_KEYS:
            parser.set(name, key, repr(getattr(dom, key)))

    put("source", cfg.source)
    for i, t in enumerate(cfg.targets):
        put(f"client.{i}", t)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
