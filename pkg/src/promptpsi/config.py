"""Run configuration: a sectioned key=value file merged with command-line overrides.

Example::

    [run]
    seed = 0

    [system]
    rows = 16
    cols = 16

    [grid]
    crs = 0.125, 0.25, 0.5
    snrs = 10, 15
    channels = LoS, NLoS

Unknown sections or keys are rejected so typos fail loudly.
"""
import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .codec import CodecConfig
from .irs import SystemConfig, parse_channel_type
from .prompts import TaskDescriptor, task_grid
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration (reported as a usage error)."""


@dataclass(frozen=True)
class DataConfig:
    samples_per_task: int = 5000
    quantize_bits: int = 0
    adapt_samples: int = 1000

    def __post_init__(self):
        if self.samples_per_task < 10:
            raise ValueError("samples_per_task must be at least 10")
        if not 0 <= self.quantize_bits <= 8:
            raise ValueError("quantize_bits must be in [0, 8]")
        if self.adapt_samples < 2:
            raise ValueError("adapt_samples must be at least 2")


@dataclass(frozen=True)
class GridConfig:
    crs: tuple = (0.125, 0.25, 0.5)
    snrs: tuple = (10.0, 15.0)
    channels: tuple = ("LoS", "NLoS")
    baseline: str = "0.25,15,NLoS"
    adapt_task: str = "0.25,12,NLoS"

    def __post_init__(self):
        object.__setattr__(self, "crs", tuple(float(c) for c in self.crs))
        object.__setattr__(self, "snrs", tuple(float(s) for s in self.snrs))
        object.__setattr__(self, "channels", tuple(parse_channel_type(c) for c in self.channels))
        if not self.crs or not self.snrs or not self.channels:
            raise ValueError("grid needs at least one CR, SNR and channel type")
        TaskDescriptor.parse(self.baseline)
        TaskDescriptor.parse(self.adapt_task)

    @property
    def tasks(self):
        return task_grid(self.crs, self.snrs, self.channels)

    @property
    def baseline_task(self):
        return TaskDescriptor.parse(self.baseline)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    system: SystemConfig = field(default_factory=SystemConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    grid: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self):
        if (self.system.rows, self.system.cols) != (self.codec.rows, self.codec.cols):
            raise ValueError("codec surface size must match the system surface size")
        if tuple(sorted(self.grid.crs)) != tuple(sorted(self.codec.crs)):
            raise ValueError("codec CR table must match the grid CRs")
        if self.grid.baseline_task.cr not in self.codec.crs:
            raise ValueError("baseline CR must be a grid CR")

    def to_dict(self):
        return {
            "seed": self.seed,
            "system": dataclasses.asdict(self.system),
            "codec": self.codec.to_dict(),
            "train": dataclasses.asdict(self.train),
            "data": dataclasses.asdict(self.data),
            "grid": {"crs": list(self.grid.crs), "snrs": list(self.grid.snrs),
                     "channels": list(self.grid.channels), "baseline": self.grid.baseline,
                     "adapt_task": self.grid.adapt_task},
        }

    def digest(self):
        raw = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(raw.encode()).hexdigest()


_SECTIONS = {"system": SystemConfig, "codec": CodecConfig, "train": TrainConfig,
             "data": DataConfig, "grid": GridConfig}
_TUPLES = {("grid", "crs"), ("grid", "snrs"), ("grid", "channels"), ("codec", "crs")}


def _convert(section, key, text, default):
    text = text.strip()
    if (section, key) in _TUPLES:
        return tuple(p.strip() for p in text.split(",") if p.strip())
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or default is None:
        if text.lower() in ("none", ""):
            return None
        return float(text)
    return text


def _defaults(cls):
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        else:
            out[f.name] = f.default_factory()
    return out


def parse_config(text, source="<config>"):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values = {name: {} for name in _SECTIONS}
    seed = 0
    for section in cp.sections():
        if section == "run":
            for key, val in cp.items(section):
                if key != "seed":
                    raise ConfigError(f"{source}: unknown key [run] {key}")
                seed = int(val)
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        defaults = _defaults(_SECTIONS[section])
        for key, val in cp.items(section):
            if key not in defaults:
                raise ConfigError(f"{source}: unknown key [{section}] {key}")
            try:
                values[section][key] = _convert(section, key, val, defaults[key])
            except ValueError as exc:
                raise ConfigError(f"{source}: [{section}] {key}: {exc}") from None
    return build_config(seed, values)


def build_config(seed=0, values=None, seed_override=None):
    values = values or {}
    seed = seed if seed_override is None else seed_override
    try:
        system = SystemConfig(**values.get("system", {}))
        grid = GridConfig(**values.get("grid", {}))
        codec_kw = dict(values.get("codec", {}))
        codec_kw.setdefault("rows", system.rows)
        codec_kw.setdefault("cols", system.cols)
        codec_kw.setdefault("crs", grid.crs)
        codec = CodecConfig(**codec_kw)
        train_kw = dict(values.get("train", {}))
        train_kw["seed"] = int(seed)
        train = TrainConfig(**train_kw)
        data = DataConfig(**values.get("data", {}))
        return RunConfig(int(seed), system, codec, train, data, grid)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, seed=None):
    """Read ``path`` (or the defaults) and apply a ``--seed`` override."""
    if path is None:
        cfg = build_config(0)
    else:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = parse_config(text, str(path))
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed),
                                  train=dataclasses.replace(cfg.train, seed=int(seed)))
    return cfg


def dump_config(cfg):
    """Render ``cfg`` back into the file format (round-trips through parse_config)."""
    d = cfg.to_dict()
    lines = ["[run]", f"seed = {cfg.seed}", ""]
    for section in ("system", "codec", "train", "data", "grid"):
        lines.append(f"[{section}]")
        for k, v in d[section].items():
            if section == "train" and k == "seed":
                continue
            if isinstance(v, (list, tuple)):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
