"""Plain-text ``key = value`` run configuration.

Keys are namespaced: ``model.*`` (architecture), ``train.*``, ``data.*`` and
``eval.*``. The ``mcl.*`` shorthands map onto training fields. Blank lines and
``#`` comments are ignored.
"""

import dataclasses
from dataclasses import dataclass, field

from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_scenes: int = 500
    seed: int = 0
    mode: str = "mixed"
    image_size: int = 64
    val_fraction: float = 0.2


@dataclass
class EvalConfig:
    batch_size: int = 32
    n_m: int = 3


ALIASES = {
    "mcl.denominator": "train.mcl_denominator",
    "mcl.feature": "train.mcl_feature",
    "mcl.lambda": "train.lambda_mcl",
    "mcl.tau": "train.tau",
    "mcl.n_m": "train.n_m",
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def sections(self):
        return {"model": self.model, "train": self.train, "data": self.data, "eval": self.eval}

    def keys(self):
        return [f"{sec}.{f.name}" for sec, obj in self.sections().items() for f in dataclasses.fields(obj)]

    def set(self, key, raw):
        key = ALIASES.get(key.strip(), key.strip())
        sec, _, name = key.partition(".")
        obj = self.sections().get(sec)
        if obj is None or name not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key {key!r}")
        value = _coerce(getattr(obj, name), raw.strip(), key)
        if sec == "model":
            self.model = dataclasses.replace(self.model, **{name: value})
        else:
            setattr(obj, name, value)

    def dumps(self):
        lines = []
        for sec, obj in self.sections().items():
            for f in dataclasses.fields(obj):
                lines.append(f"{sec}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def from_text(cls, text, overrides=()):
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
            k, v = line.split("=", 1)
            cfg.set(k, v)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} must be key=value")
            k, v = item.split("=", 1)
            cfg.set(k, v)
        return cfg

    @classmethod
    def load(cls, path=None, overrides=()):
        text = ""
        if path:
            with open(path) as fh:
                text = fh.read()
        return cls.from_text(text, overrides)


def _coerce(current, raw, key):
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from exc
    return raw


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)
