"""Run configuration: typed sections, strict keys, JSON round trip.

Every section maps onto a dataclass and unknown keys are rejected with the
offending path in the message. ``resolved()`` is what runs write next to
their outputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .attacker import AttackerConfig
from .data import SyntheticSpec
from .errors import ConfigError, DataError
from .scheme import SchemeConfig
from .training import TrainConfig
from .utility import ClassifierConfig

SCHEME_IDS = ("identity", "uniform-null", "dauntless", "instahide", "dp-simple", "dp-image", "obfuscator", "obfuscator-random")
SCHEME_ALIASES = {"syfer": "obfuscator", "syfer-random": "obfuscator-random"}


@dataclass(frozen=True)
class SchemeChoice:
    id: str = "identity"
    b: float = 0.1
    label_encoding: bool = True

    def __post_init__(self):
        canonical = SCHEME_ALIASES.get(self.id, self.id)
        if canonical not in SCHEME_IDS:
            raise ConfigError(f"scheme.id: unknown scheme {self.id!r}; choose from {list(SCHEME_IDS)}")
        object.__setattr__(self, "id", canonical)
        if self.b < 0:
            raise ConfigError(f"scheme.b: noise scale must be >= 0, got {self.b}")


@dataclass(frozen=True)
class EvalConfig:
    n_eval: int = 128
    data_samples: int = 3
    keys: int = 3
    epochs: int = 200

    def __post_init__(self):
        if self.n_eval < 2:
            raise ConfigError(f"eval.n_eval must be >= 2, got {self.n_eval}")
        if self.data_samples * self.keys < 2:
            raise ConfigError("eval needs at least 2 trials (data_samples * keys)")


@dataclass(frozen=True)
class SplitConfig:
    train: float = 0.6
    dev: float = 0.2
    test: float = 0.2

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.train, self.dev, self.test)


@dataclass(frozen=True)
class TrainSection:
    steps: int = 2000
    batch: int = 128
    lr: float = 1e-3
    lambda_rec: float = 20.0
    lambda_reid: float = 2.0
    decoders: int = 1
    decoder_depth: int = 3
    checkpoint_every: int = 0


@dataclass(frozen=True)
class DpImageConfig:
    epochs: int = 20
    latent: int = 256
    width: int = 16
    batch: int = 64


@dataclass(frozen=True)
class ExportConfig:
    count: int = 8
    decoder_epochs: int = 30


@dataclass(frozen=True)
class Artifacts:
    dataset: str | None = None
    obfuscator: str | None = None
    dp_image: str | None = None
    attacker: str | None = None

    def require(self, name: str) -> Path:
        value = getattr(self, name)
        if value is None:
            raise ConfigError(f"artifacts.{name} must be set for this command")
        path = Path(value)
        if not path.is_file():
            raise DataError(f"artifacts.{name}: no such file {path}")
        return path


SECTIONS = {
    "data": SyntheticSpec,
    "scheme": SchemeChoice,
    "scheme_config": SchemeConfig,
    "attacker": AttackerConfig,
    "train": TrainSection,
    "eval": EvalConfig,
    "classifier": ClassifierConfig,
    "splits": SplitConfig,
    "dp_image": DpImageConfig,
    "export": ExportConfig,
    "artifacts": Artifacts,
}
DEFAULT_FRACTIONS = [1 / 32, 1 / 16, 1 / 8, 1 / 4, 1 / 2, 1.0]


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    fractions: tuple = tuple(DEFAULT_FRACTIONS)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    scheme: SchemeChoice = field(default_factory=SchemeChoice)
    scheme_config: SchemeConfig = field(default_factory=SchemeConfig)
    attacker: AttackerConfig = field(default_factory=AttackerConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    splits: SplitConfig = field(default_factory=SplitConfig)
    dp_image: DpImageConfig = field(default_factory=DpImageConfig)
    export: ExportConfig = field(default_factory=ExportConfig)
    artifacts: Artifacts = field(default_factory=Artifacts)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config field {unknown[0]!r}")
        kwargs = {}
        for key, value in d.items():
            if key in SECTIONS:
                kwargs[key] = _section(SECTIONS[key], value, key)
            elif key == "fractions":
                kwargs[key] = tuple(float(v) for v in value)
            else:
                kwargs[key] = value
        if "seed" in kwargs and (not isinstance(kwargs["seed"], int) or kwargs["seed"] < 0):
            raise ConfigError(f"seed must be a non-negative integer, got {kwargs['seed']!r}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        try:
            text = path.read_text()
        except FileNotFoundError:
            raise ConfigError(f"no such config file: {path}") from None
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d

    def resolved(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def override(self, dotted: str, value) -> RunConfig:
        """Return a copy with ``section.field`` (or a top-level field) replaced."""
        d = self.to_dict()
        parts = dotted.split(".")
        target = d
        for p in parts[:-1]:
            if not isinstance(target.get(p), dict):
                raise ConfigError(f"unknown config field {dotted!r}")
            target = target[p]
        if parts[-1] not in target:
            raise ConfigError(f"unknown config field {dotted!r}")
        target[parts[-1]] = value
        return RunConfig.from_dict(d)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            steps=t.steps,
            batch=t.batch,
            lr=t.lr,
            lambda_rec=t.lambda_rec,
            lambda_reid=t.lambda_reid,
            decoders=t.decoders,
            decoder_depth=t.decoder_depth,
            checkpoint_every=t.checkpoint_every,
            attacker=replace(self.attacker, batch=t.batch, use_labels=False),
        )


def _section(cls, value, where: str):
    if not isinstance(value, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(value) - known)
    if unknown:
        raise ConfigError(f"unknown config field '{where}.{unknown[0]}'")
    defaults = cls()
    value = dict(value)
    for k, v in value.items():
        ref = getattr(defaults, k)
        if ref is None or v is None:
            continue
        if isinstance(ref, bool):
            ok = isinstance(v, bool)
        elif isinstance(ref, int):
            ok = isinstance(v, int) and not isinstance(v, bool)
        elif isinstance(ref, float):
            ok = isinstance(v, (int, float)) and not isinstance(v, bool)
            v = float(v) if ok else v
        else:
            ok = isinstance(v, type(ref))
        if not ok:
            raise ConfigError(f"{where}.{k}: expected {type(ref).__name__}, got {v!r}")
        value[k] = v
    try:
        return cls(**value)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None
