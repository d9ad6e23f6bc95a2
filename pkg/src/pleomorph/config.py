"""Run configuration: nested dataclasses addressed by dotted keys.

A config file holds ``key = value`` lines, where values are Python
literals (``1e-4``, ``(4, 12)``, ``'text'``) and ``#`` starts a comment.
Unknown keys are rejected. :func:`dump_config` writes every resolved key,
and its output parses back to the same config.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .baseline import EmbeddingNetConfig, JointLossWeights
from .dataset import DatasetConfig
from .errors import InvalidConfigError
from .inference import TileGrid
from .regressor import RegressionNetConfig, TrainConfig

# sub-config seeds all follow the single top-level seed
_HIDDEN = {"seed"}


@dataclass(frozen=True)
class TilingConfig:
    tile_size: int = 64
    overlap: int = 56
    block_size: int = 8
    tumor_threshold: int = 1
    batch_size: int = 32

    def __post_init__(self):
        self.grid(self.tile_size, self.tile_size)  # validates the geometry
        if self.tumor_threshold < 0 or self.batch_size < 1:
            raise InvalidConfigError("tumor_threshold must be >= 0 and batch_size >= 1")

    def grid(self, width: int, height: int) -> TileGrid:
        return TileGrid(self.tile_size, self.overlap, self.block_size, width, height)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DatasetConfig = field(default_factory=DatasetConfig)
    net: RegressionNetConfig = field(default_factory=RegressionNetConfig)
    embedding: EmbeddingNetConfig = field(default_factory=EmbeddingNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    joint: JointLossWeights = field(default_factory=JointLossWeights)
    tiling: TilingConfig = field(default_factory=TilingConfig)

    def __post_init__(self):
        if self.net.input_size != self.embedding.input_size:
            raise InvalidConfigError("regression and embedding networks must take the same patch size")
        if self.net.input_size != self.tiling.tile_size:
            raise InvalidConfigError("tile size must equal the network input size")

    def resolved(self) -> "RunConfig":
        """Push the top-level seed into the sub-configs that carry one."""
        return dataclasses.replace(
            self, data=dataclasses.replace(self.data, seed=self.seed),
            train=dataclasses.replace(self.train, seed=self.seed))


def flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        if prefix and f.name in _HIDDEN:
            continue
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = value
    return out


def _tupled(value):
    if isinstance(value, (list, tuple)):
        return tuple(_tupled(v) for v in value)
    return value


def _rebuild(obj, overrides: dict, prefix: str = ""):
    changes = {}
    for f in dataclasses.fields(obj):
        key = f"{prefix}{f.name}"
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            sub = {k: v for k, v in overrides.items() if k.startswith(key + ".")}
            if sub:
                changes[f.name] = _rebuild(value, sub, key + ".")
        elif key in overrides:
            changes[f.name] = _coerce(key, value, overrides[key])
    try:
        return dataclasses.replace(obj, **changes)
    except InvalidConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise InvalidConfigError(f"{prefix or 'config'}: {exc}") from None


def _coerce(key, default, value):
    value = _tupled(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidConfigError(f"{key}: expected True or False, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidConfigError(f"{key}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfigError(f"{key}: expected a number, got {value!r}")
        value = float(value)
    return value


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    known = set(flatten(config))
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise InvalidConfigError(f"unknown config keys: {', '.join(unknown)}")
    return _rebuild(config, overrides)


def _literal(value: str):
    try:
        return ast.literal_eval(value)
    except (ValueError, SyntaxError):
        if "#" not in value:
            raise
        return ast.literal_eval(value.split("#", 1)[0].strip())


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise InvalidConfigError(f"{source}:{n}: duplicate key {key}")
        try:
            out[key] = _literal(value)
        except (ValueError, SyntaxError):
            raise InvalidConfigError(f"{source}:{n}: cannot parse value {value!r}") from None
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    config = RunConfig()
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise InvalidConfigError(f"config file {p} does not exist")
        values.update(parse_config_text(p.read_text(), str(p)))
    values.update(overrides or {})
    return apply_overrides(config, values).resolved()


def dump_config(config: RunConfig) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in flatten(config).items())
