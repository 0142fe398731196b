"""YAML run configuration with one section per module.

Every field has a default; unknown keys anywhere are rejected. Encoder
widths are restricted to the documented search domains below.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .encoder import EncoderConfig
from .harness import METHODS
from .trainer import TrainConfig
from .trees import GbdtConfig

# hyperparameter search domains for the encoder
DOMAINS: dict[str, tuple] = {
    "d_emb": (12, 24, 36, 48),
    "d_attn": (12, 24, 36, 48),
    "n_layers": (1, 2, 4),
    "depths": (1, 2, 4),
}

ENV_OUT_ROOT = "GFTAB_OUT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    missing_threshold: float = 0.30
    na_values: tuple[str, ...] = ("",)


@dataclass(frozen=True)
class SplitSection:
    label_fraction: float = 0.1
    noise_fraction: float = 0.0
    val_fraction: float = 0.15
    test_fraction: float = 0.15


@dataclass(frozen=True)
class GridSection:
    datasets: tuple[str, ...] = ()  # canonical dataset files; names are file stems
    methods: tuple[str, ...] = ("gftab",)
    settings: tuple[tuple[float, float], ...] = ((0.2, 0.0), (0.2, 0.2))
    seeds: tuple[int, ...] = (0, 1, 2)
    store: str = "results.jsonl"


@dataclass(frozen=True)
class CliConfig:
    data: DataSection = field(default_factory=DataSection)
    split: SplitSection = field(default_factory=SplitSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: GridSection = field(default_factory=GridSection)

    def with_seed(self, seed: int) -> "CliConfig":
        return replace(self, train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _section(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"[{where}] must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {unknown}")
    return raw


def _check_domains(enc: EncoderConfig) -> None:
    for name, allowed in DOMAINS.items():
        v = getattr(enc, name)
        if v not in allowed:
            raise ConfigError(f"[train.encoder] {name}={v} not in {list(allowed)}")


def from_dict(raw: dict | None) -> CliConfig:
    raw = raw or {}
    top = _section(CliConfig, raw, "top level")
    try:
        d = _section(DataSection, top.get("data"), "data")
        data = DataSection(**{**d, **({"na_values": tuple(d["na_values"])} if "na_values" in d else {})}) if isinstance(d, dict) else d
        s = _section(SplitSection, top.get("split"), "split")
        split = SplitSection(**s) if isinstance(s, dict) else s
        t = _section(TrainConfig, top.get("train"), "train")
        if isinstance(t, dict):
            t = dict(t)
            if "encoder" in t:
                t["encoder"] = _section(EncoderConfig, t["encoder"], "train.encoder")
            if "gbdt" in t:
                t["gbdt"] = _section(GbdtConfig, t["gbdt"], "train.gbdt")
            train = TrainConfig.from_dict(t)
        else:
            train = t
        g = _section(GridSection, top.get("grid"), "grid")
        if isinstance(g, dict):
            g = dict(g)
            for k in ("datasets", "methods", "seeds"):
                if k in g:
                    g[k] = tuple(g[k])
            if "settings" in g:
                g["settings"] = tuple((float(a), float(b)) for a, b in g["settings"])
            grid = GridSection(**g)
        else:
            grid = g
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e
    _check_domains(train.encoder)
    bad = [m for m in grid.methods if m not in METHODS]
    if bad:
        raise ConfigError(f"[grid] unknown methods {bad}; known: {sorted(METHODS)}")
    return CliConfig(data=data, split=split, train=train, grid=grid)


def load(path: str | Path | None) -> CliConfig:
    if path is None:
        return CliConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(raw)
