"""INI run configuration: one section per component config."""

from __future__ import annotations

import configparser
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .core import RouterConfig
from .dataprep import InvalidConfigError, SplitSpec, SyntheticSpec
from .ot import SinkhornConfig
from .trainer import TrainConfig

OUTPUT_ENV = "TRA_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class SplitConfig:
    """Explicit date ranges win over ``fractions`` when all six dates are set."""

    fractions: list[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])
    gap_days: int = 10
    train_start: str = ""
    train_end: str = ""
    valid_start: str = ""
    valid_end: str = ""
    test_start: str = ""
    test_end: str = ""

    def explicit(self) -> SplitSpec | None:
        dates = [self.train_start, self.train_end, self.valid_start, self.valid_end, self.test_start, self.test_end]
        if not any(dates):
            return None
        if not all(dates):
            raise ConfigError("split: give all six of train/valid/test _start/_end, or none")
        return SplitSpec((dates[0], dates[1]), (dates[2], dates[3]), (dates[4], dates[5]), self.gap_days)


@dataclass
class PathsConfig:
    data: str = ""  # empty: <output_dir>/synthetic.csv
    regimes: str = ""  # empty: <output_dir>/synthetic_regimes.csv when present
    output_dir: str = "runs/default"


@dataclass
class EvalConfig:
    decile: float = 0.1
    fill_calendar: bool = False
    period_len: int = 125


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    source: str | None = None

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.output_dir)

    @property
    def data_path(self) -> Path:
        return Path(self.paths.data) if self.paths.data else self.output_dir / "synthetic.csv"

    @property
    def regimes_path(self) -> Path:
        return Path(self.paths.regimes) if self.paths.regimes else self.output_dir / "synthetic_regimes.csv"

    def validate(self) -> None:
        for name in ("train", "backbone", "router", "sinkhorn"):
            try:
                getattr(self, name).validate()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        horizon = self.synthetic.horizon
        if self.router.gap <= horizon:
            raise ConfigError(
                f"router.gap={self.router.gap} must exceed the label horizon ({horizon}): "
                "errors of samples whose labels are not yet realised would leak into routing"
            )
        if not 0 < self.eval.decile <= 0.5:
            raise ConfigError("eval.decile must lie in (0, 0.5]")
        if len(self.split.fractions) != 3 or any(f <= 0 for f in self.split.fractions):
            raise ConfigError("split.fractions needs three positive numbers")
        if self.split.gap_days < self.backbone.window_len + horizon:
            raise ConfigError(
                f"split.gap_days={self.split.gap_days} is too small: need >= window_len + horizon = "
                f"{self.backbone.window_len + horizon}"
            )
        self.split.explicit()


SECTIONS = ("train", "backbone", "router", "sinkhorn", "split", "synthetic", "eval", "paths")
# config keys that differ from the dataclass attribute
ALIASES = {("train", "lambda"): "lam"}
REVERSE_ALIASES = {(s, a): k for (s, k), a in ALIASES.items()}


def _coerce(section: str, key: str, raw: str, default):
    where = f"{section}.{key}"
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, str):
            return raw
        # lists and optional structured values
        if raw == "" or raw.lower() == "none":
            return None if default is None else []
        if raw.startswith("["):
            return json.loads(raw)
        return [json.loads(p) for p in raw.split(",")]
    except (ValueError, json.JSONDecodeError):
        kind = type(default).__name__ if default is not None else "list"
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind}") from None


def _fields(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read an INI file (or only defaults when ``path`` is None) and validate it."""
    cfg = RunConfig()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg.source = str(path)
    for sec, items in (overrides or {}).items():
        if not parser.has_section(sec):
            parser.add_section(sec)
        for k, v in items.items():
            parser.set(sec, k, str(v))
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
        target = getattr(cfg, sec)
        known = _fields(target)
        for key, raw in parser.items(sec):
            attr = ALIASES.get((sec, key), key)
            if attr not in known or (sec, key) in REVERSE_ALIASES:
                raise ConfigError(f"unknown config key {sec}.{key}")
            setattr(target, attr, _coerce(sec, key, raw, known[attr]))
    if os.environ.get(OUTPUT_ENV):
        cfg.paths.output_dir = os.environ[OUTPUT_ENV]
    # schedule entries arrive as JSON lists
    if cfg.synthetic.schedule is not None:
        cfg.synthetic.schedule = [tuple(int(v) for v in s) for s in cfg.synthetic.schedule]
    try:
        cfg.validate()
    except InvalidConfigError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "none"
    if isinstance(v, (list, tuple)):
        return json.dumps([list(x) if isinstance(x, tuple) else x for x in v])
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        for k, v in _fields(getattr(cfg, sec)).items():
            lines.append(f"{REVERSE_ALIASES.get((sec, k), k)} = {_fmt(v)}")
        lines.append("")
    return "\n".join(lines)


def echo_config(cfg: RunConfig, command: str) -> Path:
    """Write the resolved config and seed before any work happens."""
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"resolved_{command}.ini"
    header = f"# resolved configuration for '{command}'; seed = {cfg.train.seed}\n"
    path.write_text(header + dump_config(cfg), encoding="utf-8")
    return path
