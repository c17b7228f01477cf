"""INI run configuration shared by every CLI subcommand.

Sections: ``[run]`` (seed, out), ``[architecture]``, ``[data]``, ``[training]``,
``[augmentation]``, ``[evaluation]`` and ``[explain]``. Every key is optional;
unknown sections or keys are rejected so typos do not pass silently.
"""
import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .arch import ArchConfig
from .data import AugmentationConfig
from .errors import ArchitectureError, ConfigError
from .explain import AttributionConfig
from .training import TrainConfig

SECTIONS = ("run", "architecture", "data", "training", "augmentation", "evaluation", "explain")
_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


@dataclass
class DataSettings:
    train_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    test_fraction: float = 0.1


@dataclass
class EvalSettings:
    name: str = "COVID-Net"
    batch_size: int = 64


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    architecture: ArchConfig = field(default_factory=ArchConfig)
    data: DataSettings = field(default_factory=DataSettings)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    explain: AttributionConfig = field(default_factory=AttributionConfig)

    def with_overrides(self, seed=None, out=None):
        cfg = replace(self)
        if seed is not None:
            cfg.seed = int(seed)
        if out is not None:
            cfg.out = str(out)
        cfg.training = replace(cfg.training, seed=cfg.seed,
                               augmentation=replace(cfg.training.augmentation, seed=cfg.seed))
        return cfg


def _convert(cls, section, values):
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, raw in values.items():
        name = key.replace("-", "_")
        if name not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        default = known[name].default
        ftype = known[name].type
        try:
            if isinstance(default, bool):
                if raw.strip().lower() not in _BOOL:
                    raise ValueError(f"not a boolean: {raw!r}")
                out[name] = _BOOL[raw.strip().lower()]
            elif isinstance(default, tuple):
                out[name] = tuple(float(v) for v in raw.split(","))
            elif isinstance(default, int):
                out[name] = int(raw)
            elif isinstance(default, float) or "float" in str(ftype):
                out[name] = float(raw) if raw.strip() else None
            else:
                out[name] = raw.strip() or None
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
    return out


def parse(text, source="<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    unknown = [s for s in cp.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"{source}: unknown sections {unknown}")
    sec = {s: dict(cp[s]) if cp.has_section(s) else {} for s in SECTIONS}
    try:
        run = _convert(RunConfig, "run", {k: v for k, v in sec["run"].items()})
        if set(run) - {"seed", "out"}:
            raise ConfigError("[run] only seed and out are allowed")
        arch_cfg = ArchConfig.from_mapping(sec["architecture"])
        aug = AugmentationConfig(**_convert(AugmentationConfig, "augmentation", sec["augmentation"]))
        train_kw = _convert(TrainConfig, "training", sec["training"])
        train_kw.pop("augmentation", None)
        training = TrainConfig(**train_kw, augmentation=aug)
        cfg = RunConfig(
            architecture=arch_cfg,
            data=DataSettings(**_convert(DataSettings, "data", sec["data"])),
            training=training,
            evaluation=EvalSettings(**_convert(EvalSettings, "evaluation", sec["evaluation"])),
            explain=AttributionConfig(**_convert(AttributionConfig, "explain", sec["explain"])),
            **run,
        )
    except ConfigError:
        raise
    except (ArchitectureError, ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg.with_overrides()


def load(path=None, seed=None, out=None) -> RunConfig:
    """Read ``path`` (or defaults when None) and apply flag overrides."""
    if path is None:
        cfg = RunConfig()
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = parse(text, str(path))
    return cfg.with_overrides(seed, out)


def to_ini(cfg: RunConfig) -> str:
    """Effective configuration as INI text; ``parse(to_ini(cfg))`` reproduces it."""
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, tuple):
            return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        return repr(v) if isinstance(v, float) else str(v)

    cp = configparser.ConfigParser(interpolation=None)
    cp["run"] = {"seed": str(cfg.seed), "out": cfg.out}
    cp["architecture"] = cfg.architecture.to_mapping()
    cp["data"] = {f.name: fmt(getattr(cfg.data, f.name)) for f in fields(cfg.data)}
    cp["training"] = {f.name: fmt(getattr(cfg.training, f.name)) for f in fields(cfg.training)
                      if f.name != "augmentation"}
    cp["augmentation"] = {f.name: fmt(getattr(cfg.training.augmentation, f.name))
                          for f in fields(cfg.training.augmentation)}
    cp["evaluation"] = {f.name: fmt(getattr(cfg.evaluation, f.name)) for f in fields(cfg.evaluation)}
    cp["explain"] = {f.name: fmt(getattr(cfg.explain, f.name)) for f in fields(cfg.explain)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
