"""Configuration management for densetok.

Layers, later wins: built-in defaults -> config file (.json or .toml) ->
DENSETOK_* environment variables -> command-line overrides. The merged dict
is then turned into typed, validated dataclasses.
"""
import copy
import json
import os
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np

from .data import SynthConfig
from .errors import ConfigError, DataError
from .optim import OptimConfig
from .vit import ModelConfig

try:
    import tomllib
except ImportError:
    try:
        import tomli as tomllib  # type: ignore[no-redef]
    except ImportError:
        tomllib = None  # type: ignore[assignment]


_DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": 42,
    "theme": "monokai",
    "model": ModelConfig().to_dict(),
    "optim": {k: v for k, v in OptimConfig().to_dict().items() if k != "total_iters"},
    "synth": {k: v for k, v in SynthConfig().to_dict().items() if k != "seed"},
    "train": {
        "iters": 2000,
        "batch_size": 8,
        "eval_every": 500,
        "score_thresh": 0.5,
        "nms_iou": 0.3,
        "scenes": 250,
        "focus_weight": 0.5,
        "density_weight": 1.0,
        "flip_aug": True,
        "workers": 1,
    },
    "paths": {"out_dir": "runs/densetok", "checkpoint": None},
}

_ENV_MAP = {
    "DENSETOK_SEED": ("seed", int),
    "DENSETOK_OUT": ("paths.out_dir", str),
    "DENSETOK_ITERS": ("train.iters", int),
    "DENSETOK_BATCH": ("train.batch_size", int),
    "DENSETOK_THEME": ("theme", str),
    "DENSETOK_WORKERS": ("train.workers", int),
}


@dataclass
class TrainConfig:
    iters: int = 2000
    batch_size: int = 8
    eval_every: int = 500
    score_thresh: float = 0.5
    nms_iou: float = 0.3
    scenes: int = 250
    focus_weight: float = 0.5
    density_weight: float = 1.0
    flip_aug: bool = True
    workers: int = 1

    def __post_init__(self) -> None:
        if self.iters < 0:
            raise ConfigError(f"train.iters must be >= 0, got {self.iters}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 0:
            raise ConfigError(f"train.eval_every must be >= 0, got {self.eval_every}")
        for key in ("score_thresh", "nms_iou"):
            if not 0.0 < getattr(self, key) < 1.0:
                raise ConfigError(f"train.{key} must lie in (0, 1), got {getattr(self, key)}")
        if self.scenes < 0 or self.workers < 1:
            raise ConfigError("train.scenes must be >= 0 and train.workers >= 1")
        if self.focus_weight < 0 or self.density_weight < 0:
            raise ConfigError("train loss weights must be non-negative")


@dataclass
class PathsConfig:
    out_dir: str = "runs/densetok"
    checkpoint: Optional[str] = None

    @property
    def out(self) -> Path:
        return Path(self.out_dir)


@dataclass
class RunConfig:
    seed: int = 42
    theme: str = "monokai"
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "theme": self.theme,
            "model": self.model.to_dict(),
            "optim": self.optim.to_dict(),
            "synth": self.synth.to_dict(),
            "train": asdict(self.train),
            "paths": asdict(self.paths),
        }


def _merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def _set_dotted(cfg: Dict[str, Any], dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    node = cfg
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


def _load_file_config(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    suffix = path.suffix.lower()
    if suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    elif suffix == ".toml":
        if tomllib is None:
            raise ConfigError("TOML config files need Python 3.11+ or the tomli package")
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    else:
        raise DataError(f"unsupported config format {path.suffix!r} (use .json or .toml)")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table/object")
    return data


def _apply_env(cfg: Dict[str, Any]) -> None:
    for env_key, (dotted, kind) in _ENV_MAP.items():
        val = os.environ.get(env_key)
        if val is None:
            continue
        try:
            _set_dotted(cfg, dotted, kind(val))
        except ValueError:
            pass


def _section(cfg: Dict[str, Any], name: str) -> Dict[str, Any]:
    section = cfg.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be a table/object")
    return section


def _build(cls, name: str, values: Dict[str, Any]):
    unknown = sorted(set(values) - set(cls.__dataclass_fields__))
    if unknown:
        raise ConfigError(f"unknown {name} settings: {unknown}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} settings: {exc}") from exc


def build_run_config(cfg: Dict[str, Any]) -> RunConfig:
    unknown = sorted(set(cfg) - {"seed", "theme", "model", "optim", "synth", "train", "paths"})
    if unknown:
        raise ConfigError(f"unknown top-level settings: {unknown}")
    try:
        seed = int(cfg.get("seed", 42))
    except (TypeError, ValueError):
        raise ConfigError(f"seed must be an integer, got {cfg.get('seed')!r}") from None
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    train = _build(TrainConfig, "train", _section(cfg, "train"))
    optim_values = dict(_section(cfg, "optim"))
    optim_values["total_iters"] = train.iters
    synth_values = dict(_section(cfg, "synth"))
    synth_values.setdefault("seed", seed)
    return RunConfig(
        seed=seed,
        theme=str(cfg.get("theme", "monokai")),
        model=_build(ModelConfig, "model", _section(cfg, "model")),
        optim=_build(OptimConfig, "optim", optim_values),
        synth=_build(SynthConfig, "synth", synth_values),
        train=train,
        paths=_build(PathsConfig, "paths", _section(cfg, "paths")),
    )


def load_config_dict(config_path: Optional[Union[str, Path]] = None,
                     **overrides: Any) -> Dict[str, Any]:
    """Merged raw dict; override keys may be dotted ("train.iters")."""
    cfg = copy.deepcopy(_DEFAULT_CONFIG)
    if config_path is not None:
        _merge(cfg, _load_file_config(config_path))
    _apply_env(cfg)
    for key, value in overrides.items():
        if value is not None:
            _set_dotted(cfg, key, value)
    return cfg


def load_config(config_path: Optional[Union[str, Path]] = None, **overrides: Any) -> RunConfig:
    return build_run_config(load_config_dict(config_path, **overrides))


def get_system_info() -> Dict[str, str]:
    return {
        "os": platform.system(),
        "os_version": platform.version(),
        "arch": platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cwd": os.getcwd(),
    }


def write_effective_config(run: RunConfig, out_dir: Union[str, Path]) -> Path:
    """Echo the effective configuration plus system info to <out_dir>/config.json."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "config.json"
        payload = dict(run.to_dict(), system=get_system_info())
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write to output directory {out}: {exc}") from exc
    return path
