"""Flat ``key = value`` experiment configuration.

Lines starting with ``#`` are comments. Every key maps to a typed field;
unknown keys and bad values raise ``ConfigError`` naming the key. Overrides
(from command-line flags) are applied after the file and win.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from .errors import ConfigError
from .federation import FederationConfig

KAPPA_GRID = (0, 0.001, 0.01, 0.1, 1, 5, 10, 20, 50, 100, 200, 500)
MOMENTUM_GRID = tuple(round(0.1 * i, 1) for i in range(11))
SWEEP_GRIDS = {"kappa": KAPPA_GRID, "momentum": MOMENTUM_GRID}

REQUIRED = ("num_clients", "iterations")


@dataclass
class ExperimentConfig:
    federation: FederationConfig
    dataset: str = "synthetic"
    csv_path: str | None = None
    csv_header: bool = False
    num_classes: int = 10
    dim: int = 16
    samples_per_class: int = 200
    separation: float = 2.0
    partition: str = "dirichlet"
    beta: float = 0.1
    labels_per_client: int = 2
    train_fraction: float = 0.75
    repeat: int = 1
    out_dir: str = "results"
    export_reps: bool = False

    def __post_init__(self):
        checks = [
            ("dataset", self.dataset in ("synthetic", "csv"), "must be 'synthetic' or 'csv'"),
            ("csv_path", self.dataset != "csv" or bool(self.csv_path), "required when dataset = csv"),
            ("num_classes", self.num_classes >= 2, "must be >= 2"),
            ("dim", self.dim >= 1, "must be >= 1"),
            ("samples_per_class", self.samples_per_class >= 1, "must be >= 1"),
            ("separation", self.separation > 0, "must be > 0"),
            ("partition", self.partition in ("dirichlet", "pathological"), "must be 'dirichlet' or 'pathological'"),
            ("beta", self.beta > 0, "must be > 0"),
            ("labels_per_client", self.labels_per_client >= 1, "must be >= 1"),
            ("train_fraction", 0 < self.train_fraction < 1, "must be in (0, 1)"),
            ("repeat", self.repeat >= 1, "must be >= 1"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(msg, key=key)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.replace(" ", "").split(",") if part)


def _parse_optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _parse_optional_str(text: str) -> str | None:
    return None if text.strip().lower() in ("", "none") else text.strip()


_PARSERS: dict[str, Callable[[str], Any]] = {
    # federation
    "num_clients": int,
    "iterations": int,
    "algorithm": str.strip,
    "join_ratio": float,
    "local_epochs": int,
    "learning_rate": float,
    "batch_size": int,
    "kappa": float,
    "momentum": float,
    "prox_weight": float,
    "hidden": _parse_int_tuple,
    "split": _parse_optional_int,
    "freeze_prbm": _parse_bool,
    "privacy": _parse_bool,
    "noise_scale": float,
    "noise_coef": float,
    "seed": int,
    "workers": int,
    # experiment
    "dataset": str.strip,
    "csv_path": _parse_optional_str,
    "csv_header": _parse_bool,
    "num_classes": int,
    "dim": int,
    "samples_per_class": int,
    "separation": float,
    "partition": str.strip,
    "beta": float,
    "labels_per_client": int,
    "train_fraction": float,
    "repeat": int,
    "out_dir": str.strip,
    "export_reps": _parse_bool,
}

_FEDERATION_KEYS = {f.name for f in dataclasses.fields(FederationConfig)}


def read_pairs(path: str | Path) -> dict[str, str]:
    pairs: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc.strerror}", key="config") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'", key="config")
        key, value = (part.strip() for part in line.split("=", 1))
        pairs[key] = value
    return pairs


def build_config(pairs: Mapping[str, str]) -> ExperimentConfig:
    values: dict[str, Any] = {}
    for key, text in pairs.items():
        if key not in _PARSERS:
            raise ConfigError("unknown key", key=key)
        try:
            values[key] = _PARSERS[key](text)
        except ValueError:
            raise ConfigError(f"invalid value {text!r}", key=key) from None
    for key in REQUIRED:
        if key not in values:
            raise ConfigError("missing required key", key=key)
    fed = FederationConfig(**{k: v for k, v in values.items() if k in _FEDERATION_KEYS})
    return ExperimentConfig(fed, **{k: v for k, v in values.items() if k not in _FEDERATION_KEYS})


def parse_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Load ``path`` (if any), apply string ``overrides``, validate everything."""
    pairs = read_pairs(path) if path is not None else {}
    pairs.update(overrides or {})
    return build_config(pairs)


def with_federation(config: ExperimentConfig, **changes) -> ExperimentConfig:
    return dataclasses.replace(config, federation=dataclasses.replace(config.federation, **changes))


def to_pairs(config: ExperimentConfig) -> dict[str, Any]:
    out = dataclasses.asdict(config.federation)
    out.update({k: v for k, v in dataclasses.asdict(config).items() if k != "federation"})
    return out


__all__ = [
    "ExperimentConfig",
    "KAPPA_GRID",
    "MOMENTUM_GRID",
    "SWEEP_GRIDS",
    "build_config",
    "parse_config",
    "read_pairs",
    "to_pairs",
    "with_federation",
]
