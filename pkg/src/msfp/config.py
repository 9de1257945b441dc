"""Run configuration, ``--key=value`` overrides and named RNG sub-streams."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

__all__ = ["RunConfig", "ConfigError", "load_config", "apply_overrides", "substream", "BIT_WIDTHS"]

BIT_WIDTHS = (4, 6, 8, 32)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    # data
    dataset: str = "mixture"
    n_data: int = 4096
    mode_std: float = 0.2
    # model
    hidden: int = 64
    n_hidden: int = 3
    time_embed_dim: int = 32
    # schedule
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    eta: float = 1.0
    # full-precision training
    train_epochs: int = 100
    train_batch_size: int = 256
    train_lr: float = 2e-3
    # quantization and calibration
    weight_bits: int = 4
    act_bits: int = 4
    io_bits: int = 8
    msfp: bool = True
    n_probe: int = 64
    calib_size: int = 1024
    calib_strata: int = 32
    calib_max_samples: int = 8192
    n_maxvals: int = 100
    # fine-tuning
    strategy: str = "router"
    hub_size: int = 2
    rank: int = 4
    loss: str = "dfa"
    epochs: int = 200
    batch_size: int = 64
    lr_lora: float = 1e-4
    lr_router: float = 1e-4
    n_cache: int = 64
    # sampling and evaluation
    n_samples: int = 1024
    n_eval: int = 2048

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("weight_bits", "act_bits", "io_bits"):
            if getattr(self, name) not in BIT_WIDTHS:
                raise ConfigError(f"{name} must be one of {BIT_WIDTHS}, got {getattr(self, name)}")
        if self.dataset not in ("mixture", "blobs"):
            raise ConfigError(f"dataset must be 'mixture' or 'blobs', got {self.dataset!r}")
        if self.strategy not in ("single", "split_half", "random", "router"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.loss not in ("plain", "dfa"):
            raise ConfigError(f"loss must be 'plain' or 'dfa', got {self.loss!r}")
        if self.strategy == "single" and self.hub_size != 1:
            raise ConfigError("strategy 'single' needs hub_size 1")
        if self.strategy != "single" and self.hub_size < 2:
            raise ConfigError(f"strategy {self.strategy!r} needs hub_size >= 2")
        positive = ("n_data", "hidden", "n_hidden", "time_embed_dim", "T", "train_batch_size", "n_probe",
                    "calib_size", "calib_strata", "calib_max_samples", "n_maxvals", "rank", "batch_size",
                    "n_cache", "n_samples", "n_eval")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("train_epochs", "epochs", "train_lr", "lr_lora", "lr_router", "eta", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @property
    def layer_bits(self) -> list[tuple[int, int]]:
        """(weight, activation) bits per linear layer; first and last use ``io_bits``."""
        n = self.n_hidden + 1
        io = (self.io_bits, self.io_bits)
        return [io] + [(self.weight_bits, self.act_bits)] * (n - 2) + [io]


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    kind = _FIELDS[name].type
    if kind == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "1", "yes", "on", "false", "0", "no", "off"):
            return value.lower() in ("true", "1", "yes", "on")
        raise ConfigError(f"{name} expects a boolean, got {value!r}")
    try:
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except ValueError:
        raise ConfigError(f"{name} expects {kind}, got {value!r}") from None


def apply_overrides(base: dict, overrides: dict) -> dict:
    unknown = sorted(set(overrides) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = dict(base)
    out.update({k: _coerce(k, v) for k, v in overrides.items()})
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides``; unknown keys fail."""
    values = RunConfig().to_dict() if path is None else {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        values = apply_overrides(RunConfig().to_dict(), data)
    values = apply_overrides(values, overrides or {})
    return RunConfig(**values)


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the named component, e.g. ``substream(0, "calib/probe")``.

    Streams depend only on (seed, name), so one stage can be rerun alone.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = np.frombuffer(digest[:16], dtype="<u4").tolist()
    return np.random.default_rng(np.random.SeedSequence([int(seed), *words]))
