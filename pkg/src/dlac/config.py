"""Training configuration and the bundled presets."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import yaml

from .exceptions import ConfigurationError

PRESETS = ("desk-scale", "paper-scale")


@dataclass
class TrainConfig:
    """Hyperparameters of one training run.

    The first block mirrors the benchmark hyperparameter table; the rest are
    choices the method leaves open.
    """

    dt: float = 0.005
    n_steps: int = 500
    buffer_size: int = 4000
    n_eps_max: int = 8000
    batch_size: int = 256
    n_eps_interval: int = 50
    n_update: int = 1000
    n_eps_min: int = 400
    alpha3: float = 0.5
    entropy_target: float = -1.0
    lr_actor: float = 1e-4
    lr_critic: float = 1e-4
    lr_lagrange: float = 1e-4
    tau: float = 5e-6
    gamma: float = 0.95

    seed: int = 0
    n_subsystems: int = 3
    hidden: tuple = (64, 64)
    substeps: int = 5
    init_spread: float = 0.2
    disturbance: str = "w1"
    multiplier_clip: float = 20.0
    beta_init: float = 0.0
    lambda_init: float = 0.0
    # "next": c_k is the cost of the state reached after a_k; "current": cost of s_k
    cost_timing: str = "next"
    # critic used for the bootstrap term of the TD target: "target" or "online"
    bootstrap: str = "target"
    # "set": a fresh reference drawn from the whole reference set every episode;
    # "selected": only the three selected references
    reference_mode: str = "set"
    eval_episodes: int = 2
    eval_seed: int = 12345
    ss_dwell_h: float = 2.5
    workers: int = 1
    checkpoint_every_eval: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self):
        if not 0 < self.gamma < 1:
            raise ConfigurationError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.alpha3 <= 0:
            raise ConfigurationError("alpha3 must be positive")
        if self.batch_size > self.buffer_size:
            raise ConfigurationError("batch_size cannot exceed buffer_size")
        if not 0 <= self.tau <= 1:
            raise ConfigurationError("tau must lie in [0, 1]")
        for name in ("dt",):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("n_steps", "buffer_size", "batch_size", "n_eps_interval", "n_subsystems", "substeps"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be at least 1")
        for name in ("n_eps_max", "n_update", "n_eps_min", "eval_episodes"):
            if int(getattr(self, name)) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        for name in ("lr_actor", "lr_critic", "lr_lagrange"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.cost_timing not in ("next", "current"):
            raise ConfigurationError("cost_timing must be 'next' or 'current'")
        if self.bootstrap not in ("target", "online"):
            raise ConfigurationError("bootstrap must be 'target' or 'online'")
        if self.reference_mode not in ("set", "selected"):
            raise ConfigurationError("reference_mode must be 'set' or 'selected'")
        if self.workers < 1:
            raise ConfigurationError("workers must be at least 1")

    def is_training_episode(self, j):
        """Episode ``j`` (1-based) is followed by an update block."""
        return j >= self.n_eps_min and j % self.n_eps_interval == 0

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        # YAML 1.1 reads ``5e-6`` as a string, so coerce scalars by field type
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        out = {}
        for k, v in data.items():
            cast = _CASTS.get(types[k])
            try:
                out[k] = cast(v) if cast is not None else v
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"config key {k!r}: cannot read {v!r} as {types[k]}") from exc
        return cls(**out)

    def replace(self, **changes) -> "TrainConfig":
        return self.from_dict({**self.to_dict(), **changes})


def _as_bool(v):
    if isinstance(v, str) and v.lower() in ("true", "false"):
        return v.lower() == "true"
    if isinstance(v, (bool, int)):
        return bool(v)
    raise ValueError(v)


def _as_int(v):
    if isinstance(v, bool) or float(v) != int(float(v)):
        raise ValueError(v)
    return int(float(v))


_CASTS = {"float": float, "int": _as_int, "str": str, "bool": _as_bool}


def _read_yaml(text, origin):
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{origin}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{origin}: expected a mapping at top level")
    return data


def preset_dict(name) -> dict:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("dlac.data").joinpath(f"{name}.yaml").read_text()
    data = _read_yaml(text, name)
    base = data.pop("base", None)
    return {**preset_dict(base), **data} if base else data


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    if path.suffix == ".json":
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: expected an object at top level")
        return data
    return _read_yaml(path.read_text(), path)


def load_config(path=None, preset=None, overrides=None, file_data=None) -> TrainConfig:
    """Merge preset, config file and explicit overrides, in that order.

    A config file may name a preset under ``base``.
    """
    data = preset_dict(preset) if preset else {}
    if file_data is None and path is not None:
        file_data = read_config_file(path)
    if file_data:
        file_data = dict(file_data)
        base = file_data.pop("base", None)
        if base and not preset:
            data = preset_dict(base)
        data.update(file_data)
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig.from_dict(data)


def save_config(cfg: TrainConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
