"""Run configuration: one flat, strictly validated JSON document."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .meta import ALGORITHMS, ELBO_COVARIATES, MetaConfig
from .nets import ENCODER_INPUTS, Architecture
from .taskgen import DEPENDENCE, VARIANTS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    algorithm: str = "ours"
    variant: str = "sine-quad-linear"
    dependence: str = "dependent"
    data_seed: int = 0
    model_seed: int = 1
    train_seed: int = 2
    eval_seed: int = 1000
    n_tasks: int = 10000
    batch_size: int = 25
    epochs: int = 10
    inner_steps: int = 5
    inner_lr: float = 0.0001
    outer_lr: float = 0.001
    alpha_r: float = 0.2
    alpha_kl: float = 0.1
    alpha_l2: float = 0.0005
    first_order: bool = False
    elbo_covariates: str = "query"
    encoder_input: str = "covariates"
    gates_frozen: bool = False
    encoder_bypass: bool = False
    reptile_step: float = 0.1
    grad_clip: float = 100.0
    hidden: tuple = (100, 100, 100)
    bias_transform: int = 20
    latent: int = 28
    decoder_hidden: int = 32
    input_scale: float = 10.0
    n_support: int = 5
    n_query: int = 5
    eval_tasks: int = 1000
    eval_support: int = 5
    eval_query: int = 100
    checkpoint_every: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        for f in fields(self):
            v = getattr(self, f.name)
            t = f.type if isinstance(f.type, str) else f.type.__name__
            if t == "int" and (isinstance(v, bool) or not isinstance(v, int)):
                raise ConfigError(f"{f.name} must be an integer, got {v!r}")
            if t == "float":
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError(f"{f.name} must be a number, got {v!r}")
                object.__setattr__(self, f.name, float(v))
            if t == "bool" and not isinstance(v, bool):
                raise ConfigError(f"{f.name} must be true or false, got {v!r}")
            if t == "str" and not isinstance(v, str):
                raise ConfigError(f"{f.name} must be a string, got {v!r}")
        _choice("algorithm", self.algorithm, ALGORITHMS)
        _choice("variant", self.variant, tuple(VARIANTS))
        _choice("dependence", self.dependence, DEPENDENCE)
        _choice("elbo_covariates", self.elbo_covariates, ELBO_COVARIATES)
        _choice("encoder_input", self.encoder_input, ENCODER_INPUTS)
        for name in ("n_tasks", "batch_size", "epochs", "n_support", "n_query",
                     "eval_tasks", "eval_support", "eval_query"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.eval_seed == self.data_seed:
            raise ConfigError("eval_seed must differ from data_seed")
        try:
            self.architecture()
            self.meta_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def architecture(self) -> Architecture:
        return Architecture(self.hidden, self.bias_transform, self.latent, self.decoder_hidden,
                            self.encoder_input, self.input_scale)

    def meta_config(self) -> MetaConfig:
        return MetaConfig(self.algorithm, self.inner_steps, self.inner_lr, self.outer_lr,
                          self.alpha_r, self.alpha_kl, self.alpha_l2, self.first_order,
                          self.elbo_covariates, self.gates_frozen, self.encoder_bypass,
                          self.reptile_step, self.grad_clip)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        if "hidden" in d:
            if not isinstance(d["hidden"], (list, tuple)) or not all(
                    isinstance(h, int) and not isinstance(h, bool) for h in d["hidden"]):
                raise ConfigError("hidden must be a list of integers")
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


ALGORITHM_DEFAULTS = {
    "ours": {},
    "maml": {"alpha_r": 0.0, "alpha_kl": 0.0},
    "reptile": {"alpha_r": 0.0, "alpha_kl": 0.0},
    "mmaml-lite": {"alpha_r": 0.0, "alpha_kl": 0.0, "encoder_input": "pairs"},
}


def preset_config(algorithm: str, **overrides) -> RunConfig:
    """Default config for ``algorithm`` with its preset-specific settings applied."""
    if algorithm not in ALGORITHM_DEFAULTS:
        raise ConfigError(f"unknown algorithm {algorithm!r}")
    return RunConfig(**dict(ALGORITHM_DEFAULTS[algorithm], algorithm=algorithm, **overrides))


def _choice(name, value, allowed):
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {', '.join(allowed)}; got {value!r}")
