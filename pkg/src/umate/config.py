"""Run configuration: model sizes, schedule, loss weights, optimizer, seeds."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

import yaml

from .errors import ContractViolation, FormatError


@dataclass
class Config:
    # token space
    d: int = 32
    kappa: int = 64
    n_max: int = 20
    m: int = 3
    # tokenizer
    gcn_layers: int = 3
    mlp_depth: int = 3
    mlp_act: str = "tanh"
    dec_layers: int = 2
    dec_heads: int = 4
    dec_positional: bool = True
    adj_norm: str = "self_loop"  # "self_loop" (A + I, row-normalized) or "raw"
    adj_feature: str = "latent"  # cosine on decoder features, or "coords"
    theta_edge: float = 0.5
    restart_dead: bool = True
    detach_encoder_residual: bool = True
    detach_gen_tokens: bool = True
    # diffusion backbone and schedule
    backbone_layers: int = 2
    backbone_heads: int = 4
    ff_mult: int = 2
    positional: bool = True
    denoise_gain: float | None = 5.0
    sigma_max: float = 1.0
    sigma_min: float = 0.01
    n_levels: int = 10
    steps_per_level: int = 2
    eps_step: float = 2e-5
    train_noise: float = 1.0
    literal_update: bool = False
    grad_truncate: int | None = None
    # loss weights
    alpha_T: float = 1.0
    alpha_rho: float = 1.0
    alpha_p: float = 1.0
    alpha_w: float = 0.1
    lambda_align: float = 1.0
    lambda_gen: float = 1.0
    # transport
    ot_eps: float = 0.05
    ot_tol: float = 1e-6
    ot_max_iter: int = 500
    ot_unroll: int = 25
    cost_mode: str = "cos"
    # optimization
    batch_size: int = 16
    epochs: int = 100
    lr: float = 1e-3
    seed: int = 0
    split: list = field(default_factory=lambda: [0.7, 0.15, 0.15])

    def __post_init__(self):
        self._coerce_numbers()
        self.validate()

    def _coerce_numbers(self):
        # YAML 1.1 reads exponent literals without a dot ("1e-07") as strings
        for f in fields(self):
            value, default = getattr(self, f.name), f.default
            if isinstance(default, bool) or not isinstance(default, (int, float)):
                continue
            if value is None and "None" in str(f.type):
                continue
            if isinstance(value, bool) or not isinstance(value, (int, float, str)):
                raise ContractViolation(f"config.{f.name} must be a number, got {value!r}")
            if isinstance(value, str):
                try:
                    value = float(value)
                except ValueError:
                    raise ContractViolation(f"config.{f.name} must be a number, got {value!r}") from None
            if isinstance(default, int) and not isinstance(default, bool):
                if float(value) != int(value):
                    raise ContractViolation(f"config.{f.name} must be an integer, got {value!r}")
                value = int(value)
            setattr(self, f.name, value)

    def validate(self):
        positive = ("d", "kappa", "n_max", "m", "gcn_layers", "mlp_depth", "dec_layers",
                    "dec_heads", "backbone_layers", "backbone_heads", "ff_mult", "n_levels",
                    "steps_per_level", "batch_size", "ot_max_iter", "sigma_max", "sigma_min",
                    "eps_step", "train_noise", "ot_eps", "ot_tol", "lr")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ContractViolation(f"config.{name} must be positive")
        for name in ("alpha_T", "alpha_rho", "alpha_p", "alpha_w", "lambda_align",
                     "lambda_gen", "theta_edge", "ot_unroll", "epochs"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"config.{name} must be >= 0")
        if self.denoise_gain is not None and not self.denoise_gain > 0:
            raise ContractViolation("config.denoise_gain must be positive or null")
        if self.sigma_min >= self.sigma_max:
            raise ContractViolation("sigma_min must be below sigma_max")
        if self.d % self.dec_heads or self.d % self.backbone_heads:
            raise ContractViolation("head counts must divide d")
        if self.cost_mode not in ("cos", "1-cos"):
            raise ContractViolation("cost_mode must be 'cos' or '1-cos'")
        if self.mlp_act not in ("sigmoid", "tanh", "silu"):
            raise ContractViolation("mlp_act must be 'sigmoid', 'tanh' or 'silu'")
        if self.adj_norm not in ("self_loop", "raw"):
            raise ContractViolation("adj_norm must be 'self_loop' or 'raw'")
        if self.adj_feature not in ("latent", "coords"):
            raise ContractViolation("adj_feature must be 'latent' or 'coords'")

    @property
    def h_max(self):
        return self.n_max + 1 + self.m

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        flat = {}
        for key, value in (d or {}).items():
            # nested sections are accepted and flattened: {"loss": {"alpha_w": 0.1}}
            if isinstance(value, dict) and key not in names:
                flat.update(value)
            else:
                flat[key] = value
        unknown = set(flat) - names
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        return cls(**flat)


def load_config(path=None, overrides=None):
    """YAML/JSON config file, then explicit overrides, then UMATE_SEED."""
    data = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise FormatError(f"cannot parse config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise FormatError(f"config {path} must be a mapping")
    cfg = Config.from_dict({**data, **(overrides or {})})
    env_seed = os.environ.get("UMATE_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)
    return cfg


def dump_config(cfg):
    return json.dumps(cfg.to_dict(), sort_keys=True)
