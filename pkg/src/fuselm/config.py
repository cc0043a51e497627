"""Model and training configuration.

Desk-scale defaults: the whole model trains in minutes on one CPU core.
A full-scale deployment of this architecture would sit on a pretrained
multi-billion-parameter decoder with adapter fine-tuning (reference setup:
batch size 32, learning rate 2e-5 on multi-GPU hardware); those values are
recorded here for context only and are deliberately not the defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigurationError
from .text import DEFAULT_PREAMBLE

REFUSAL_POLICIES = ("soft-penalize", "hard-refuse")


@dataclass
class ModelConfig:
    # architecture extents
    vocab_size: int = 84  # len(Vocabulary.default()); overwritten when a vocab is supplied
    dim: int = 32  # backbone width
    enc_dim: int = 32  # knowledge/query encoder width
    n_layers: int = 2  # backbone decoder blocks
    n_enc_layers: int = 2  # encoder blocks
    n_heads: int = 2
    ff_mult: int = 4  # feed-forward width multiplier
    max_seq_len: int = 256  # hard cap on prompt + generation
    max_gen_steps: int = 16  # decoding horizon

    # fusion and alignment temperatures (distinct hyperparameters)
    fusion_temperature: float = 0.05  # relevance softmax over query-doc dot products
    align_temperature: float = 0.1  # contrastive loss over cosine similarities

    # objective weights: total = lm + safe_weight*safe + align_weight*align + gate_weight*gate
    safe_weight: float = 1.0
    align_weight: float = 1.0
    gate_weight: float = 0.01
    normalize_gate_loss: bool = True  # divide the gate L1 by timesteps*width

    # safety-aware decoding
    lambda_safe: float = 5.0
    tau_pre: float = 0.5
    tau_tok: float = 0.5
    refusal_policy: str = "soft-penalize"

    # gating
    gate_bias: bool = True  # biases recover gate-forcing tests; off gives the literal equations

    # optimizer (Adam)
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    # training loop
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    checkpoint_every: int = 0  # 0 = only at the end

    # component switches (ablation ladder)
    use_fusion: bool = True  # knowledge encoders, relevance weighting, docs in prompt
    use_gate: bool = True  # gated injection of the fused knowledge vector
    use_safety: bool = True  # safety heads, logit modulation, safety loss

    # text
    preamble: str = DEFAULT_PREAMBLE

    # numerics: float64 is the verified precision; float32 is a speed option
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.use_gate and not self.use_fusion:
            raise ConfigurationError("use_gate requires use_fusion: the gate consumes the fused vector")
        for name in ("fusion_temperature", "align_temperature"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("safe_weight", "align_weight", "gate_weight", "lambda_safe"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        for name in ("tau_pre", "tau_tok"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigurationError(f"{name} must lie strictly in (0, 1)")
        if self.refusal_policy not in REFUSAL_POLICIES:
            raise ConfigurationError(
                f"refusal_policy must be one of {REFUSAL_POLICIES}, got {self.refusal_policy!r}"
            )
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError(f"dtype must be float64 or float32, got {self.dtype!r}")
        for name in ("vocab_size", "dim", "enc_dim", "n_layers", "n_enc_layers",
                     "n_heads", "ff_mult", "max_seq_len", "max_gen_steps", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1")
        if self.dim % self.n_heads or self.enc_dim % self.n_heads:
            raise ConfigurationError("dim and enc_dim must be divisible by n_heads")
        if self.steps < 0:
            raise ConfigurationError("steps must be nonnegative")

    def with_overrides(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json_file(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"config file {path} is not valid JSON: {e.msg}") from e
        return cls.from_dict(data)
