"""Gated injection of the fused knowledge vector into token representations.

Each timestep is gated independently (there is no recurrent state): an
update gate blends the token representation with a candidate state built
from the token and a reset-gated view of the knowledge vector:

    z_t = sigmoid(W_z [x_t; k] + b_z)
    r_t = sigmoid(W_r [x_t; k] + b_r)
    c_t = tanh(W_h [x_t; r_t * k] + b_h)
    h_t = (1 - z_t) * x_t + z_t * c_t

The reset gate has the knowledge width (it multiplies k elementwise), which
may differ from the token width. Weight matrices are stored [out, in],
matching the concatenation form above with x first and knowledge second.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ValidationError

GATE_WEIGHT_STD = 0.05


@dataclass
class GateParams:
    w_update: Tensor  # [d, d + d_k]
    w_reset: Tensor  # [d_k, d + d_k]
    w_cand: Tensor  # [d, d + d_k]
    b_update: Tensor | None = None  # [d]
    b_reset: Tensor | None = None  # [d_k]
    b_cand: Tensor | None = None  # [d]

    def __post_init__(self):
        d, total = self.w_update.shape
        d_k = total - d
        if self.w_reset.shape != (d_k, total):
            raise DimensionError(
                f"reset gate must be [{d_k}, {total}] so it can scale the knowledge vector, "
                f"got {self.w_reset.shape}"
            )
        if self.w_cand.shape != (d, total):
            raise DimensionError(f"candidate weights must be [{d}, {total}], got {self.w_cand.shape}")

    @property
    def token_width(self) -> int:
        return self.w_update.shape[0]

    @property
    def knowledge_width(self) -> int:
        return self.w_update.shape[1] - self.w_update.shape[0]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w_update", self.w_update
        yield f"{prefix}.w_reset", self.w_reset
        yield f"{prefix}.w_cand", self.w_cand
        for name in ("b_update", "b_reset", "b_cand"):
            t = getattr(self, name)
            if t is not None:
                yield f"{prefix}.{name}", t


def init_gate(
    rng: np.random.Generator, token_width: int, knowledge_width: int,
    bias: bool = True, dtype: str = "float64",
) -> GateParams:
    dt = np.float64 if dtype == "float64" else np.float32
    total = token_width + knowledge_width

    def w(rows):
        return Tensor(rng.normal(0.0, GATE_WEIGHT_STD, size=(rows, total)).astype(dt), requires_grad=True)

    def b(rows):
        return Tensor(np.zeros(rows, dtype=dt), requires_grad=True) if bias else None

    return GateParams(
        w_update=w(token_width), w_reset=w(knowledge_width), w_cand=w(token_width),
        b_update=b(token_width), b_reset=b(knowledge_width), b_cand=b(token_width),
    )


@dataclass
class GateTrace:
    """Per-timestep gate activations kept for regularization and tests."""

    z: Tensor  # [B, T, d] update gate
    r: Tensor  # [B, T, d_k] reset gate
    valid: np.ndarray | None = None  # [B, T] 1.0 for real positions

    def mean_update_activation(self) -> float:
        zv = self.z.data
        if self.valid is None:
            return float(zv.mean())
        w = self.valid[:, :, None]
        return float((zv * w).sum() / (w.sum() * zv.shape[-1]))

    def per_step_mean(self) -> np.ndarray:
        """Mean update-gate activation per timestep (over the width axis)."""
        return self.z.data.mean(axis=-1)

    def check(self) -> None:
        for name, t in (("update", self.z), ("reset", self.r)):
            v = t.data if self.valid is None else t.data[self.valid.astype(bool)]
            if v.size and not ((v > 0.0).all() and (v < 1.0).all()):
                raise ValidationError(f"{name} gate activations left the open interval (0, 1)")


def apply_gate(x: Tensor, k: Tensor, params: GateParams, valid: np.ndarray | None = None) -> tuple[Tensor, GateTrace]:
    """Gate a batch of sequences: x [B, T, d], k [B, d_k] -> ([B, T, d], trace)."""
    b, t, d = x.shape
    if t < 1:
        raise DimensionError("cannot gate an empty sequence")
    if d != params.token_width or k.shape != (b, params.knowledge_width):
        raise DimensionError(
            f"gate sized for token width {params.token_width} and knowledge width "
            f"{params.knowledge_width}, got x {x.shape} and k {k.shape}"
        )
    k_rep = ad.broadcast_to(ad.reshape(k, (b, 1, k.shape[1])), (b, t, k.shape[1]))
    xk = ad.concat([x, k_rep], axis=-1)
    z = _gate_linear(xk, params.w_update, params.b_update, sigmoid=True)
    r = _gate_linear(xk, params.w_reset, params.b_reset, sigmoid=True)
    xrk = ad.concat([x, ad.mul(r, k_rep)], axis=-1)
    cand = _gate_linear(xrk, params.w_cand, params.b_cand, sigmoid=False)
    h = ad.add(ad.mul(ad.sub(1.0, z), x), ad.mul(z, cand))
    return h, GateTrace(z=z, r=r, valid=valid)


def _gate_linear(x: Tensor, w: Tensor, b: Tensor | None, sigmoid: bool) -> Tensor:
    y = ad.matmul(x, ad.swapaxes(w, 0, 1))
    if b is not None:
        y = ad.add(y, b)
    return ad.sigmoid(y) if sigmoid else ad.tanh(y)


def knowledge_gate_step(x_t: Tensor, k: Tensor, params: GateParams) -> tuple[Tensor, Tensor, Tensor]:
    """Single-timestep form on vectors: returns (h_t, z_t, r_t)."""
    if x_t.shape != (params.token_width,) or k.shape != (params.knowledge_width,):
        raise DimensionError(
            f"expected x [{params.token_width}] and k [{params.knowledge_width}], "
            f"got {x_t.shape} and {k.shape}"
        )
    h, trace = apply_gate(
        ad.reshape(x_t, (1, 1, x_t.shape[0])), ad.reshape(k, (1, k.shape[0])), params
    )
    d, d_k = params.token_width, params.knowledge_width
    return ad.reshape(h, (d,)), ad.reshape(trace.z, (d,)), ad.reshape(trace.r, (d_k,))


def knowledge_gate_sequence(x: Tensor, k: Tensor, params: GateParams) -> tuple[Tensor, GateTrace]:
    """Sequence form on [T, d] with a shared knowledge vector [d_k]."""
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"expected a nonempty [T, d] sequence, got {x.shape}")
    t, d = x.shape
    h, trace = apply_gate(ad.reshape(x, (1, t, d)), ad.reshape(k, (1, k.shape[0])), params)
    squeezed = GateTrace(
        z=ad.reshape(trace.z, (t, d)),
        r=ad.reshape(trace.r, (t, params.knowledge_width)),
    )
    return ad.reshape(h, (t, d)), squeezed
