"""Safety-aware decoding: pooled pre-check, per-token signal, logit penalty.

Before generating, the mean of the context hidden states feeds a linear
probe giving an utterance-level rejection probability; during generation
each step's hidden state feeds a second probe. Whenever either signal
crosses its threshold, a learned vocabulary mask scaled by lambda is
subtracted from the logits:

    modulated = logits - lambda * (I[pre fired] + I[step fired]) * mask

Two refusal policies exist: "soft-penalize" (default) keeps decoding with
the pre-check indicator latched; "hard-refuse" emits the rejection token
immediately when the pre-check fires.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Backbone, forward
from .errors import CapacityError, DimensionError, ParameterError, ValidationError
from .gating import GateParams
from .text import EOS_ID, REJECT_ID

HEAD_STD = 0.02


@dataclass
class SafetyHeads:
    """Linear safety probes, the vocabulary penalty mask, and thresholds."""

    w_pre: Tensor  # [d] utterance-level probe
    w_tok: Tensor  # [d] per-step probe
    mask: Tensor  # [V] learned penalty direction
    lambda_safe: float = 5.0
    tau_pre: float = 0.5
    tau_tok: float = 0.5

    def __post_init__(self):
        if self.lambda_safe < 0:
            raise ParameterError(f"lambda_safe must be nonnegative, got {self.lambda_safe}")
        for name in ("tau_pre", "tau_tok"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ParameterError(f"{name} must lie strictly in (0, 1), got {v}")
        for name in ("w_pre", "w_tok", "mask"):
            if not np.isfinite(getattr(self, name).data).all():
                raise ValidationError(f"safety head {name} contains non-finite values")

    def named(self, prefix: str = "safety") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w_pre", self.w_pre
        yield f"{prefix}.w_tok", self.w_tok
        yield f"{prefix}.mask", self.mask


def init_heads(
    rng: np.random.Generator,
    dim: int,
    vocab_size: int,
    unsafe_token_ids: Sequence[int],
    lambda_safe: float,
    tau_pre: float,
    tau_tok: float,
    dtype: str = "float64",
) -> SafetyHeads:
    """Fresh probes; the mask starts at +1 on the configured unsafe lexicon
    so the penalty points somewhere meaningful before any gradient reaches it."""
    dt = np.float64 if dtype == "float64" else np.float32
    mask = np.zeros(vocab_size, dtype=dt)
    for tok_id in unsafe_token_ids:
        mask[tok_id] = 1.0
    return SafetyHeads(
        w_pre=Tensor(rng.normal(0.0, HEAD_STD, size=dim).astype(dt), requires_grad=True),
        w_tok=Tensor(rng.normal(0.0, HEAD_STD, size=dim).astype(dt), requires_grad=True),
        mask=Tensor(mask, requires_grad=True),
        lambda_safe=lambda_safe,
        tau_pre=tau_pre,
        tau_tok=tau_tok,
    )


def pool_context(hidden: Tensor, t_ctx: int) -> Tensor:
    """Mean of the first t_ctx rows of [T, d] hidden states."""
    if hidden.ndim != 2:
        raise DimensionError(f"pool_context expects [T, d] hidden states, got {hidden.shape}")
    t, d = hidden.shape
    if not 1 <= t_ctx <= t:
        raise DimensionError(f"t_ctx must lie in [1, {t}], got {t_ctx}")
    sel = np.zeros((1, t))
    sel[0, :t_ctx] = 1.0 / t_ctx
    return ad.reshape(ad.matmul(Tensor(sel), hidden), (d,))


def _probe(h: Tensor, w: Tensor) -> Tensor:
    if h.shape != w.shape:
        raise DimensionError(f"probe width {w.shape} does not match state {h.shape}")
    d = h.shape[0]
    return ad.reshape(ad.sigmoid(ad.matmul(ad.reshape(h, (1, d)), ad.reshape(w, (d, 1)))), ())


def pre_reject_prob(h_pool: Tensor, heads: SafetyHeads) -> Tensor:
    """Utterance-level rejection probability sigma(w_pre . h_pool), scalar."""
    return _probe(h_pool, heads.w_pre)


def token_reject_prob(h_t: Tensor, heads: SafetyHeads) -> Tensor:
    """Per-step rejection probability sigma(w_tok . h_t), scalar."""
    return _probe(h_t, heads.w_tok)


def modulate_logits(o_t: Tensor, pre_fired: bool, tok_fired: bool, heads: SafetyHeads) -> Tensor:
    """Subtract lambda * (#fired indicators) * mask from one logit row."""
    if o_t.shape != heads.mask.shape:
        raise DimensionError(f"logits {o_t.shape} do not match mask {heads.mask.shape}")
    multiplier = heads.lambda_safe * (int(bool(pre_fired)) + int(bool(tok_fired)))
    if multiplier == 0.0:
        return o_t
    return ad.sub(o_t, ad.mul(heads.mask, multiplier))


@dataclass
class StepTrace:
    """One decoding step: token-level probability, indicator, applied multiplier."""

    p_rej: float | None
    tok_fired: bool
    penalty_multiplier: float

    def to_dict(self) -> dict:
        return {"p_rej": self.p_rej, "tok_fired": self.tok_fired,
                "penalty_multiplier": self.penalty_multiplier}


@dataclass
class SafetyTrace:
    """Safety record of one generation call; one step entry per emitted token."""

    p_pre: float | None = None
    pre_fired: bool = False
    steps: list[StepTrace] = field(default_factory=list)
    rejected: bool = False

    def to_dict(self) -> dict:
        return {
            "p_pre": self.p_pre,
            "pre_fired": self.pre_fired,
            "rejected": self.rejected,
            "steps": [s.to_dict() for s in self.steps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SafetyTrace":
        return cls(
            p_pre=d["p_pre"],
            pre_fired=d["pre_fired"],
            rejected=d["rejected"],
            steps=[StepTrace(**s) for s in d["steps"]],
        )


def generate(
    bb: Backbone,
    prompt: Sequence[int],
    max_steps: int,
    heads: SafetyHeads | None = None,
    k_fused: Tensor | None = None,
    gate: GateParams | None = None,
    policy: str = "soft-penalize",
) -> tuple[list[int], SafetyTrace]:
    """Greedy decoding with the two-stage safety signal.

    Runs the pre-check once on the pooled prompt states, then decodes up to
    max_steps tokens, re-running the forward pass per step (no cache) and
    modulating each logit row by the fired indicators. Ties in the argmax
    break toward the lowest token id. Stops at <EOS>.
    """
    prompt = list(prompt)
    if len(prompt) + max_steps > bb.max_seq_len:
        raise CapacityError(
            f"prompt of {len(prompt)} plus {max_steps} generation steps exceeds "
            f"the maximum sequence length {bb.max_seq_len}"
        )
    if policy not in ("soft-penalize", "hard-refuse"):
        raise ParameterError(f"unknown refusal policy {policy!r}")

    trace = SafetyTrace()
    hidden, logits, _ = forward(bb, prompt, k_fused, gate)
    if heads is not None:
        h_pool = pool_context(hidden, len(prompt))
        trace.p_pre = float(pre_reject_prob(h_pool, heads).data)
        trace.pre_fired = trace.p_pre > heads.tau_pre

    if heads is not None and policy == "hard-refuse" and trace.pre_fired:
        trace.rejected = True
        trace.steps = [StepTrace(None, False, 0.0), StepTrace(None, False, 0.0)]
        return [REJECT_ID, EOS_ID], trace

    out: list[int] = []
    seq = prompt
    for _ in range(max_steps):
        if out:
            hidden, logits, _ = forward(bb, seq, k_fused, gate)
        last_hidden = Tensor(hidden.data[-1])
        row = Tensor(logits.data[-1].copy())
        if heads is not None:
            p_rej = float(token_reject_prob(last_hidden, heads).data)
            tok_fired = p_rej > heads.tau_tok
            row = modulate_logits(row, trace.pre_fired, tok_fired, heads)
            multiplier = heads.lambda_safe * (int(trace.pre_fired) + int(tok_fired))
            trace.steps.append(StepTrace(p_rej, tok_fired, multiplier))
        else:
            trace.steps.append(StepTrace(None, False, 0.0))
        next_id = int(np.argmax(row.data))  # first occurrence = lowest id on ties
        out.append(next_id)
        seq = seq + [next_id]
        if next_id == EOS_ID:
            break
    trace.rejected = bool(out) and out[0] == REJECT_ID
    return out, trace
