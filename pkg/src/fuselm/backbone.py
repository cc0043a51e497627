"""Decoder-only transformer language model.

Embedding -> optional knowledge gate -> causal pre-norm blocks -> final
layer norm -> output projection. The gate, when supplied, is applied once to
the embedded token sequence before the first block; when the knowledge
vector is absent the gate is bypassed entirely, so a gateless run is
bit-identical to a build without the gate parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CapacityError
from .gating import GateParams, GateTrace, apply_gate
from .layers import (
    EMBED_STD,
    POS_STD,
    BlockParams,
    block_forward,
    causal_mask,
    embed_tokens,
    init_block,
)


@dataclass
class Backbone:
    tok_emb: Tensor  # [V, d]
    pos_emb: Tensor  # [T_max, d]
    blocks: list[BlockParams]
    ln_g: Tensor
    ln_b: Tensor
    out_proj: Tensor  # [d, V]
    n_heads: int

    def named(self, prefix: str = "backbone") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.tok_emb", self.tok_emb
        yield f"{prefix}.pos_emb", self.pos_emb
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"{prefix}.block{i}")
        yield f"{prefix}.ln_g", self.ln_g
        yield f"{prefix}.ln_b", self.ln_b
        yield f"{prefix}.out_proj", self.out_proj

    @property
    def width(self) -> int:
        return self.tok_emb.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.tok_emb.shape[0]

    @property
    def max_seq_len(self) -> int:
        return self.pos_emb.shape[0]


WEIGHT_OUT_STD = 0.02


def init_backbone(
    rng: np.random.Generator,
    vocab_size: int,
    dim: int,
    n_layers: int,
    n_heads: int,
    ff_mult: int,
    max_seq_len: int,
    dtype: str = "float64",
) -> Backbone:
    dt = np.float64 if dtype == "float64" else np.float32
    return Backbone(
        tok_emb=Tensor(rng.normal(0.0, EMBED_STD, size=(vocab_size, dim)).astype(dt), requires_grad=True),
        pos_emb=Tensor(rng.normal(0.0, POS_STD, size=(max_seq_len, dim)).astype(dt), requires_grad=True),
        blocks=[init_block(rng, dim, ff_mult, dtype) for _ in range(n_layers)],
        ln_g=Tensor(np.ones(dim, dtype=dt), requires_grad=True),
        ln_b=Tensor(np.zeros(dim, dtype=dt), requires_grad=True),
        out_proj=Tensor(rng.normal(0.0, WEIGHT_OUT_STD, size=(dim, vocab_size)).astype(dt), requires_grad=True),
        n_heads=n_heads,
    )


def forward_batch(
    bb: Backbone,
    ids: np.ndarray,
    k_fused: Tensor | None = None,
    gate: GateParams | None = None,
    valid: np.ndarray | None = None,
) -> tuple[Tensor, Tensor, GateTrace | None]:
    """Run the model on [B, T] token ids.

    Returns (hidden [B, T, d], logits [B, T, V], gate trace or None). The
    knowledge vector is injected only when both k_fused and gate are given.
    """
    b, t = ids.shape
    if t > bb.max_seq_len:
        raise CapacityError(f"sequence of length {t} exceeds the maximum of {bb.max_seq_len}")
    x = embed_tokens(bb.tok_emb, bb.pos_emb, ids)
    trace = None
    if k_fused is not None and gate is not None:
        x, trace = apply_gate(x, k_fused, gate, valid=valid)
    mask = causal_mask(t)
    for blk in bb.blocks:
        x = block_forward(x, blk, bb.n_heads, mask)
    hidden = ad.layer_norm(x, bb.ln_g, bb.ln_b)
    logits = ad.matmul(hidden, bb.out_proj)
    return hidden, logits, trace


def forward(
    bb: Backbone,
    tokens: Sequence[int],
    k_fused: Tensor | None = None,
    gate: GateParams | None = None,
) -> tuple[Tensor, Tensor, GateTrace | None]:
    """Single-sequence forward: returns (hidden [T, d], logits [T, V], trace)."""
    if len(tokens) == 0:
        raise CapacityError("cannot run the model on an empty sequence")
    ids = np.asarray(list(tokens), dtype=np.int64)[None, :]
    k = None
    if k_fused is not None and gate is not None:
        k = ad.reshape(k_fused, (1, k_fused.shape[0]))
    hidden, logits, trace = forward_batch(bb, ids, k, gate)
    t = ids.shape[1]
    hidden2 = ad.reshape(hidden, (t, bb.width))
    logits2 = ad.reshape(logits, (t, bb.vocab_size))
    if trace is not None:
        trace = GateTrace(
            z=ad.reshape(trace.z, (t, trace.z.shape[2])),
            r=ad.reshape(trace.r, (t, trace.r.shape[2])),
        )
    return hidden2, logits2, trace
