"""Dual-encoder knowledge fusion.

A query encoder and a document encoder share architecture but never
parameters. Relevance weights are a temperature-scaled softmax over raw
query-document dot products; the fused knowledge vector is the weighted sum
of document embeddings. Note the deliberate asymmetry kept from the method
being implemented: relevance uses unnormalized dot products while the
alignment loss and the relevance metric use cosine similarity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ParameterError, ValidationError
from .layers import (
    EMBED_STD,
    POS_STD,
    BlockParams,
    block_forward,
    embed_tokens,
    init_block,
    key_padding_mask,
    pad_batch,
)
from .text import PAD_ID


@dataclass
class Encoder:
    """Transformer encoder pooling a token sequence to one vector."""

    tok_emb: Tensor
    pos_emb: Tensor
    blocks: list[BlockParams]
    ln_g: Tensor
    ln_b: Tensor
    n_heads: int

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.tok_emb", self.tok_emb
        yield f"{prefix}.pos_emb", self.pos_emb
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"{prefix}.block{i}")
        yield f"{prefix}.ln_g", self.ln_g
        yield f"{prefix}.ln_b", self.ln_b

    @property
    def width(self) -> int:
        return self.tok_emb.shape[1]


def init_encoder(
    rng: np.random.Generator,
    vocab_size: int,
    dim: int,
    n_layers: int,
    n_heads: int,
    ff_mult: int,
    max_len: int,
    dtype: str = "float64",
) -> Encoder:
    dt = np.float64 if dtype == "float64" else np.float32
    return Encoder(
        tok_emb=Tensor(rng.normal(0.0, EMBED_STD, size=(vocab_size, dim)).astype(dt), requires_grad=True),
        pos_emb=Tensor(rng.normal(0.0, POS_STD, size=(max_len, dim)).astype(dt), requires_grad=True),
        blocks=[init_block(rng, dim, ff_mult, dtype) for _ in range(n_layers)],
        ln_g=Tensor(np.ones(dim, dtype=dt), requires_grad=True),
        ln_b=Tensor(np.zeros(dim, dtype=dt), requires_grad=True),
        n_heads=n_heads,
    )


def encode_batch(enc: Encoder, sequences: list[list[int]]) -> Tensor:
    """Encode a batch of token id sequences to [B, width] pooled vectors."""
    if not sequences:
        raise ValidationError("encode_batch requires at least one sequence")
    if any(len(s) == 0 for s in sequences):
        raise ValidationError("cannot encode an empty token sequence")
    ids, lengths = pad_batch(sequences, PAD_ID, max_len=enc.pos_emb.shape[0])
    mask = key_padding_mask(lengths, ids.shape[1])
    x = embed_tokens(enc.tok_emb, enc.pos_emb, ids)
    for blk in enc.blocks:
        x = block_forward(x, blk, enc.n_heads, mask)
    x = ad.layer_norm(x, enc.ln_g, enc.ln_b)
    # masked mean pool over real positions
    valid = (np.arange(ids.shape[1])[None, :] < lengths[:, None]).astype(x.data.dtype)
    pooled = ad.sum_(ad.mul(x, valid[:, :, None]), axis=1)
    return ad.mul(pooled, (1.0 / lengths)[:, None])


def encode_sequence(enc: Encoder, tokens: Sequence[int]) -> Tensor:
    """Encode one token sequence to a single pooled vector [width]."""
    if len(tokens) == 0:
        raise ValidationError("cannot encode an empty token sequence")
    return ad.reshape(encode_batch(enc, [list(tokens)]), (enc.width,))


def relevance_weights(h_q: Tensor, doc_vecs, tau: float) -> Tensor:
    """Softmax over query-document dot products scaled by 1/tau -> [N]."""
    if tau is None or tau <= 0:
        raise ParameterError(f"relevance temperature must be positive, got {tau}")
    docs = _stack_docs(doc_vecs)
    n, d = docs.shape
    if h_q.shape != (d,):
        raise DimensionError(f"query width {h_q.shape} does not match documents {docs.shape}")
    dots = ad.reshape(ad.matmul(ad.reshape(h_q, (1, d)), ad.swapaxes(docs, 0, 1)), (n,))
    return ad.softmax_with_temperature(dots, tau)


def fuse(alpha: Tensor, doc_vecs) -> Tensor:
    """Weighted sum of document embeddings -> [width]."""
    docs = _stack_docs(doc_vecs)
    n, d = docs.shape
    if alpha.shape != (n,):
        raise DimensionError(f"alpha has shape {alpha.shape} but there are {n} documents")
    return ad.reshape(ad.matmul(ad.reshape(alpha, (1, n)), docs), (d,))


def _stack_docs(doc_vecs) -> Tensor:
    if isinstance(doc_vecs, Tensor):
        if doc_vecs.ndim != 2 or doc_vecs.shape[0] < 1:
            raise DimensionError(f"expected [N, width] document matrix, got {doc_vecs.shape}")
        return doc_vecs
    doc_vecs = list(doc_vecs)
    if not doc_vecs:
        raise DimensionError("document list is empty")
    return ad.concat([ad.reshape(v, (1, v.shape[0])) for v in doc_vecs], axis=0)


@dataclass
class FusionResult:
    """Relevance weights, fused vector, and the ids of contributing documents."""

    alpha: Tensor
    k_fused: Tensor
    doc_ids: list = field(default_factory=list)


def fuse_documents(h_q: Tensor, doc_vecs, tau: float, doc_ids=None) -> FusionResult:
    alpha = relevance_weights(h_q, doc_vecs, tau)
    fused = fuse(alpha, doc_vecs)
    n = alpha.shape[0]
    return FusionResult(alpha=alpha, k_fused=fused, doc_ids=list(doc_ids) if doc_ids else list(range(n)))


def relevance_weights_batch(h_q: Tensor, h_docs: Tensor, tau: float) -> Tensor:
    """Batched weights: h_q [B, D], h_docs [B, N, D] -> alpha [B, N]."""
    if tau is None or tau <= 0:
        raise ParameterError(f"relevance temperature must be positive, got {tau}")
    b, d = h_q.shape
    dots = ad.reshape(ad.matmul(ad.reshape(h_q, (b, 1, d)), ad.swapaxes(h_docs, 1, 2)), (b, h_docs.shape[1]))
    return ad.softmax_with_temperature(dots, tau, axis=-1)


def fuse_batch(alpha: Tensor, h_docs: Tensor) -> Tensor:
    """Batched fusion: alpha [B, N], h_docs [B, N, D] -> [B, D]."""
    b, n = alpha.shape
    return ad.reshape(ad.matmul(ad.reshape(alpha, (b, 1, n)), h_docs), (b, h_docs.shape[2]))


def retrieve_top_n(query_vec, corpus_vecs, n: int) -> list[int]:
    """Indices of the n largest dot products, descending, ties to lowest index."""
    q = query_vec.data if isinstance(query_vec, Tensor) else np.asarray(query_vec, dtype=np.float64)
    c = corpus_vecs.data if isinstance(corpus_vecs, Tensor) else np.asarray(corpus_vecs, dtype=np.float64)
    if c.ndim != 2:
        raise DimensionError(f"corpus must be [N, width], got {c.shape}")
    if not 1 <= n <= c.shape[0]:
        raise ParameterError(f"cannot retrieve {n} documents from a corpus of {c.shape[0]}")
    scores = c @ q.ravel()
    order = np.argsort(-scores, kind="stable")  # stable keeps ties in index order
    return [int(i) for i in order[:n]]
