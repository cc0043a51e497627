"""Shared transformer building blocks for the encoders and the backbone.

Pre-norm residual blocks: x + attn(ln(x)), then x + ff(ln(x)). Attention is
multi-head scaled dot product; masks are additive constants (0 for visible,
MASK_VALUE for hidden). Weight matrices are stored [in, out] so activations
flow as x @ w + b.

Initialization keeps residual branches small relative to the token
embeddings, so a freshly initialized encoder pools to roughly a
bag-of-characters vector; that makes untrained embedding geometry
content-driven rather than an artifact of deep random mixing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import MASK_VALUE, Tensor
from .errors import CapacityError, DimensionError

EMBED_STD = 0.1
POS_STD = 0.01
WEIGHT_STD = 0.02
RESIDUAL_STD = 0.005


def _dtype(name: str):
    return np.float64 if name == "float64" else np.float32


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for field_name in ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo",
                           "ln2_g", "ln2_b", "ff1_w", "ff1_b", "ff2_w", "ff2_b"):
            yield f"{prefix}.{field_name}", getattr(self, field_name)


def init_block(rng: np.random.Generator, dim: int, ff_mult: int, dtype: str) -> BlockParams:
    dt = _dtype(dtype)

    def w(n_in, n_out, std):
        return Tensor(rng.normal(0.0, std, size=(n_in, n_out)).astype(dt), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n, dtype=dt), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n, dtype=dt), requires_grad=True)

    return BlockParams(
        ln1_g=ones(dim),
        ln1_b=zeros(dim),
        wq=w(dim, dim, WEIGHT_STD),
        wk=w(dim, dim, WEIGHT_STD),
        wv=w(dim, dim, WEIGHT_STD),
        wo=w(dim, dim, RESIDUAL_STD),
        ln2_g=ones(dim),
        ln2_b=zeros(dim),
        ff1_w=w(dim, ff_mult * dim, WEIGHT_STD),
        ff1_b=zeros(ff_mult * dim),
        ff2_w=w(ff_mult * dim, dim, RESIDUAL_STD),
        ff2_b=zeros(dim),
    )


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return ad.swapaxes(ad.reshape(x, (b, t, n_heads, d // n_heads)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ad.reshape(ad.swapaxes(x, 1, 2), (b, t, h * dh))


def attention(x: Tensor, p: BlockParams, n_heads: int, mask: np.ndarray | None) -> Tensor:
    """Multi-head attention over x: [B, T, D] -> [B, T, D].

    mask broadcasts against [B, H, T, T] score arrays; pass the causal or
    key-padding mask as an additive constant.
    """
    d = x.shape[-1]
    q = _split_heads(ad.matmul(x, p.wq), n_heads)
    k = _split_heads(ad.matmul(x, p.wk), n_heads)
    v = _split_heads(ad.matmul(x, p.wv), n_heads)
    scale = 1.0 / np.sqrt(d // n_heads)
    scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), scale)
    if mask is not None:
        scores = ad.add(scores, mask)
    weights = ad.softmax(scores, axis=-1)
    mixed = _merge_heads(ad.matmul(weights, v))
    return ad.matmul(mixed, p.wo)


def feed_forward(x: Tensor, p: BlockParams) -> Tensor:
    return ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(x, p.ff1_w), p.ff1_b)), p.ff2_w), p.ff2_b)


def block_forward(x: Tensor, p: BlockParams, n_heads: int, mask: np.ndarray | None) -> Tensor:
    x = ad.add(x, attention(ad.layer_norm(x, p.ln1_g, p.ln1_b), p, n_heads, mask))
    x = ad.add(x, feed_forward(ad.layer_norm(x, p.ln2_g, p.ln2_b)))
    return x


def causal_mask(t: int) -> np.ndarray:
    """Additive [1, 1, T, T] mask hiding future positions."""
    m = np.zeros((1, 1, t, t))
    m[:, :, np.triu_indices(t, k=1)[0], np.triu_indices(t, k=1)[1]] = MASK_VALUE
    return m


def key_padding_mask(lengths: np.ndarray, t: int) -> np.ndarray:
    """Additive [B, 1, 1, T] mask hiding padded key positions."""
    cols = np.arange(t)[None, :]
    hidden = cols >= np.asarray(lengths)[:, None]
    return np.where(hidden, MASK_VALUE, 0.0)[:, None, None, :]


def pad_batch(sequences: list[list[int]], pad_id: int, max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token id lists into [B, T] plus a lengths vector."""
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    t = int(lengths.max())
    if max_len is not None and t > max_len:
        raise CapacityError(f"sequence of length {t} exceeds the maximum of {max_len}")
    ids = np.full((len(sequences), t), pad_id, dtype=np.int64)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
    return ids, lengths


def embed_tokens(tok_emb: Tensor, pos_emb: Tensor, ids: np.ndarray) -> Tensor:
    t = ids.shape[-1]
    if t > pos_emb.shape[0]:
        raise CapacityError(f"sequence of length {t} exceeds positional table of {pos_emb.shape[0]}")
    if ids.max(initial=0) >= tok_emb.shape[0]:
        raise DimensionError(
            f"token id {int(ids.max())} outside embedding table of {tok_emb.shape[0]} rows"
        )
    return ad.add(ad.embedding(tok_emb, ids), ad.embedding(pos_emb, np.arange(t)))
