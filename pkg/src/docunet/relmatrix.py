"""Assembly of the N x N x D entity-pair feature matrix.

Entities are placed in first-appearance order; the square is padded with
zeros up to the configured capacity N, and a channel-reducing affine map
turns the raw pair features into the (much thinner) input the segmentation
network consumes. Padding cells stay exactly zero through the reduction:
the affine bias is masked off outside the populated n x n block.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import (
    EncodedDoc,
    context_features,
    entity_attention,
    entity_pool,
    pair_attention,
    similarity_features,
)
from .errors import DataError, ShapeError
from .tensor import Tensor

DUMP_MAGIC = b"DUNF"


@dataclass
class RelationMatrixF:
    values: Tensor          # [N, N, D]
    n_entities: int
    strategy: str


def build_matrix(enc: EncodedDoc, entities: list[int], strategy: str,
                 capacity: int, w1: Tensor | None = None,
                 w2: Tensor | None = None, b2: Tensor | None = None,
                 literal_sim: bool = False,
                 embeddings: list[Tensor] | None = None) -> RelationMatrixF:
    """Pair features for every ordered entity pair, zero-padded to capacity.

    ``entities`` lists document entity ids in matrix (first-appearance)
    order; cell (s, o) holds the feature vector of the ordered pair,
    diagonal included. Pooled embeddings are computed on demand unless the
    caller already has them.
    """
    n = len(entities)
    if n > capacity:
        raise DataError(
            f"document has {n} entities but matrix capacity N={capacity}"
        )
    if n == 0:
        raise DataError("cannot build a relation matrix without entities")
    if embeddings is None:
        embeddings = [entity_pool(enc, e) for e in entities]

    if strategy == "similarity":
        grid = _similarity_grid(embeddings, w1, literal_sim)
    elif strategy == "context":
        grid = _context_grid(enc, entities, w2, b2)
    else:
        raise DataError(f"unknown pair-feature strategy {strategy!r}")

    pad_n = capacity - n
    padded = T.pad(grid, [(0, pad_n), (0, pad_n), (0, 0)])
    return RelationMatrixF(values=padded, n_entities=n, strategy=strategy)


def _similarity_grid(embs: list[Tensor], w1: Tensor, literal: bool) -> Tensor:
    n = len(embs)
    d = embs[0].shape[0]
    if any(float(np.linalg.norm(e.data)) == 0.0 for e in embs) or literal:
        # scalar path: honors the zero-vector cosine convention / literal form
        rows = []
        for s in range(n):
            for o in range(n):
                rows.append(T.reshape(
                    similarity_features(embs[s], embs[o], w1, literal), 1, -1))
        flat = T.concat(rows, axis=0)
        return T.reshape(flat, n, n, flat.shape[1])
    e = T.concat([T.reshape(x, 1, d) for x in embs], axis=0)   # [n, d]
    dots = T.matmul(e, T.transpose(e))                         # [n, n]
    norms = T.power(T.reduce_sum(e * e, axis=1, keepdims=True), 0.5)
    cos = T.div(dots, T.matmul(norms, T.transpose(norms)))
    bil = T.matmul(T.matmul(e, w1), T.transpose(e))
    return T.concat(
        [T.reshape(dots, n, n, 1), T.reshape(cos, n, n, 1),
         T.reshape(bil, n, n, 1)],
        axis=2,
    )


def _context_grid(enc: EncodedDoc, entities: list[int], w2: Tensor,
                  b2: Tensor) -> Tensor:
    n = len(entities)
    k_heads, L, _ = enc.attn.shape
    head_maps = [entity_attention(enc, e) for e in entities]   # each [K, L]
    stacked = T.concat([T.reshape(m, 1, k_heads * L) for m in head_maps], axis=0)
    s_idx = np.repeat(np.arange(n), n)
    o_idx = np.tile(np.arange(n), n)
    prod = T.take_rows(stacked, s_idx) * T.take_rows(stacked, o_idx)
    summed = T.reduce_sum(T.reshape(prod, n * n, k_heads, L), axis=1)
    pair_probs = T.softmax(summed, axis=1)                     # [n*n, L]
    pooled = T.matmul(pair_probs, enc.H)                       # [n*n, d]
    out_dim = w2.shape[0]
    feats = T.matmul(pooled, T.transpose(w2)) + T.repeat_axis(
        T.reshape(b2, 1, out_dim), n * n, axis=0)
    return T.reshape(feats, n, n, out_dim)


def reduce_channels(matrix: RelationMatrixF, w3: Tensor, bias: Tensor) -> Tensor:
    """Per-cell affine map [N,N,D] -> [N,N,D"], bias masked off padding."""
    n_cap, _, d = matrix.values.shape
    if w3.shape[0] != d:
        raise ShapeError(
            f"reduce_channels: features have {d} channels, W3 maps {w3.shape[0]}"
        )
    d_out = w3.shape[1]
    flat = T.reshape(matrix.values, n_cap * n_cap, d)
    out = T.matmul(flat, w3) + T.repeat_axis(
        T.reshape(bias, 1, d_out), n_cap * n_cap, axis=0)
    mask = np.zeros((n_cap, n_cap, 1))
    mask[:matrix.n_entities, :matrix.n_entities] = 1.0
    mask = np.broadcast_to(mask, (n_cap, n_cap, d_out)).reshape(-1, d_out)
    out = out * Tensor(mask)
    return T.reshape(out, n_cap, n_cap, d_out)


def pad_mask(capacity: int, n_entities: int) -> np.ndarray:
    mask = np.zeros((capacity, capacity), dtype=bool)
    mask[:n_entities, :n_entities] = True
    return mask


def pairwise_reference(enc: EncodedDoc, entities: list[int], w2, b2) -> np.ndarray:
    """Straight-line per-pair recomputation of the context strategy.

    Oracle for the batched grid: no stacking, no shared softmax call.
    """
    n = len(entities)
    out = None
    for s in range(n):
        a_s = entity_attention(enc, entities[s])
        for o in range(n):
            a_o = entity_attention(enc, entities[o])
            a = pair_attention(a_s, a_o)
            f = context_features(enc.H, a, w2, b2)
            if out is None:
                out = np.zeros((n, n, f.shape[0]))
            out[s, o] = f.data
    return out


def write_matrix_dump(matrix: RelationMatrixF, path) -> None:
    """Flat binary dump: 16-byte header (magic, u32 N, u32 D, u32 zero),
    then row-major float64 little-endian values."""
    n_cap, _, d = matrix.values.shape
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<III", n_cap, d, 0))
        fh.write(matrix.values.data.astype("<f8").tobytes(order="C"))


def read_matrix_dump(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DUMP_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    n_cap, d, _ = struct.unpack("<III", blob[4:16])
    values = np.frombuffer(blob[16:], dtype="<f8")
    return values.reshape(n_cap, n_cap, d).copy()
