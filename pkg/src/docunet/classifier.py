"""Per-pair relation scoring and the threshold-at-zero multi-label losses.

Each ordered entity pair gets a score per relation from a bilinear form
over two tanh projections that mix the entity embedding with the pair's
segmented cell vector. Decoding predicts every relation whose score is
strictly positive; the empty set is the no-relation outcome.

The default training objective treats score 0 as an implicit threshold
category: positives are pushed above it, negatives below, via

    L = log(1 + sum_neg e^{s_i}) + log(1 + sum_pos e^{-s_j})

computed through logsumexp against a constant 0 for stability. The plain
sigmoid cross-entropy used by the loss ablation lives here too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .params import ParamRegistry, glorot
from .tensor import Tensor


@dataclass
class PairHeadConfig:
    entity_dim: int          # width of pooled entity embeddings
    cell_dim: int            # channels of the segmented matrix cell
    num_relations: int
    hidden_dim: int = 64
    combine: str = "concat"  # or "add": project the cell and sum

    def validate(self) -> None:
        if self.combine not in ("concat", "add"):
            raise ConfigError(f"unknown combine mode {self.combine!r}")
        if self.num_relations < 1:
            raise ConfigError("need at least one relation type")


class PairHead:
    def __init__(self, cfg: PairHeadConfig, registry: ParamRegistry,
                 rng: np.random.Generator, prefix: str = "head"):
        cfg.validate()
        self.cfg = cfg
        d, c, dz, r = cfg.entity_dim, cfg.cell_dim, cfg.hidden_dim, cfg.num_relations
        reg = registry.register
        in_dim = d + c if cfg.combine == "concat" else d
        self.ws = reg(f"{prefix}.ws", Tensor(glorot(rng, in_dim, dz)))
        self.wo = reg(f"{prefix}.wo", Tensor(glorot(rng, in_dim, dz)))
        self.bs = reg(f"{prefix}.bs", Tensor(np.zeros(dz)), bias=True)
        self.bo = reg(f"{prefix}.bo", Tensor(np.zeros(dz)), bias=True)
        if cfg.combine == "add":
            self.wy = reg(f"{prefix}.wy", Tensor(glorot(rng, c, dz)))
        self.wr = reg(f"{prefix}.wr",
                      Tensor(glorot(rng, dz, dz, shape=(r * dz, dz)) / np.sqrt(r)))
        self.br = reg(f"{prefix}.br", Tensor(np.zeros(r)), bias=True)

    def pair_logits(self, e_s: Tensor, e_o: Tensor, y_so: Tensor) -> Tensor:
        """Scores [R] for one ordered pair; y_so is its segmented cell."""
        cfg = self.cfg
        dz, r = cfg.hidden_dim, cfg.num_relations
        if cfg.combine == "concat":
            z_s = self._project(T.concat([e_s, y_so], axis=0), self.ws, self.bs)
            z_o = self._project(T.concat([e_o, y_so], axis=0), self.wo, self.bo)
        else:
            cell = T.matmul(T.reshape(y_so, 1, -1), self.wy)
            z_s = T.tanh(
                T.matmul(T.reshape(e_s, 1, -1), self.ws) + cell
                + T.reshape(self.bs, 1, dz))
            z_o = T.tanh(
                T.matmul(T.reshape(e_o, 1, -1), self.wo) + cell
                + T.reshape(self.bo, 1, dz))
        # row block r of wr maps z_o; pairing with z_s gives the bilinear form
        mixed = T.reshape(T.matmul(self.wr, T.transpose(z_o)), r, dz)
        scores = T.reduce_sum(mixed * T.repeat_axis(z_s, r, axis=0), axis=1)
        return scores + self.br

    @staticmethod
    def _project(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        out = T.matmul(T.reshape(x, 1, -1), w) + T.reshape(b, 1, b.shape[0])
        return T.tanh(out)


_ZERO = None


def _zero() -> Tensor:
    global _ZERO
    if _ZERO is None:
        _ZERO = Tensor([0.0])
    return _ZERO


def balanced_softmax_loss(scores: Tensor, gold: set[int]) -> Tensor:
    """Threshold-class loss over one pair's scores.

    Empty gold (the no-relation case) leaves only the negative term, which
    drives every score below zero.
    """
    r = scores.shape[0]
    if any(g < 0 or g >= r for g in gold):
        raise DataError(f"gold ids {sorted(gold)} out of range for {r} relations")
    pos = sorted(gold)
    neg = [i for i in range(r) if i not in gold]
    neg_term = T.logsumexp(
        T.concat([_zero(), T.take_rows(scores, neg)], axis=0)
        if neg else _zero(), axis=0)
    pos_term = T.logsumexp(
        T.concat([_zero(), T.neg(T.take_rows(scores, pos))], axis=0)
        if pos else _zero(), axis=0)
    return T.reshape(neg_term + pos_term, 1)


def binary_cross_entropy_loss(scores: Tensor, gold: set[int]) -> Tensor:
    """Mean per-relation sigmoid cross-entropy (the loss ablation)."""
    r = scores.shape[0]
    if any(g < 0 or g >= r for g in gold):
        raise DataError(f"gold ids {sorted(gold)} out of range for {r} relations")
    total = T.reduce_sum(T.log1p_exp(scores))
    if gold:
        total = total - T.reduce_sum(T.take_rows(scores, sorted(gold)))
    return T.reshape(total * (1.0 / r), 1)


def decode(scores) -> set[int]:
    """Predicted relations: strictly positive scores; empty set means none."""
    values = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    return {int(i) for i in np.nonzero(values > 0.0)[0]}


def batch_loss(scored_pairs, kind: str = "balanced") -> Tensor:
    """Mean pair loss over (scores, gold) items, in the given fixed order."""
    if not scored_pairs:
        raise DataError("batch_loss: no pairs included (all padded or masked)")
    fn = {"balanced": balanced_softmax_loss,
          "bce": binary_cross_entropy_loss}.get(kind)
    if fn is None:
        raise ConfigError(f"unknown loss kind {kind!r}")
    total = None
    for scores, gold in scored_pairs:
        term = fn(scores, gold)
        total = term if total is None else total + term
    return total * (1.0 / len(scored_pairs))
