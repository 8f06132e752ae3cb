"""End-to-end model: encoder -> pair matrix -> segmentation -> pair scores.

Entities occupy matrix rows/columns in first-appearance order; predictions
are mapped back to the document's own entity indices. Pad pairs (and, by
default, the diagonal) never reach the loss: masking happens here rather
than in the matrix so convolution still sees the full square.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .classifier import PairHead, PairHeadConfig, batch_loss, decode
from .config import TrainConfig
from .data import Document
from .encoder import EncoderConfig, TransformerEncoder, Vocabulary, entity_pool
from .errors import DataError
from .params import ParamRegistry, glorot
from .relmatrix import RelationMatrixF, build_matrix, reduce_channels
from .segmentation import PairwiseFFN, UNet, UNetConfig
from .tensor import Tensor


@dataclass
class DocForward:
    order: list[int]                 # matrix index -> document entity index
    n: int
    pair_index: list[tuple[int, int]]
    scores: Tensor                   # [P, R] stacked pair logits
    gold: list[set[int]]             # aligned with pair_index


class DocuNetModel:
    def __init__(self, vocab: Vocabulary, cfg: TrainConfig,
                 rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        rng = rng or np.random.default_rng(cfg.seed)
        self.registry = ParamRegistry()

        enc_cfg = EncoderConfig(
            embed_dim=cfg.embed_dim, num_layers=cfg.num_layers,
            num_heads=cfg.num_heads, ffn_dim=cfg.ffn_dim,
            window_length=cfg.window_length, window_stride=cfg.window_stride,
            attn_last_layer_only=cfg.attn_last_layer_only,
        )
        self.encoder = TransformerEncoder(vocab, enc_cfg, self.registry, rng)

        d = cfg.embed_dim
        reg = self.registry.register
        if cfg.strategy == "similarity":
            self.w1 = reg("features.w1", Tensor(glorot(rng, d, d)))
            self.feature_dim = d + 2 if cfg.similarity_literal else 3
            self.w2 = self.b2 = None
        else:
            self.w1 = None
            self.w2 = reg("features.w2", Tensor(glorot(rng, d, d)))
            self.b2 = reg("features.b2", Tensor(np.zeros(d)), bias=True)
            self.feature_dim = d

        if self.feature_dim == cfg.reduced_dim and cfg.strategy == "similarity":
            self.w3 = self.b3 = None  # 3-dim features feed segmentation directly
        else:
            self.w3 = reg("reduce.w3",
                          Tensor(glorot(rng, self.feature_dim, cfg.reduced_dim)))
            self.b3 = reg("reduce.b3", Tensor(np.zeros(cfg.reduced_dim)), bias=True)

        if cfg.use_unet:
            schedule = tuple(cfg.channel_schedule)
            self.seg = UNet(UNetConfig(channels=schedule), self.registry, rng)
        else:
            budget = _unet_budget(tuple(cfg.channel_schedule))
            self.seg = PairwiseFFN(cfg.reduced_dim, cfg.channel_schedule[-1],
                                   budget, self.registry, rng)

        head_cfg = PairHeadConfig(
            entity_dim=d, cell_dim=self.seg.out_channels,
            num_relations=cfg.num_relations, hidden_dim=cfg.head_hidden,
            combine=cfg.combine,
        )
        self.head = PairHead(head_cfg, self.registry, rng)

    # -- forward -----------------------------------------------------------

    def forward_doc(self, doc: Document) -> DocForward:
        cfg = self.cfg
        enc = self.encoder.encode_document(doc)
        order = doc.first_appearance_order()
        n = len(order)
        embeddings = [entity_pool(enc, e) for e in order]

        matrix = build_matrix(
            enc, order, cfg.strategy, cfg.matrix_size,
            w1=self.w1, w2=self.w2, b2=self.b2,
            literal_sim=cfg.similarity_literal, embeddings=embeddings,
        )
        if self.w3 is not None:
            xin = reduce_channels(matrix, self.w3, self.b3)
        else:
            xin = matrix.values
        cells = self.seg.forward(T.transpose(xin, 2, 0, 1))   # [D', N, N]

        pair_index = [(s, o) for s in range(n) for o in range(n)
                      if s != o or not cfg.exclude_diagonal]
        scores = self._score_pairs(embeddings, cells, pair_index)

        inv = {doc_idx: m for m, doc_idx in enumerate(order)}
        gold_map: dict[tuple[int, int], set[int]] = {}
        for lab in doc.labels:
            key = (inv[lab.head], inv[lab.tail])
            gold_map.setdefault(key, set()).add(lab.relation)
        gold = [gold_map.get(pair, set()) for pair in pair_index]
        return DocForward(order=order, n=n, pair_index=pair_index,
                          scores=scores, gold=gold)

    def _score_pairs(self, embeddings, cells: Tensor, pair_index) -> Tensor:
        """Batched equivalent of head.pair_logits over all listed pairs."""
        head = self.head
        hcfg = head.cfg
        d = hcfg.entity_dim
        dz, r = hcfg.hidden_dim, hcfg.num_relations
        p = len(pair_index)
        n_cap = cells.shape[1]

        emat = T.concat([T.reshape(e, 1, d) for e in embeddings], axis=0)
        flat_cells = T.transpose(T.reshape(cells, cells.shape[0], n_cap * n_cap))
        cell_rows = T.take_rows(flat_cells, [s * n_cap + o for s, o in pair_index])
        s_rows = T.take_rows(emat, [s for s, _ in pair_index])
        o_rows = T.take_rows(emat, [o for _, o in pair_index])

        if hcfg.combine == "concat":
            zs = T.tanh(T.matmul(T.concat([s_rows, cell_rows], axis=1), head.ws)
                        + T.repeat_axis(T.reshape(head.bs, 1, dz), p, axis=0))
            zo = T.tanh(T.matmul(T.concat([o_rows, cell_rows], axis=1), head.wo)
                        + T.repeat_axis(T.reshape(head.bo, 1, dz), p, axis=0))
        else:
            cell_proj = T.matmul(cell_rows, head.wy)
            zs = T.tanh(T.matmul(s_rows, head.ws) + cell_proj
                        + T.repeat_axis(T.reshape(head.bs, 1, dz), p, axis=0))
            zo = T.tanh(T.matmul(o_rows, head.wo) + cell_proj
                        + T.repeat_axis(T.reshape(head.bo, 1, dz), p, axis=0))

        mixed = T.reshape(T.matmul(zo, T.transpose(head.wr)), p * r, dz)
        zs_rep = T.take_rows(zs, np.repeat(np.arange(p), r))
        flat = T.reduce_sum(mixed * zs_rep, axis=1)
        return (T.reshape(flat, p, r)
                + T.repeat_axis(T.reshape(head.br, 1, r), p, axis=0))

    # -- training / inference helpers ------------------------------------------

    def doc_loss_terms(self, doc: Document):
        """Per-pair loss inputs [(scores [R], gold set)] for one document."""
        fwd = self.forward_doc(doc)
        return [(fwd.scores[i, :], fwd.gold[i])
                for i in range(len(fwd.pair_index))]

    def doc_loss_sum(self, doc: Document) -> tuple[Tensor, int]:
        """Summed (not averaged) pair loss; the caller divides by pair count.

        No-relation pairs all share the same loss expression, so they are
        evaluated in one stacked reduction; pairs with gold labels go
        through the per-pair loss. Equal to summing batch_loss terms.
        """
        fwd = self.forward_doc(doc)
        if not fwd.pair_index:
            raise DataError(f"{doc.title}: no scorable pairs")
        kind = self.cfg.loss
        r = self.cfg.num_relations
        na = [i for i, g in enumerate(fwd.gold) if not g]
        labeled = [i for i, g in enumerate(fwd.gold) if g]
        total = None
        if na:
            rows = T.take_rows(fwd.scores, na)
            if kind == "balanced":
                padded = T.concat([rows, Tensor(np.zeros((len(na), 1)))], axis=1)
                term = T.reduce_sum(T.logsumexp(padded, axis=1))
            else:
                term = T.reduce_sum(T.log1p_exp(rows)) * (1.0 / r)
            total = T.reshape(term, 1)
        if labeled:
            part = batch_loss([(fwd.scores[i, :], fwd.gold[i]) for i in labeled],
                              kind=kind) * float(len(labeled))
            total = part if total is None else total + part
        return total, len(fwd.pair_index)

    def batch_mean_loss(self, docs) -> Tensor:
        total, count = None, 0
        for doc in docs:
            part, c = self.doc_loss_sum(doc)
            total = part if total is None else total + part
            count += c
        if count == 0:
            raise DataError("no scorable pairs in batch")
        return total * (1.0 / count)

    def predict_doc(self, doc: Document):
        fwd = self.forward_doc(doc)
        out = []
        for i, (s, o) in enumerate(fwd.pair_index):
            for rel in sorted(decode(fwd.scores.data[i])):
                out.append((doc.title, fwd.order[s], fwd.order[o], rel))
        return out

    def predict(self, docs):
        preds = []
        for doc in docs:
            preds.extend(self.predict_doc(doc))
        return preds


def _unet_budget(schedule: tuple[int, ...]) -> int:
    """Parameter count of the U-Net a pairwise FFN ablation must match."""
    cin, c1, c2, c3, c4, cout = schedule
    k = 3 * 3
    count = 0
    for i, o in ((cin, c1), (c1, c1), (c1, c2), (c2, c2)):
        count += i * o * k + o
    count += c2 * c3 * 4 + c3           # up1 transposed conv
    for i, o in ((c3 + c2, c3), (c3, c3)):
        count += i * o * k + o
    count += c3 * c4 * 4 + c4           # up2 transposed conv
    for i, o in ((c4 + c1, c4), (c4, c4)):
        count += i * o * k + o
    count += c4 * cout * 1 + cout       # final 1x1
    return count
