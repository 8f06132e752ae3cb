"""Token encoder and pair-feature extraction.

A small trainable pre-norm transformer maps a marked token sequence to
contextual embeddings H and per-head attention maps. Entities are pooled
from their start-marker embeddings with logsumexp, and ordered entity pairs
get a feature vector under one of two strategies:

  - similarity: [dot, cosine, bilinear] of the two entity embeddings
  - context: attention-selected token context, projected

Long inputs are encoded in overlapping windows whose token embeddings (and
attention rows) are averaged where windows overlap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Document
from .errors import ConfigError, DataError, IngestionError
from .params import ParamRegistry, glorot
from .tensor import Tensor

PAD, UNK, ENT_OPEN, ENT_CLOSE = "<pad>", "<unk>", "<e>", "</e>"
RESERVED = (PAD, UNK, ENT_OPEN, ENT_CLOSE)


class Vocabulary:
    """Dense token -> id map with four fixed reserved entries."""

    def __init__(self, tokens=()):
        self._ids: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self._ids:
            self._ids[token] = len(self._ids)
        return self._ids[token]

    def id_of(self, token: str) -> int:
        return self._ids.get(token, self._ids[UNK])

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @classmethod
    def from_documents(cls, docs) -> "Vocabulary":
        vocab = cls()
        for doc in docs:
            for tok in doc.tokens_flat():
                vocab.add(tok)
        return vocab

    def save(self, path) -> None:
        ordered = sorted(self._ids, key=self._ids.get)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(ordered) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if tuple(lines[:4]) != RESERVED:
            raise IngestionError(
                f"{path}: first four vocabulary lines must be {RESERVED}"
            )
        vocab = cls()
        for tok in lines[4:]:
            vocab.add(tok)
        return vocab


@dataclass
class EncoderConfig:
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    window_length: int = 128
    window_stride: int = 64
    attn_last_layer_only: bool = False

    def validate(self) -> None:
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.window_stride > self.window_length:
            raise ConfigError(
                f"window_stride {self.window_stride} exceeds "
                f"window_length {self.window_length}"
            )


@dataclass
class EncodedDoc:
    """Contextual token embeddings plus attention, for one document."""

    H: Tensor                       # [L, d]
    attn: Tensor                    # [K, L, L]; rows sum to 1
    mention_index: dict[int, list[int]] = field(default_factory=dict)


def insert_markers(doc: Document):
    """Wrap every mention in <e>...</e>; returns (tokens, mention_index).

    mention_index maps entity id to the positions of its <e> markers in the
    flattened, marked token stream.
    """
    spans = []  # (sent_id, start, end, entity)
    for ei, mentions in enumerate(doc.entities):
        for m in mentions:
            spans.append((m.sent_id, m.start, m.end, ei))
    by_sent: dict[int, list] = {}
    for s in spans:
        by_sent.setdefault(s[0], []).append(s)

    tokens: list[str] = []
    mention_index: dict[int, list[int]] = {ei: [] for ei in range(doc.num_entities)}
    for sid, sent in enumerate(doc.sents):
        todo = sorted(by_sent.get(sid, []), key=lambda s: (s[1], s[2]))
        for prev, cur in zip(todo, todo[1:]):
            if cur[1] < prev[2]:
                raise IngestionError(
                    f"{doc.title}: overlapping mentions in sentence {sid}: "
                    f"entity {prev[3]} [{prev[1]},{prev[2]}) vs "
                    f"entity {cur[3]} [{cur[1]},{cur[2]})"
                )
        open_at = {s[1]: s[3] for s in todo}
        close_at = {s[2] for s in todo}
        for pos in range(len(sent) + 1):
            if pos in close_at:
                tokens.append(ENT_CLOSE)
            if pos in open_at:
                mention_index[open_at[pos]].append(len(tokens))
                tokens.append(ENT_OPEN)
            if pos < len(sent):
                tokens.append(sent[pos])
    return tokens, mention_index


class TransformerEncoder:
    """Pre-norm transformer with learned positional embeddings.

    Returns per-token embeddings and attention maps averaged over layers
    (or the last layer's only, per config).
    """

    def __init__(self, vocab: Vocabulary, cfg: EncoderConfig,
                 registry: ParamRegistry, rng: np.random.Generator):
        cfg.validate()
        self.vocab = vocab
        self.cfg = cfg
        d, f = cfg.embed_dim, cfg.ffn_dim
        reg = registry.register
        self.tok_emb = reg("encoder.tok_emb",
                           Tensor(rng.normal(0.0, 0.02, size=(len(vocab), d))))
        self.pos_emb = reg("encoder.pos_emb",
                           Tensor(rng.normal(0.0, 0.02, size=(cfg.window_length, d))))
        self.layers = []
        for i in range(cfg.num_layers):
            p = f"encoder.layer{i}."
            layer = {
                "wq": reg(p + "wq", Tensor(glorot(rng, d, d))),
                "wk": reg(p + "wk", Tensor(glorot(rng, d, d))),
                "wv": reg(p + "wv", Tensor(glorot(rng, d, d))),
                "wo": reg(p + "wo", Tensor(glorot(rng, d, d))),
                "bq": reg(p + "bq", Tensor(np.zeros(d)), bias=True),
                "bk": reg(p + "bk", Tensor(np.zeros(d)), bias=True),
                "bv": reg(p + "bv", Tensor(np.zeros(d)), bias=True),
                "bo": reg(p + "bo", Tensor(np.zeros(d)), bias=True),
                "ln1_g": reg(p + "ln1_g", Tensor(np.ones(d))),
                "ln1_b": reg(p + "ln1_b", Tensor(np.zeros(d)), bias=True),
                "ln2_g": reg(p + "ln2_g", Tensor(np.ones(d))),
                "ln2_b": reg(p + "ln2_b", Tensor(np.zeros(d)), bias=True),
                "ffn_w1": reg(p + "ffn_w1", Tensor(glorot(rng, d, f))),
                "ffn_b1": reg(p + "ffn_b1", Tensor(np.zeros(f)), bias=True),
                "ffn_w2": reg(p + "ffn_w2", Tensor(glorot(rng, f, d))),
                "ffn_b2": reg(p + "ffn_b2", Tensor(np.zeros(d)), bias=True),
            }
            self.layers.append(layer)
        self.final_g = reg("encoder.final_g", Tensor(np.ones(d)))
        self.final_b = reg("encoder.final_b", Tensor(np.zeros(d)), bias=True)

    # -- forward pieces ----------------------------------------------------

    def encode(self, tokens: list[str]) -> tuple[Tensor, Tensor]:
        """Single-window forward; tokens beyond the vocabulary become <unk>."""
        L = len(tokens)
        if L < 1:
            raise DataError("encode: empty token sequence")
        if L > self.cfg.window_length:
            raise ConfigError(
                f"encode: sequence length {L} exceeds window "
                f"{self.cfg.window_length}; use dynamic_window_encode"
            )
        ids = [self.vocab.id_of(t) for t in tokens]
        x = T.take_rows(self.tok_emb, ids) + T.take_rows(self.pos_emb, range(L))
        per_layer_attn = []
        for layer in self.layers:
            attended, attn = self._attention(
                _layer_norm(x, layer["ln1_g"], layer["ln1_b"]), layer
            )
            x = x + attended
            x = x + self._ffn(_layer_norm(x, layer["ln2_g"], layer["ln2_b"]), layer)
            per_layer_attn.append(attn)
        h = _layer_norm(x, self.final_g, self.final_b)
        if self.cfg.attn_last_layer_only:
            attn = per_layer_attn[-1]
        else:
            total = per_layer_attn[0]
            for a in per_layer_attn[1:]:
                total = total + a
            attn = total * (1.0 / len(per_layer_attn))
        return h, attn

    def _attention(self, x: Tensor, layer) -> tuple[Tensor, Tensor]:
        L, d = x.shape
        K = self.cfg.num_heads
        dk = d // K
        q = T.matmul(x, layer["wq"]) + _rows(layer["bq"], L)
        k = T.matmul(x, layer["wk"]) + _rows(layer["bk"], L)
        v = T.matmul(x, layer["wv"]) + _rows(layer["bv"], L)
        heads = []
        maps = []
        for h in range(K):
            sl = slice(h * dk, (h + 1) * dk)
            scores = T.matmul(q[:, sl], T.transpose(k[:, sl])) * (1.0 / math.sqrt(dk))
            a = T.softmax(scores, axis=1)                 # [L, L], rows sum 1
            heads.append(T.matmul(a, v[:, sl]))
            maps.append(T.reshape(a, 1, L, L))
        out = T.matmul(T.concat(heads, axis=1), layer["wo"]) + _rows(layer["bo"], L)
        return out, T.concat(maps, axis=0)                # [K, L, L]

    def _ffn(self, x: Tensor, layer) -> Tensor:
        L = x.shape[0]
        h = T.relu(T.matmul(x, layer["ffn_w1"]) + _rows(layer["ffn_b1"], L))
        return T.matmul(h, layer["ffn_w2"]) + _rows(layer["ffn_b2"], L)

    # -- window handling ------------------------------------------------------

    def dynamic_window_encode(self, tokens: list[str]) -> tuple[Tensor, Tensor]:
        """Encode arbitrarily long input in overlapping windows.

        Token embeddings covered by several windows are averaged; attention
        rows are likewise averaged over covering windows and renormalized.
        For sequences within one window this is exactly encode().
        """
        cfg = self.cfg
        cfg.validate()
        L = len(tokens)
        W = cfg.window_length
        if L <= W:
            return self.encode(tokens)
        starts = list(range(0, L - W + 1, cfg.window_stride))
        if starts[-1] != L - W:
            starts.append(L - W)

        coverage = np.zeros(L)
        for s in starts:
            coverage[s:s + W] += 1.0
        assert coverage.min() >= 1.0

        K = cfg.num_heads
        h_sum = None
        a_sum = None
        for s in starts:
            h_w, a_w = self.encode(tokens[s:s + W])
            h_p = T.pad(h_w, [(s, L - s - W), (0, 0)])
            a_p = T.pad(a_w, [(0, 0), (s, L - s - W), (s, L - s - W)])
            h_sum = h_p if h_sum is None else h_sum + h_p
            a_sum = a_p if a_sum is None else a_sum + a_p

        inv = Tensor(np.broadcast_to((1.0 / coverage)[:, None],
                                     (L, cfg.embed_dim)).copy())
        h = h_sum * inv
        row_inv = Tensor(np.broadcast_to((1.0 / coverage)[None, :, None],
                                         (K, L, L)).copy())
        a = a_sum * row_inv
        # overlap-averaged rows already sum to 1; renormalize to pin it down
        row_sums = T.reduce_sum(a, axis=2, keepdims=True)       # [K, L, 1]
        a = T.div(a, T.repeat_axis(row_sums, L, axis=2))
        return h, a

    def encode_document(self, doc: Document) -> EncodedDoc:
        tokens, mention_index = insert_markers(doc)
        h, attn = self.dynamic_window_encode(tokens)
        return EncodedDoc(H=h, attn=attn, mention_index=mention_index)


def _rows(bias: Tensor, n: int) -> Tensor:
    """[d] bias tiled to n rows."""
    return T.repeat_axis(T.reshape(bias, 1, bias.shape[0]), n, axis=0)


def _layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    L, d = x.shape
    mu = T.reduce_sum(x, axis=1, keepdims=True) * (1.0 / d)
    xc = x - T.repeat_axis(mu, d, axis=1)
    var = T.reduce_sum(xc * xc, axis=1, keepdims=True) * (1.0 / d)
    inv = T.power(var + eps, -0.5)
    xn = xc * T.repeat_axis(inv, d, axis=1)
    return xn * _rows(gamma, L) + _rows(beta, L)


# ---------------------------------------------------------------------------
# entity pooling and pair features
# ---------------------------------------------------------------------------


def entity_pool(enc: EncodedDoc, entity: int) -> Tensor:
    """Smooth-max (logsumexp) fusion of an entity's mention embeddings."""
    positions = enc.mention_index.get(entity, [])
    if not positions:
        raise DataError(f"entity {entity} has no mentions to pool")
    return T.logsumexp(T.take_rows(enc.H, positions), axis=0)


def entity_attention(enc: EncodedDoc, entity: int) -> Tensor:
    """Per-head token-importance rows for one entity, [K, L], rows sum 1."""
    positions = enc.mention_index.get(entity, [])
    if not positions:
        raise DataError(f"entity {entity} has no mentions")
    K, L, _ = enc.attn.shape
    acc = None
    for pos in positions:
        rows = T.reshape(enc.attn[:, pos, :], K, L)
        acc = rows if acc is None else acc + rows
    a = acc * (1.0 / len(positions))
    sums = T.reduce_sum(a, axis=1, keepdims=True)
    return T.div(a, T.repeat_axis(sums, L, axis=1))


def pair_attention(a_s: Tensor, a_o: Tensor) -> Tensor:
    """Token distribution shared by a pair: softmax over summed per-head products."""
    if a_s.shape != a_o.shape:
        raise ConfigError(f"pair_attention: head maps {a_s.shape} vs {a_o.shape}")
    return T.softmax(T.reduce_sum(a_s * a_o, axis=0), axis=0)


def context_features(h: Tensor, pair_attn: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Attention-weighted token context, projected to the feature width."""
    L = h.shape[0]
    pooled = T.matmul(T.transpose(h), T.reshape(pair_attn, L, 1))   # [d, 1]
    out = T.matmul(w2, pooled) + T.reshape(b2, b2.shape[0], 1)
    return T.reshape(out, out.shape[0])


def similarity_features(e_s: Tensor, e_o: Tensor, w1: Tensor,
                        literal_form: bool = False) -> Tensor:
    """[dot, cosine, bilinear] of two entity embeddings.

    ``literal_form`` swaps the dot product for the full elementwise product,
    giving a (d+2)-dim vector instead of 3 scalars. A zero embedding makes
    the cosine 0 by definition.
    """
    d = e_s.shape[0]
    if e_o.shape != (d,):
        raise ConfigError(f"similarity: dims {e_s.shape} vs {e_o.shape}")
    prod = e_s * e_o
    dot = T.reshape(T.reduce_sum(prod), 1)
    ns = float(np.linalg.norm(e_s.data))
    no = float(np.linalg.norm(e_o.data))
    if ns == 0.0 or no == 0.0:
        cos = Tensor([0.0])
    else:
        norm_s = T.power(T.reduce_sum(e_s * e_s), 0.5)
        norm_o = T.power(T.reduce_sum(e_o * e_o), 0.5)
        cos = T.reshape(T.div(T.reduce_sum(prod), norm_s * norm_o), 1)
    bilinear = T.reshape(
        T.matmul(T.matmul(T.reshape(e_s, 1, d), w1), T.reshape(e_o, d, 1)), 1
    )
    first = prod if literal_form else dot
    return T.concat([first, cos, bilinear], axis=0)
