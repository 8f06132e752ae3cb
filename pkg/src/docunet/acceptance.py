"""The finite-difference gradient suite behind `docunet gradcheck`.

Covers every differentiable operation on randomized shapes, then the fully
composed model (small encoder, N=8, desk segmentation schedule) on a
two-document batch, probing sampled entries of every parameter tensor
against central differences on the re-run forward pass.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import SyntheticWorldConfig, generate_synthetic
from .encoder import Vocabulary
from .gradcheck import check_gradients, relative_error
from .model import DocuNetModel

PER_OP_BOUND = 1e-4
COMPOSED_BOUND = 1e-4

SMALL_CONFIG = dict(
    embed_dim=16, num_layers=2, num_heads=2, ffn_dim=32,
    matrix_size=8, reduced_dim=3, channel_schedule=(3, 16, 32, 16, 8, 16),
    head_hidden=16, num_relations=3,
)


def _op_checks(rng: np.random.Generator):
    """(name, builder, arrays) triples spanning the op inventory."""
    m, k, n = 3, 4, 2
    yield ("matmul",
           lambda t: T.reduce_sum(T.matmul(t[0], t[1])),
           [rng.normal(size=(m, k)), rng.normal(size=(k, n))])
    yield ("conv2d",
           lambda t: T.reduce_sum(T.mul(T.conv2d(t[0], t[1], stride=1,
                                                 padding=1), t[2])),
           [rng.normal(size=(3, 6, 6)), rng.normal(size=(2, 3, 3, 3)),
            rng.normal(size=(2, 6, 6))])
    yield ("conv2d_strided",
           lambda t: T.reduce_sum(T.conv2d(t[0], t[1], stride=2, padding=0)),
           [rng.normal(size=(2, 7, 7)), rng.normal(size=(1, 2, 3, 3))])
    yield ("transposed_conv2d",
           lambda t: T.reduce_sum(T.mul(T.transposed_conv2d(t[0], t[1],
                                                            stride=2), t[2])),
           [rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 2, 2)),
            rng.normal(size=(3, 6, 6))])
    yield ("max_pool2d",
           lambda t: T.reduce_sum(T.mul(T.max_pool2d(t[0]), t[1])),
           [rng.permutation(np.arange(32.0)).reshape(2, 4, 4),
            rng.normal(size=(2, 2, 2))])
    yield ("logsumexp",
           lambda t: T.reduce_sum(T.logsumexp(t[0], 0)),
           [rng.normal(size=(5, 3))])
    yield ("softmax",
           lambda t: T.reduce_sum(T.mul(T.softmax(t[0], axis=1), t[1])),
           [rng.normal(size=(4, 5)), rng.normal(size=(4, 5))])
    yield ("elementwise",
           lambda t: T.reduce_sum(
               T.tanh(t[0]) * T.sigmoid(t[1]) + T.relu(t[0]) + T.log1p_exp(t[1])),
           [rng.normal(size=(4, 4)) + 0.1, rng.normal(size=(4, 4)) - 0.1])
    yield ("arithmetic",
           lambda t: T.reduce_sum(T.div(T.mul(t[0], t[1]) + t[0], t[1])),
           [rng.normal(size=(3, 3)), rng.normal(size=(3, 3)) + 3.0])
    yield ("structural",
           lambda t: T.reduce_sum(T.concat(
               [T.transpose(T.reshape(t[0], 2, 6)),
                T.pad(t[1], [(1, 2), (0, 1)])[:6, :2]], axis=1)),
           [rng.normal(size=(3, 4)), rng.normal(size=(3, 1))])
    yield ("gather_repeat",
           lambda t: T.reduce_sum(T.mul(T.take_rows(t[0], [0, 2, 2, 1]),
                                        T.repeat_axis(t[1], 3, axis=1))),
           [rng.normal(size=(3, 3)), rng.normal(size=(4, 1))])


def composed_model_check(max_entries_per_tensor: int = 3,
                         eps: float = 1e-5) -> float:
    """Max relative error over sampled entries of every model parameter."""
    rng = np.random.default_rng(7)
    docs = generate_synthetic(SyntheticWorldConfig(
        num_docs=2, num_cities=2, num_regions=2, num_countries=1, seed=13,
        noise_rate=0.0))
    vocab = Vocabulary.from_documents(docs)
    cfg = TrainConfig(**SMALL_CONFIG)
    model = DocuNetModel(vocab, cfg, np.random.default_rng(5))
    # Zero-initialized conv biases meet the exactly-zero padding cells right
    # on the relu kink, where no two-sided derivative exists; check at a
    # generic point instead.
    noise = np.random.default_rng(99)
    for _, param in model.registry.items():
        param.data = param.data + noise.normal(0.0, 0.02, size=param.shape)

    def loss_value() -> float:
        return model.batch_mean_loss(docs).item()

    model.registry.zero_grad()
    loss = model.batch_mean_loss(docs)
    loss.backward()

    worst = 0.0
    for name, param in model.registry.items():
        grad = param.grad
        assert grad is not None, f"no gradient reached {name}"
        flat = param.data.reshape(-1)
        count = min(max_entries_per_tensor, flat.size)
        picks = rng.choice(flat.size, size=count, replace=False)
        for idx in picks:
            original = flat[idx]
            flat[idx] = original + eps
            hi = loss_value()
            flat[idx] = original - eps
            lo = loss_value()
            flat[idx] = original
            numeric = (hi - lo) / (2 * eps)
            worst = max(worst, relative_error(float(grad.reshape(-1)[idx]),
                                              numeric))
    return worst


def gradient_suite(rng_seed: int = 314):
    """Run every check; yields (name, max relative error, bound)."""
    rng = np.random.default_rng(rng_seed)
    results = []
    for name, builder, arrays in _op_checks(rng):
        err = check_gradients(builder, arrays)
        results.append((name, err, PER_OP_BOUND))
    results.append(("composed_model", composed_model_check(), COMPOSED_BOUND))
    return results
