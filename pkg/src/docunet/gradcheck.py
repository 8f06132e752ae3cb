"""Central finite-difference checking of analytic gradients.

The checker re-evaluates a scalar-valued function with individually
perturbed inputs and compares (f(x+eps) - f(x-eps)) / 2eps against the
gradient produced by ``backward()``. It is the independent oracle for every
differentiable operation in the package and must stay free of the autodiff
internals it verifies: perturbation happens on plain numpy buffers and the
function under test is re-run from scratch each time.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

# Entries where both gradients are below this scale are compared on an
# absolute basis; raw ratios of O(1e-9) finite-difference noise would
# otherwise dominate.
_REL_FLOOR = 1e-3


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), _REL_FLOOR)


def numeric_gradient(fn, arrays, which: int, index, eps: float = 1e-5) -> float:
    """Central finite difference of fn at arrays[which][index].

    ``fn`` maps a list of numpy arrays to a float and is treated as a black
    box; ``arrays`` are not modified.
    """
    bumped = [a.copy() for a in arrays]
    bumped[which][index] += eps
    hi = fn(bumped)
    bumped[which][index] -= 2 * eps
    lo = fn(bumped)
    return (hi - lo) / (2 * eps)


def check_gradients(build_loss, arrays, eps: float = 1e-5,
                    max_entries_per_input: int | None = None,
                    rng: np.random.Generator | None = None):
    """Compare backward() gradients of a scalar graph against finite differences.

    ``build_loss`` takes a list of Tensors (one per entry of ``arrays``,
    each with requires_grad) and returns a scalar Tensor. Returns the
    maximum relative error over all checked entries.

    When ``max_entries_per_input`` is set, that many entries are sampled
    per input (without replacement); otherwise every entry is checked.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build_loss(leaves)
    loss.backward()

    def fn(bufs):
        return build_loss([Tensor(b) for b in bufs]).item()

    worst = 0.0
    for which, leaf in enumerate(leaves):
        grad = leaf.grad
        assert grad is not None, f"input {which} received no gradient"
        all_indices = list(np.ndindex(*arrays[which].shape))
        if max_entries_per_input is not None and len(all_indices) > max_entries_per_input:
            if rng is None:
                rng = np.random.default_rng(0)
            chosen = rng.choice(len(all_indices), size=max_entries_per_input,
                                replace=False)
            indices = [all_indices[i] for i in chosen]
        else:
            indices = all_indices
        for index in indices:
            num = numeric_gradient(fn, arrays, which, index, eps)
            worst = max(worst, relative_error(float(grad[index]), num))
    return worst
