"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable quantity in the pipeline (token embeddings, pair
features, convolution kernels, losses) is a ``Tensor``. Operations record
their inputs and a backward closure; ``Tensor.backward()`` replays the
recorded operations in reverse execution order and accumulates gradients
into the leaves.

Conventions:
  - all values are float64; there is no 32-bit path
  - no implicit broadcasting: binary ops take equal shapes, or a Python
    scalar on either side
  - images are channels-first: [C, H, W]
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ShapeError

_SEQ = itertools.count()


def _as_array(data) -> np.ndarray:
    return np.array(data, dtype=np.float64, copy=True)


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff.

    ``grad`` is populated (and accumulated across repeated ``backward()``
    calls) only on leaves, i.e. tensors created directly rather than by an
    operation. Intermediate nodes get a fresh ``grad`` each backward pass,
    kept for inspection only.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None
        self._seq = next(_SEQ)

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, bwd) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = tuple(parents)
            out._bwd = bwd
        else:
            out._parents = ()
            out._bwd = None
        out._seq = next(_SEQ)
        return out

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def to_array(self) -> np.ndarray:
        """Copy of the underlying values (callers never alias our buffer)."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Populate gradients of all reachable leaves with d(self)/d(leaf).

        ``self`` must hold a single value. Repeated calls accumulate into
        leaf gradients; use ``zero_grad`` on the parameter registry between
        steps.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar, got shape {self.shape}"
            )
        if not self.requires_grad:
            return
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append(p)
        # Reverse execution order is a topological order of the recorded ops:
        # every operand was created before its consumer.
        nodes.sort(key=lambda t: -t._seq)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in nodes:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._bwd is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, contrib in zip(node._parents, node._bwd(g)):
                if not parent.requires_grad or contrib is None:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + contrib
                else:
                    pending[key] = contrib

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _coerce(a):
    """Binary-op operand coercion: Tensor stays, Python scalar becomes one."""
    if isinstance(a, Tensor):
        return a, False
    if isinstance(a, (int, float, np.floating, np.integer)):
        return Tensor(float(a)), True
    raise TypeError(f"expected Tensor or scalar, got {type(a).__name__}")


def _expand_like(g: np.ndarray, target: Tensor) -> np.ndarray:
    """Reduce a gradient onto a scalar operand, or pass it through."""
    if g.shape == target.shape:
        return g
    return np.sum(g).reshape(target.shape)


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, a_scalar = _coerce(a)
    b, b_scalar = _coerce(b)
    if not (a_scalar or b_scalar):
        _check_same_shape(a, b, "add")
    return Tensor._from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_expand_like(g, a), _expand_like(g, b)),
    )


def sub(a, b) -> Tensor:
    a, a_scalar = _coerce(a)
    b, b_scalar = _coerce(b)
    if not (a_scalar or b_scalar):
        _check_same_shape(a, b, "sub")
    return Tensor._from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_expand_like(g, a), _expand_like(-g, b)),
    )


def mul(a, b) -> Tensor:
    a, a_scalar = _coerce(a)
    b, b_scalar = _coerce(b)
    if not (a_scalar or b_scalar):
        _check_same_shape(a, b, "mul")
    return Tensor._from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_expand_like(g * b.data, a), _expand_like(g * a.data, b)),
    )


def div(a, b) -> Tensor:
    a, a_scalar = _coerce(a)
    b, b_scalar = _coerce(b)
    if not (a_scalar or b_scalar):
        _check_same_shape(a, b, "div")
    return Tensor._from_op(
        a.data / b.data,
        (a, b),
        lambda g: (
            _expand_like(g / b.data, a),
            _expand_like(-g * a.data / (b.data * b.data), b),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise a**p for a fixed scalar exponent."""
    p = float(exponent)
    out = a.data**p
    return Tensor._from_op(
        out, (a,), lambda g: (g * p * a.data ** (p - 1.0),)
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_vals(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_vals(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return Tensor._from_op(out, (a,), lambda g: (g * (a.data > 0),))


def log1p_exp(a: Tensor) -> Tensor:
    """log(1 + e^x) via the overflow-safe branch max(x,0) + log1p(e^-|x|)."""
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    sig = _sigmoid_vals(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * sig,))


# -- linear algebra --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return Tensor._from_op(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


# -- shape manipulation ----------------------------------------------------------


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e
    return Tensor._from_op(
        np.ascontiguousarray(out), (a,), lambda g: (g.reshape(a.shape),)
    )


def transpose(a: Tensor, *axes) -> Tensor:
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = np.argsort(axes)
    return Tensor._from_op(
        np.ascontiguousarray(np.transpose(a.data, axes)),
        (a,),
        lambda g: (np.transpose(g, inv),),
    )


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(sizes))
        )

    return Tensor._from_op(out, tuple(tensors), bwd)


def getitem(a: Tensor, key) -> Tensor:
    """Basic (int/slice) indexing; the result owns its values."""
    out = np.ascontiguousarray(a.data[key])

    def bwd(g):
        buf = np.zeros(a.shape)
        buf[key] += g
        return (buf,)

    return Tensor._from_op(out, (a,), bwd)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; duplicated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]

    def bwd(g):
        buf = np.zeros(a.shape)
        np.add.at(buf, idx, g)
        return (buf,)

    return Tensor._from_op(out, (a,), bwd)


def repeat_axis(a: Tensor, repeats: int, axis: int) -> Tensor:
    """Repeat each slice along ``axis`` (the explicit stand-in for broadcast)."""
    axis = axis % a.ndim
    out = np.repeat(a.data, repeats, axis=axis)

    def bwd(g):
        shape = list(a.shape)
        shape[axis:axis + 1] = [a.shape[axis], repeats]
        return (g.reshape(shape).sum(axis=axis + 1),)

    return Tensor._from_op(out, (a,), bwd)


def pad(a: Tensor, pad_width) -> Tensor:
    """Zero-pad; ``pad_width`` is a per-axis sequence of (before, after)."""
    pw = tuple((int(b), int(c)) for b, c in pad_width)
    if len(pw) != a.ndim:
        raise ShapeError(f"pad: got {len(pw)} axis specs for ndim {a.ndim}")
    out = np.pad(a.data, pw)
    sl = tuple(slice(b, b + n) for (b, _), n in zip(pw, a.shape))
    return Tensor._from_op(out, (a,), lambda g: (g[sl],))


# -- reductions -------------------------------------------------------------------


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * a.ndim), a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(out, (a,), bwd)


def logsumexp(a: Tensor, axis: int = 0) -> Tensor:
    """log(sum(exp(x))) along one axis, max-shifted for stability."""
    if a.shape[axis] == 0:
        raise ShapeError(f"logsumexp: empty axis {axis} of shape {a.shape}")
    m = np.max(a.data, axis=axis, keepdims=True)
    ex = np.exp(a.data - m)
    s = ex.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = ex / s

    def bwd(g):
        return (np.expand_dims(g, axis) * soft,)

    return Tensor._from_op(out, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    ex = np.exp(a.data - m)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor._from_op(out, (a,), bwd)


# -- convolution family ------------------------------------------------------------
#
# conv2d computes, for pad p and stride t,
#     out[co, i, j] = sum_{ci, a, b} xpad[ci, i*t + a, j*t + b] * k[co, ci, a, b]
# transposed_conv2d is its exact adjoint in x (same kernel element pairing),
# which is what makes <conv(x,k), y> == <x, tconv(y,k)> hold.


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """[C,Hp,Wp] -> [Ho*Wo, C*kh*kw] patch matrix."""
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # [C, Ho, Wo, kh, kw]
    c, ho, wo = windows.shape[:3]
    return windows.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * kh * kw)


def _col2im(cols, c, hp, wp, kh, kw, stride, ho, wo) -> np.ndarray:
    """Scatter-add of patch rows back to a [C,Hp,Wp] buffer (adjoint of _im2col)."""
    buf = np.zeros((c, hp, wp))
    patches = cols.reshape(ho, wo, c, kh, kw).transpose(2, 0, 1, 3, 4)
    ys = (np.arange(ho) * stride)[:, None] + np.arange(kh)[None, :]  # [Ho, kh]
    xs = (np.arange(wo) * stride)[:, None] + np.arange(kw)[None, :]  # [Wo, kw]
    np.add.at(
        buf,
        (
            np.arange(c)[:, None, None, None, None],
            ys[None, :, None, :, None],
            xs[None, None, :, None, :],
        ),
        patches,
    )
    return buf


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0,
           naive: bool = False) -> Tensor:
    """2-D cross-correlation of x[Cin,H,W] with k[Cout,Cin,kh,kw].

    Zero padding; output spatial extent floor((H + 2p - kh)/stride) + 1.
    ``naive=True`` selects the direct-loop path (reference implementation,
    same contract).
    """
    if x.ndim != 3 or k.ndim != 4:
        raise ShapeError(f"conv2d: expected x[C,H,W], k[Co,Ci,kh,kw]; "
                         f"got {x.shape} and {k.shape}")
    cin, h, w = x.shape
    cout, kcin, kh, kw = k.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {kcin}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d: kernel ({kh}x{kw}) larger than padded input ({hp}x{wp})"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if naive:
        return _conv2d_naive(x, k, stride, padding, ho, wo)

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride)           # [Ho*Wo, Ci*kh*kw]
    kmat = k.data.reshape(cout, cin * kh * kw)   # [Co, Ci*kh*kw]
    out = (cols @ kmat.T).T.reshape(cout, ho, wo)

    def bwd(g):
        gmat = g.reshape(cout, ho * wo).T        # [Ho*Wo, Co]
        dk = (gmat.T @ cols).reshape(k.shape)
        dcols = gmat @ kmat                      # [Ho*Wo, Ci*kh*kw]
        dxp = _col2im(dcols, cin, hp, wp, kh, kw, stride, ho, wo)
        if padding:
            dxp = dxp[:, padding:-padding, padding:-padding]
        return (dxp, dk)

    return Tensor._from_op(out, (x, k), bwd)


def _conv2d_naive(x, k, stride, padding, ho, wo):
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[co, i, j] = np.sum(patch * k.data[co])

    def bwd(g):
        dxp = np.zeros_like(xp)
        dk = np.zeros(k.shape)
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    sl = np.s_[:, i * stride:i * stride + kh,
                               j * stride:j * stride + kw]
                    dxp[sl] += g[co, i, j] * k.data[co]
                    dk[co] += g[co, i, j] * xp[sl]
        if padding:
            dxp = dxp[:, padding:-padding, padding:-padding]
        return (dxp.copy(), dk)

    return Tensor._from_op(out, (x, k), bwd)


def transposed_conv2d(x: Tensor, k: Tensor, stride: int = 2) -> Tensor:
    """Adjoint of conv2d: x[Cin,H,W], k[Cin,Cout,kh,kw] -> [Cout,(H-1)s+kh,...].

    With stride 2 and a 2x2 kernel the spatial extent exactly doubles.
    """
    if x.ndim != 3 or k.ndim != 4:
        raise ShapeError(f"transposed_conv2d: expected x[C,H,W], k[Ci,Co,kh,kw]; "
                         f"got {x.shape} and {k.shape}")
    cin, h, w = x.shape
    kcin, cout, kh, kw = k.shape
    if kcin != cin:
        raise ShapeError(
            f"transposed_conv2d: input channels {cin} != kernel channels {kcin}"
        )
    if stride < 1:
        raise ShapeError(f"transposed_conv2d: stride must be >= 1, got {stride}")
    ho = (h - 1) * stride + kh
    wo = (w - 1) * stride + kw

    xmat = x.data.reshape(cin, h * w).T          # [H*W, Ci]
    kmat = k.data.reshape(cin, cout * kh * kw)   # [Ci, Co*kh*kw]
    cols = xmat @ kmat                           # [H*W, Co*kh*kw]
    out = _col2im(cols, cout, ho, wo, kh, kw, stride, h, w)

    def bwd(g):
        gcols = _im2col(g, kh, kw, stride)       # [H*W, Co*kh*kw]
        dx = (gcols @ kmat.T).T.reshape(x.shape)
        dk = (xmat.T @ gcols).reshape(k.shape)
        return (dx, dk)

    return Tensor._from_op(out, (x, k), bwd)


def max_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; gradient goes to the first (row-major)
    maximal element of each window."""
    if x.ndim != 3:
        raise ShapeError(f"max_pool2d: expected [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(
            f"max_pool2d: extents ({h}x{w}) not divisible by window {window}"
        )
    ho, wo = h // window, w // window
    tiles = (
        x.data.reshape(c, ho, window, wo, window)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, ho, wo, window * window)
    )
    arg = np.argmax(tiles, axis=-1)  # first max in row-major window order
    out = np.take_along_axis(tiles, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        buf = np.zeros((c, ho, wo, window * window))
        np.put_along_axis(buf, arg[..., None], g[..., None], axis=-1)
        return (
            buf.reshape(c, ho, wo, window, window)
            .transpose(0, 1, 3, 2, 4)
            .reshape(c, h, w)
            .copy(),
        )

    return Tensor._from_op(out, (x,), bwd)
