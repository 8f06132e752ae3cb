"""The U-shaped network over the pair-feature image, and its ablation stand-in.

Two down-sampling blocks (conv, relu, conv, relu, pool; channels grow) and
two up-sampling blocks (transposed conv, skip concat, conv, relu, conv,
relu; channels shrink), closed by a 1x1 projection. Spatial extent is
preserved for any N: inputs are zero-padded up to a multiple of 4 and the
output cropped back symmetrically.

``PairwiseFFN`` is the drop-in replacement used by the no-segmentation
ablation: an MLP applied to every cell independently, sized to match the
U-Net's parameter count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .params import ParamRegistry, glorot
from .tensor import Tensor

DESK_SCHEDULE = (3, 16, 32, 16, 8, 16)
PAPER_SCHEDULE = (3, 256, 512, 256, 128, 256)


@dataclass
class UNetConfig:
    channels: tuple[int, ...] = DESK_SCHEDULE  # [C_in, c1, c2, c3, c4, C_out]
    kernel_size: int = 3
    pool_window: int = 2

    def validate(self) -> None:
        if len(self.channels) != 6:
            raise ConfigError(
                f"channel schedule needs 6 entries, got {self.channels}"
            )
        if any(c < 1 for c in self.channels):
            raise ConfigError(f"channel counts must be positive: {self.channels}")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel size must be odd to preserve extent")


def _chan_bias(b: Tensor, h: int, w: int) -> Tensor:
    c = b.shape[0]
    return T.reshape(T.repeat_axis(T.reshape(b, c, 1), h * w, axis=1), c, h, w)


class UNet:
    def __init__(self, cfg: UNetConfig, registry: ParamRegistry,
                 rng: np.random.Generator, prefix: str = "unet"):
        cfg.validate()
        self.cfg = cfg
        cin, c1, c2, c3, c4, cout = cfg.channels
        ks = cfg.kernel_size
        reg = registry.register

        def conv_param(name, in_ch, out_ch, k):
            fan_in = in_ch * k * k
            weight = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                size=(out_ch, in_ch, k, k))
            w = reg(f"{prefix}.{name}.w", Tensor(weight))
            b = reg(f"{prefix}.{name}.b", Tensor(np.zeros(out_ch)), bias=True)
            return w, b

        self.d1a = conv_param("down1.conv_a", cin, c1, ks)
        self.d1b = conv_param("down1.conv_b", c1, c1, ks)
        self.d2a = conv_param("down2.conv_a", c1, c2, ks)
        self.d2b = conv_param("down2.conv_b", c2, c2, ks)
        # transposed kernels are [in, out, 2, 2]
        self.u1t = (
            reg(f"{prefix}.up1.tconv.w",
                Tensor(rng.normal(0.0, np.sqrt(2.0 / (c2 * 4)), size=(c2, c3, 2, 2)))),
            reg(f"{prefix}.up1.tconv.b", Tensor(np.zeros(c3)), bias=True),
        )
        self.u1a = conv_param("up1.conv_a", c3 + c2, c3, ks)
        self.u1b = conv_param("up1.conv_b", c3, c3, ks)
        self.u2t = (
            reg(f"{prefix}.up2.tconv.w",
                Tensor(rng.normal(0.0, np.sqrt(2.0 / (c3 * 4)), size=(c3, c4, 2, 2)))),
            reg(f"{prefix}.up2.tconv.b", Tensor(np.zeros(c4)), bias=True),
        )
        self.u2a = conv_param("up2.conv_a", c4 + c1, c4, ks)
        self.u2b = conv_param("up2.conv_b", c4, c4, ks)
        self.final = conv_param("final", c4, cout, 1)

    @property
    def out_channels(self) -> int:
        return self.cfg.channels[-1]

    def _conv(self, x: Tensor, wb, padding: int) -> Tensor:
        w, b = wb
        out = T.conv2d(x, w, stride=1, padding=padding)
        return out + _chan_bias(b, out.shape[1], out.shape[2])

    def down_block(self, x: Tensor, wb_a, wb_b) -> tuple[Tensor, Tensor]:
        """conv-relu-conv-relu, skip taken pre-pool, then 2x2 max pool."""
        p = self.cfg.kernel_size // 2
        h = T.relu(self._conv(x, wb_a, p))
        skip = T.relu(self._conv(h, wb_b, p))
        return T.max_pool2d(skip, self.cfg.pool_window), skip

    def up_block(self, x: Tensor, skip: Tensor, wb_t, wb_a, wb_b) -> Tensor:
        """Transposed conv (doubles extent), concat skip, conv-relu-conv-relu."""
        wt, bt = wb_t
        up = T.transposed_conv2d(x, wt, stride=2)
        up = up + _chan_bias(bt, up.shape[1], up.shape[2])
        if up.shape[1:] != skip.shape[1:]:
            raise ShapeError(
                f"up_block: upsampled extent {up.shape} does not match "
                f"skip {skip.shape}"
            )
        h = T.concat([up, skip], axis=0)
        p = self.cfg.kernel_size // 2
        h = T.relu(self._conv(h, wb_a, p))
        return T.relu(self._conv(h, wb_b, p))

    def forward(self, x: Tensor) -> Tensor:
        """[C_in, N, N] -> [C_out, N, N]; N is padded internally to 4k."""
        cin, n, n2 = x.shape
        if n != n2:
            raise ShapeError(f"unet expects a square input, got {x.shape}")
        if cin != self.cfg.channels[0]:
            raise ShapeError(
                f"unet expects {self.cfg.channels[0]} input channels, got {cin}"
            )
        target = -(-n // 4) * 4
        before = (target - n) // 2
        after = target - n - before
        if target != n:
            x = T.pad(x, [(0, 0), (before, after), (before, after)])
        pooled1, skip1 = self.down_block(x, self.d1a, self.d1b)
        pooled2, skip2 = self.down_block(pooled1, self.d2a, self.d2b)
        u1 = self.up_block(pooled2, skip2, self.u1t, self.u1a, self.u1b)
        u2 = self.up_block(u1, skip1, self.u2t, self.u2a, self.u2b)
        out = self._conv(u2, self.final, 0)
        if target != n:
            out = out[:, before:before + n, before:before + n]
        return out


class PairwiseFFN:
    """Strictly per-cell MLP with the same [C,N,N] contract as the U-Net.

    Hidden width is solved so the parameter count lands within the given
    tolerance of ``target_params`` (the U-Net it replaces).
    """

    def __init__(self, cin: int, cout: int, target_params: int,
                 registry: ParamRegistry, rng: np.random.Generator,
                 tolerance: float = 0.10, prefix: str = "ffn"):
        self.cin, self.cout = cin, cout
        hidden = self._solve_hidden(cin, cout, target_params)
        actual = self.param_count(cin, cout, hidden)
        if abs(actual - target_params) > tolerance * target_params:
            raise ConfigError(
                f"cannot match parameter budget {target_params} "
                f"(best {actual} at hidden={hidden})"
            )
        self.hidden = hidden
        reg = registry.register
        self.w1 = reg(f"{prefix}.w1", Tensor(glorot(rng, cin, hidden)))
        self.b1 = reg(f"{prefix}.b1", Tensor(np.zeros(hidden)), bias=True)
        self.w2 = reg(f"{prefix}.w2", Tensor(glorot(rng, hidden, hidden)))
        self.b2 = reg(f"{prefix}.b2", Tensor(np.zeros(hidden)), bias=True)
        self.w3 = reg(f"{prefix}.w3", Tensor(glorot(rng, hidden, cout)))
        self.b3 = reg(f"{prefix}.b3", Tensor(np.zeros(cout)), bias=True)

    @property
    def out_channels(self) -> int:
        return self.cout

    @staticmethod
    def param_count(cin: int, cout: int, h: int) -> int:
        return (cin * h + h) + (h * h + h) + (h * cout + cout)

    @classmethod
    def _solve_hidden(cls, cin: int, cout: int, target: int) -> int:
        # params(h) = h^2 + h(cin + cout + 2) + cout; pick the closest h
        b = cin + cout + 2
        est = int((-b + np.sqrt(b * b + 4 * max(target - cout, 1))) / 2)
        candidates = [h for h in range(max(1, est - 2), est + 3)]
        return min(candidates, key=lambda h: abs(cls.param_count(cin, cout, h) - target))

    def forward(self, x: Tensor) -> Tensor:
        cin, n, m = x.shape
        if cin != self.cin:
            raise ShapeError(f"ffn expects {self.cin} channels, got {cin}")
        flat = T.reshape(T.transpose(x, 1, 2, 0), n * m, cin)
        h = T.relu(T.matmul(flat, self.w1) + T.repeat_axis(
            T.reshape(self.b1, 1, self.hidden), n * m, axis=0))
        h = T.relu(T.matmul(h, self.w2) + T.repeat_axis(
            T.reshape(self.b2, 1, self.hidden), n * m, axis=0))
        out = T.matmul(h, self.w3) + T.repeat_axis(
            T.reshape(self.b3, 1, self.cout), n * m, axis=0)
        return T.transpose(T.reshape(out, n, m, self.cout), 2, 0, 1)
