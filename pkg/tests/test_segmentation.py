"""U-Net shape contracts, zero propagation, gradients, and locality probes."""

import numpy as np
import pytest

from docunet import tensor as T
from docunet.errors import ConfigError, ShapeError
from docunet.model import _unet_budget
from docunet.params import ParamRegistry
from docunet.segmentation import (
    DESK_SCHEDULE,
    PAPER_SCHEDULE,
    PairwiseFFN,
    UNet,
    UNetConfig,
)
from docunet.tensor import Tensor

RNG = np.random.default_rng(11)


def make_unet(channels=DESK_SCHEDULE, seed=0):
    registry = ParamRegistry()
    net = UNet(UNetConfig(channels=tuple(channels)), registry,
               np.random.default_rng(seed))
    return net, registry


class TestShapes:
    def test_desk_schedule_n8(self):
        net, _ = make_unet()
        out = net.forward(Tensor(RNG.normal(size=(3, 8, 8))))
        assert out.shape == (16, 8, 8)

    @pytest.mark.parametrize("n", [5, 6, 7, 9, 12, 42])
    def test_spatial_preserved_for_any_n(self, n):
        net, _ = make_unet()
        out = net.forward(Tensor(RNG.normal(size=(3, n, n))))
        assert out.shape == (16, n, n)

    def test_paper_schedule_shape_only(self):
        net, registry = make_unet(PAPER_SCHEDULE)
        out = net.forward(Tensor(RNG.normal(size=(3, 8, 8))))
        assert out.shape == (256, 8, 8)

    def test_down_block_halves_extent(self):
        net, _ = make_unet()
        pooled, skip = net.down_block(Tensor(RNG.normal(size=(3, 8, 8))),
                                      net.d1a, net.d1b)
        assert skip.shape == (16, 8, 8)
        assert pooled.shape == (16, 4, 4)

    def test_channel_accounting_both_schedules(self):
        for schedule in (DESK_SCHEDULE, PAPER_SCHEDULE):
            cin, c1, c2, c3, c4, cout = schedule
            net, _ = make_unet(schedule)
            assert net.d1a[0].shape == (c1, cin, 3, 3)
            assert net.d2a[0].shape == (c2, c1, 3, 3)
            # upsampled channels + skip channels enter the up-block convs
            assert net.u1t[0].shape == (c2, c3, 2, 2)
            assert net.u1a[0].shape == (c3, c3 + c2, 3, 3)
            assert net.u2t[0].shape == (c3, c4, 2, 2)
            assert net.u2a[0].shape == (c4, c4 + c1, 3, 3)
            assert net.final[0].shape == (cout, c4, 1, 1)

    def test_bad_schedule_rejected(self):
        with pytest.raises(ConfigError):
            UNetConfig(channels=(3, 16, 32)).validate()

    def test_wrong_input_channels_rejected(self):
        net, _ = make_unet()
        with pytest.raises(ShapeError, match="channels"):
            net.forward(Tensor(RNG.normal(size=(5, 8, 8))))


class TestZeroPropagation:
    def test_zero_input_zero_biases_zero_output(self):
        net, registry = make_unet()
        out = net.forward(Tensor(np.zeros((3, 8, 8))))
        assert not np.any(out.data)

    def test_down_block_zero(self):
        net, _ = make_unet()
        pooled, skip = net.down_block(Tensor(np.zeros((3, 4, 4))),
                                      net.d1a, net.d1b)
        assert not np.any(pooled.data) and not np.any(skip.data)

    def test_up_block_zero(self):
        net, _ = make_unet()
        out = net.up_block(Tensor(np.zeros((32, 2, 2))),
                           Tensor(np.zeros((32, 4, 4))),
                           net.u1t, net.u1a, net.u1b)
        assert not np.any(out.data)


class TestGradients:
    def test_full_network_finite_differences(self):
        net, registry = make_unet()
        # keep relu inputs off their kinks: nonzero biases, generic input
        noise = np.random.default_rng(3)
        for _, p in registry.items():
            p.data = p.data + noise.normal(0.0, 0.05, size=p.shape)
        x = Tensor(RNG.normal(size=(3, 8, 8)))
        probe = Tensor(RNG.normal(size=(16, 8, 8)))

        def loss_value():
            return T.reduce_sum(T.mul(net.forward(x), probe)).item()

        registry.zero_grad()
        T.reduce_sum(T.mul(net.forward(x), probe)).backward()
        eps = 1e-5
        worst = 0.0
        for name, param in registry.items():
            flat = param.data.reshape(-1)
            grad = param.grad.reshape(-1)
            for idx in noise.choice(flat.size, size=min(3, flat.size),
                                    replace=False):
                orig = flat[idx]
                flat[idx] = orig + eps
                hi = loss_value()
                flat[idx] = orig - eps
                lo = loss_value()
                flat[idx] = orig
                numeric = (hi - lo) / (2 * eps)
                denom = max(abs(grad[idx]), abs(numeric), 1e-3)
                worst = max(worst, abs(grad[idx] - numeric) / denom)
        assert worst <= 1e-4


class TestLocalityProbes:
    """Perturbation probes: the U-Net mixes across cells, the FFN must not."""

    @staticmethod
    def _changed_cells(forward, n, cin, cell=(3, 3), delta=0.5):
        x = RNG.normal(size=(cin, n, n))
        base = forward(Tensor(x)).data
        x2 = x.copy()
        x2[:, cell[0], cell[1]] += delta
        bumped = forward(Tensor(x2)).data
        moved = np.abs(bumped - base).sum(axis=0) > 1e-12
        return moved

    def test_unet_reaches_beyond_the_cell(self):
        net, registry = make_unet()
        noise = np.random.default_rng(5)
        for _, p in registry.items():
            p.data = p.data + noise.normal(0.0, 0.1, size=p.shape)
        moved = self._changed_cells(net.forward, n=8, cin=3)
        assert moved[3, 3]
        ii, jj = np.nonzero(moved)
        cheb = np.maximum(np.abs(ii - 3), np.abs(jj - 3))
        assert cheb.max() > 0

    def test_ffn_strictly_local(self):
        registry = ParamRegistry()
        ffn = PairwiseFFN(3, 16, _unet_budget(DESK_SCHEDULE), registry,
                          np.random.default_rng(2))
        moved = self._changed_cells(ffn.forward, n=8, cin=3)
        assert moved[3, 3]
        moved[3, 3] = False
        assert not moved.any()


class TestPairwiseFFN:
    def test_parameter_budget_within_tolerance(self):
        budget = _unet_budget(DESK_SCHEDULE)
        registry = ParamRegistry()
        ffn = PairwiseFFN(3, 16, budget, registry, np.random.default_rng(0))
        actual = registry.count()
        assert abs(actual - budget) <= 0.10 * budget
        assert actual == PairwiseFFN.param_count(3, 16, ffn.hidden)

    def test_unet_budget_matches_registry(self):
        net, registry = make_unet()
        assert registry.count() == _unet_budget(DESK_SCHEDULE)

    def test_shape_contract(self):
        registry = ParamRegistry()
        ffn = PairwiseFFN(3, 16, _unet_budget(DESK_SCHEDULE), registry,
                          np.random.default_rng(0))
        out = ffn.forward(Tensor(RNG.normal(size=(3, 7, 7))))
        assert out.shape == (16, 7, 7)
