from __future__ import annotations

import numpy as np
import pytest
import torch

from osmosis.denoiser import (
    GaussianOracleDenoiser,
    ToyUNet,
    ToyUNetConfig,
    check_denoiser_contract,
    gaussian_oracle_predict,
)
from osmosis.diffusion import predict_x0
from osmosis.errors import ConfigError, ContractError


class TestToyUNet:
    def test_zero_weights_predict_zero_eps(self):
        model = ToyUNet(ToyUNetConfig(channels=8, depth_levels=1))
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        x = torch.randn(2, 4, 8, 8)
        eps, var = model.predict(x, 3)
        assert torch.all(eps == 0)

    def test_fresh_model_predicts_zero_eps(self):
        # The output convolution is zero-initialized and bias-free.
        model = ToyUNet(ToyUNetConfig(channels=8, depth_levels=1))
        eps, _ = model.predict(torch.randn(1, 4, 8, 8), 0)
        assert torch.all(eps == 0)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        model = ToyUNet(ToyUNetConfig(channels=8, depth_levels=1, learn_variance=False)).double()
        for p in model.parameters():
            with torch.no_grad():
                p.add_(torch.randn(p.shape, dtype=torch.float64) * 0.05)
        x = torch.randn(1, 4, 8, 8, dtype=torch.float64, requires_grad=True)
        eps, _ = model.predict(x, 5)
        grad = torch.autograd.grad(eps.sum(), x)[0]

        rng = np.random.default_rng(0)
        h = 1e-6
        for _ in range(5):
            idx = (0, rng.integers(4), rng.integers(8), rng.integers(8))
            xp = x.detach().clone()
            xp[idx] += h
            xm = x.detach().clone()
            xm[idx] -= h
            with torch.no_grad():
                fp = model.predict(xp, 5)[0].sum().item()
                fm = model.predict(xm, 5)[0].sum().item()
            fd = (fp - fm) / (2 * h)
            assert grad[idx].item() == pytest.approx(fd, rel=1e-3, abs=1e-7)

    def test_translation_equivariance_interior(self):
        # The entry convolution is exactly shift-equivariant away from the
        # padded border.  The full net is only approximately so: its
        # bottleneck sees the whole image, so border padding leaks a small
        # amount everywhere.  Both are asserted, the latter as a bound.
        torch.manual_seed(1)
        model = ToyUNet(ToyUNetConfig(channels=8, depth_levels=2))
        for p in model.parameters():
            with torch.no_grad():
                p.add_(torch.randn(p.shape) * 0.05)
        stride = 4
        x = torch.zeros(1, 4, 32, 32)
        x[..., 8:20, 8:20] = torch.randn(1, 4, 12, 12, generator=torch.Generator().manual_seed(2))
        shifted = torch.roll(x, shifts=(stride, stride), dims=(-2, -1))

        with torch.no_grad():
            conv = model.conv_in(x)
            conv_shifted = model.conv_in(shifted)
        inner = (slice(None), slice(None), slice(2, 30), slice(2, 30))
        np.testing.assert_array_equal(
            conv_shifted[inner].numpy(), torch.roll(conv, (stride, stride), (-2, -1))[inner].numpy()
        )

        with torch.no_grad():
            out = model.predict(x, 3)[0]
            out_shifted = model.predict(shifted, 3)[0]
        rolled = torch.roll(out, shifts=(stride, stride), dims=(-2, -1))
        interior = (slice(None), slice(None), slice(12, 24), slice(12, 24))
        deviation = (out_shifted[interior] - rolled[interior]).abs().max()
        assert deviation.item() < 0.05 * out.abs().max().item()

    def test_rejects_bad_spatial_size(self):
        model = ToyUNet(ToyUNetConfig(channels=8, depth_levels=2))
        with pytest.raises(ConfigError):
            model.predict(torch.randn(1, 4, 10, 10), 0)

    def test_rejects_bad_channel_width(self):
        with pytest.raises(ConfigError):
            ToyUNetConfig(channels=12)

    def test_variance_head_shapes(self):
        model = ToyUNet(ToyUNetConfig(channels=8, depth_levels=1, learn_variance=True))
        eps, var = model.predict(torch.randn(2, 4, 8, 8), 1)
        assert eps.shape == (2, 4, 8, 8)
        assert var.shape == (2, 4, 8, 8)
        model2 = ToyUNet(ToyUNetConfig(channels=8, depth_levels=1, learn_variance=False))
        _, var2 = model2.predict(torch.randn(2, 4, 8, 8), 1)
        assert var2 is None


class TestGaussianOracle:
    def test_zero_eps_at_prior_mean(self, sched_small):
        mu = torch.full((4, 6, 6), 0.4)
        for t in (0, 10, 39):
            x_t = float(np.sqrt(sched_small.alpha_bar[t])) * mu
            eps = gaussian_oracle_predict(x_t, t, mu, 0.3, sched_small)
            assert eps.abs().max().item() < 1e-7

    def test_delta_prior_pins_x0(self, sched_small, torch_rng):
        mu = torch.full((4, 6, 6), -0.2, dtype=torch.float64)
        x_t = torch.randn((4, 6, 6), generator=torch_rng, dtype=torch.float64)
        for t in (3, 25):
            eps = gaussian_oracle_predict(x_t, t, mu, 1e-12, sched_small)
            x0 = predict_x0(x_t, t, eps, sched_small)
            np.testing.assert_allclose(x0.numpy(), mu.numpy(), atol=1e-8)

    def test_predict_x0_linear_in_x_t(self, sched_small):
        # Three collinear inputs must give collinear estimates (1e-10, float64).
        oracle = GaussianOracleDenoiser(torch.tensor(0.3, dtype=torch.float64), 0.05, sched_small)
        g = torch.Generator().manual_seed(9)
        a = torch.randn((4, 5, 5), generator=g, dtype=torch.float64)
        b = torch.randn((4, 5, 5), generator=g, dtype=torch.float64)
        mid = (a + b) / 2
        t = 17
        outs = [predict_x0(x, t, oracle.predict(x, t)[0], sched_small) for x in (a, b, mid)]
        np.testing.assert_allclose(
            outs[2].numpy(), ((outs[0] + outs[1]) / 2).numpy(), atol=1e-10, rtol=0
        )

    def test_rejects_nonpositive_variance(self, sched_small):
        with pytest.raises(ConfigError):
            GaussianOracleDenoiser(torch.zeros(4, 4, 4), 0.0, sched_small)


class TestContractSuite:
    def test_toy_unet_conforms(self):
        model = ToyUNet(ToyUNetConfig(channels=8, depth_levels=1))
        torch.manual_seed(0)
        for p in model.parameters():
            with torch.no_grad():
                p.add_(torch.randn(p.shape) * 0.05)
        check_denoiser_contract(model)

    def test_oracle_conforms(self, sched_small, oracle):
        check_denoiser_contract(oracle)

    def test_shape_violation_caught(self):
        class Bad:
            def predict(self, x_t, t):
                return x_t[..., :-1], None

        with pytest.raises(ContractError):
            check_denoiser_contract(Bad())

    def test_missing_gradient_path_caught(self):
        class Detached:
            def predict(self, x_t, t):
                return x_t.detach().clone(), None

        with pytest.raises(ContractError):
            check_denoiser_contract(Detached())

    def test_nonfinite_output_caught(self):
        class NaNs:
            def predict(self, x_t, t):
                return x_t * float("nan"), None

        with pytest.raises(ContractError):
            check_denoiser_contract(NaNs())
