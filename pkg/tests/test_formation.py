from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osmosis.errors import ConfigError, FormationDomainError
from osmosis.formation import (
    DepthScaling,
    WaterParams,
    apply_formation,
    formation_jacobian,
    scale_depth,
)

APPENDIX_PHI = dict(
    phi_a=(1.1, 0.95, 0.95), phi_b=(0.95, 0.8, 0.8), phi_inf=(0.14, 0.29, 0.49)
)


def random_instance(rng, n=1):
    J = rng.uniform(0.0, 1.0, size=(n, 3))
    D = rng.uniform(0.05, 4.0, size=n)
    phi = WaterParams(
        rng.uniform(0.05, 2.0, 3), rng.uniform(0.05, 2.0, 3), rng.uniform(0.0, 1.0, 3)
    )
    return J, D, phi


class TestApplyFormation:
    def test_zero_depth_is_identity(self, rng):
        J = rng.uniform(0, 1, (5, 7, 3))
        phi = WaterParams(**APPENDIX_PHI)
        I = apply_formation(J, np.zeros((5, 7)), phi, check=False)
        np.testing.assert_allclose(I, J, atol=1e-12, rtol=0)

    def test_veiling_color_fixed_point(self, rng):
        # J equal to the veiling color with tied coefficients cancels both terms.
        phi = WaterParams((1.3, 0.9, 0.7), (1.3, 0.9, 0.7), (0.2, 0.4, 0.6), tied=True)
        J = np.broadcast_to(phi.phi_inf, (4, 4, 3)).copy()
        D = rng.uniform(0.1, 5.0, (4, 4))
        I = apply_formation(J, D, phi)
        np.testing.assert_allclose(I, J, atol=1e-12, rtol=0)

    def test_appendix_scalar_value(self):
        # Frozen from a 50-digit mpmath evaluation of the pixel formula:
        # exp(-1.1) + 0.14*(1 - exp(-0.95)) = 0.41872734041444937...
        phi = WaterParams(**APPENDIX_PHI)
        I = apply_formation(np.ones(3), np.float64(1.0), phi)
        assert I[0] == pytest.approx(0.41872734041444937, abs=1e-12)

    def test_high_precision_oracle(self):
        mp = pytest.importorskip("mpmath")
        mp.mp.dps = 50
        phi = WaterParams(**APPENDIX_PHI)
        expected = mp.e ** (-mp.mpf("1.1")) + mp.mpf("0.14") * (1 - mp.e ** (-mp.mpf("0.95")))
        I = apply_formation(np.ones(3), np.float64(1.0), phi)
        assert abs(I[0] - float(expected)) < 1e-14

    def test_rejects_nonpositive_depth(self, rng):
        phi = WaterParams(**APPENDIX_PHI)
        D = rng.uniform(0.1, 1.0, (4, 4))
        D[0, 0] = 0.0
        D[1, 2] = -3.0
        with pytest.raises(FormationDomainError, match="2 depth pixels"):
            apply_formation(np.ones((4, 4, 3)), D, phi)

    def test_rejects_nonfinite(self):
        phi = WaterParams(**APPENDIX_PHI)
        with pytest.raises(FormationDomainError):
            apply_formation(np.ones((2, 2, 3)), np.full((2, 2), np.nan), phi)

    def test_asymptote_reaches_veiling_color(self, rng):
        phi = WaterParams(**APPENDIX_PHI)
        far = 50.0 / max(phi.phi_a.max(), phi.phi_b.max())
        J = rng.uniform(0, 1, (3, 3, 3))
        I = apply_formation(J, np.full((3, 3), far), phi)
        np.testing.assert_allclose(I, np.broadcast_to(phi.phi_inf, I.shape), atol=1e-8, rtol=0)

    def test_monotone_toward_veiling_color(self, rng):
        # With tied coefficients, I - phi_inf = (J - phi_inf) e^{-a D}, so the
        # gap decays monotonically.  (Untied coefficients can overshoot the
        # veiling color once before settling; only the asymptote holds there.)
        phi = WaterParams((1.1, 0.95, 0.95), (1.1, 0.95, 0.95), (0.14, 0.29, 0.49), tied=True)
        J = rng.uniform(0, 1, (16, 3))
        depths = np.linspace(0.1, 10.0, 40)
        gaps = np.stack(
            [np.abs(apply_formation(J, np.full(16, d), phi) - phi.phi_inf) for d in depths]
        )
        assert np.all(np.diff(gaps, axis=0) <= 1e-12)

    def test_pixelwise_local(self, rng):
        phi = WaterParams(**APPENDIX_PHI)
        J = rng.uniform(0, 1, (30, 3))
        D = rng.uniform(0.1, 3.0, 30)
        perm = rng.permutation(30)
        I = apply_formation(J, D, phi)
        I_perm = apply_formation(J[perm], D[perm], phi)
        np.testing.assert_array_equal(I[perm], I_perm)


class TestJacobian:
    def test_zero_depth_limits(self):
        phi = WaterParams(**APPENDIX_PHI)
        jac = formation_jacobian(np.ones((2, 2, 3)), np.zeros((2, 2)), phi, check=False)
        np.testing.assert_array_equal(jac.d_I_d_phi_a, 0.0)
        np.testing.assert_array_equal(jac.d_I_d_phi_inf, 0.0)
        np.testing.assert_array_equal(jac.d_I_d_J, 1.0)

    def test_no_backscatter_kills_phi_b_partial(self, rng):
        phi = WaterParams((1.0, 1.0, 1.0), (0.8, 0.8, 0.8), (0.0, 0.0, 0.0))
        jac = formation_jacobian(rng.uniform(0, 1, (3, 3, 3)), rng.uniform(0.1, 2, (3, 3)), phi)
        np.testing.assert_array_equal(jac.d_I_d_phi_b, 0.0)

    def test_matches_central_differences(self, rng):
        # 100 random float64 instances, step 1e-6, relative error <= 1e-5.
        h = 1e-6
        J, D, phi = random_instance(rng, n=100)
        jac = formation_jacobian(J, D, phi)

        def rel_err(analytic, numeric):
            scale = np.maximum(np.abs(numeric), 1e-3)
            return np.abs(analytic - numeric) / scale

        fd_J = (apply_formation(J + h, D, phi) - apply_formation(J - h, D, phi)) / (2 * h)
        assert rel_err(jac.d_I_d_J, fd_J).max() < 1e-5

        fd_D = (apply_formation(J, D + h, phi) - apply_formation(J, D - h, phi)) / (2 * h)
        assert rel_err(jac.d_I_d_D, fd_D).max() < 1e-5

        for name, attr in (("phi_a", "d_I_d_phi_a"), ("phi_b", "d_I_d_phi_b"), ("phi_inf", "d_I_d_phi_inf")):
            for c in range(3):
                for sign in (+1, -1):
                    bumped = phi.copy()
                    getattr(bumped, name)[c] += sign * h
                    if sign > 0:
                        hi = apply_formation(J, D, bumped)
                    else:
                        lo = apply_formation(J, D, bumped)
                fd = (hi - lo)[:, c] / (2 * h)
                assert rel_err(getattr(jac, attr)[:, c], fd).max() < 1e-5


class TestWaterParams:
    def test_haze_implies_tied(self):
        phi = WaterParams(0.5, 0.5, (0.1, 0.2, 0.3), haze=True)
        assert phi.tied

    def test_validate_catches_range_violations(self):
        with pytest.raises(ConfigError):
            WaterParams((-0.1, 0, 0), (0, 0, 0), (0, 0, 0)).validate()
        with pytest.raises(ConfigError):
            WaterParams((0.1, 0, 0), (0, 0, 0), (0, 0, 1.2)).validate()
        with pytest.raises(ConfigError):
            WaterParams((1, 1, 1), (2, 2, 2), (0, 0, 0), tied=True).validate()

    @given(
        a=st.lists(st.floats(-2, 4), min_size=3, max_size=3),
        b=st.lists(st.floats(-2, 4), min_size=3, max_size=3),
        inf=st.lists(st.floats(-1, 2), min_size=3, max_size=3),
        haze=st.booleans(),
    )
    @settings(max_examples=60, deadline=None)
    def test_projection_restores_invariants(self, a, b, inf, haze):
        phi = WaterParams(a, b, inf, tied=True, haze=haze).projected()
        phi.validate()
        np.testing.assert_array_equal(phi.phi_a, phi.phi_b)


class TestScaleDepth:
    @pytest.mark.parametrize(
        "d_hat,scaling,expected",
        [
            (-1.0, (1.4, 1.4), 0.56),
            (1.0, (0.5, 1.0), 1.0),
            (0.0, (1.4, 1.4), 1.96),
        ],
    )
    def test_reference_points(self, d_hat, scaling, expected):
        out = scale_depth(np.float64(d_hat), DepthScaling(*scaling))
        assert out == pytest.approx(expected, abs=1e-12)

    def test_range_endpoints(self):
        s = DepthScaling(1.4, 1.4)
        assert scale_depth(np.array([-1.0, 1.0]), s) == pytest.approx([0.56, 3.36])

    def test_invalid_scaling_rejected(self):
        with pytest.raises(ConfigError):
            DepthScaling(1.0, 0.5)  # maps -1 to -0.5
        with pytest.raises(ConfigError):
            DepthScaling(-1.0, 2.0)

    def test_overshoot_check(self):
        with pytest.raises(FormationDomainError):
            scale_depth(np.array([1.3]), DepthScaling(1.4, 1.4), check_range=0.1)
        scale_depth(np.array([1.05]), DepthScaling(1.4, 1.4), check_range=0.1)
