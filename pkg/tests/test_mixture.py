import math

import numpy as np
import pytest
import torch
from scipy import stats

from anyvar.mixture import (
    MixtureParams,
    mixture_cdf,
    mixture_logpdf,
    mixture_moments,
    mixture_nll,
    mixture_quantile,
    mixture_sample,
)


def direct_params(weights, locs, scales, dfs):
    """Build MixtureParams from explicit numbers (bypassing the raw transform)."""
    w = torch.tensor(weights, dtype=torch.float64)
    return MixtureParams(
        log_weights=torch.log(w / w.sum(dim=-1, keepdim=True)),
        locs=torch.tensor(locs, dtype=torch.float64),
        scales=torch.tensor(scales, dtype=torch.float64),
        dfs=torch.tensor(dfs, dtype=torch.float64),
    )


class TestFromRaw:
    @pytest.mark.parametrize("scale_mag", [0.0, 1.0, 50.0])
    def test_constraints_for_arbitrary_raw(self, rng, scale_mag):
        raw = torch.tensor(rng.normal(0.0, max(scale_mag, 1e-3), size=(5, 7, 16)))
        mp = MixtureParams.from_raw(raw, 4)
        weights = mp.log_weights.exp()
        np.testing.assert_allclose(weights.sum(dim=-1).numpy(), 1.0, atol=1e-6)
        assert (mp.scales > 0).all()
        assert (mp.dfs > 2).all()

    def test_single_component_weight_is_one(self, rng):
        raw = torch.tensor(rng.normal(size=(3, 4)))
        mp = MixtureParams.from_raw(raw, 1)
        np.testing.assert_allclose(mp.log_weights.exp().numpy(), 1.0, atol=0)

    def test_wrong_width_rejected(self):
        with pytest.raises(ValueError):
            MixtureParams.from_raw(torch.zeros(2, 10), 4)


class TestNll:
    def test_cauchy_at_mode(self):
        # K=1, df=1 is a Cauchy; its density at the mode is 1/pi
        mp = direct_params([[1.0]], [[0.0]], [[1.0]], [[1.0]])
        nll = mixture_nll(mp, torch.zeros(1), torch.ones(1, dtype=torch.bool))
        assert abs(float(nll) - math.log(math.pi)) < 1e-9

    def test_mixture_collapse(self, rng):
        x = torch.tensor(rng.normal(size=6))
        mask = torch.ones(6, dtype=torch.bool)
        one = direct_params([[1.0]] * 6, [[0.3]] * 6, [[1.2]] * 6, [[5.0]] * 6)
        two = direct_params([[0.5, 0.5]] * 6, [[0.3, 0.3]] * 6, [[1.2, 1.2]] * 6, [[5.0, 5.0]] * 6)
        assert abs(float(mixture_nll(one, x, mask)) - float(mixture_nll(two, x, mask))) < 1e-9

    def test_gaussian_limit(self):
        mp = direct_params([[1.0]], [[0.0]], [[1.0]], [[1e6]])
        nll = mixture_nll(mp, torch.zeros(1), torch.ones(1, dtype=torch.bool))
        assert abs(float(nll) - 0.5 * math.log(2 * math.pi)) < 1e-3

    def test_empty_mask_rejected(self):
        mp = direct_params([[1.0]], [[0.0]], [[1.0]], [[3.0]])
        with pytest.raises(ValueError, match="no forecast targets"):
            mixture_nll(mp, torch.zeros(1), torch.zeros(1, dtype=torch.bool))

    def test_nll_matches_scipy_mixture(self, rng):
        # independent oracle: scipy component densities combined by hand
        w = np.array([0.2, 0.5, 0.3])
        locs = np.array([-1.0, 0.5, 2.0])
        scales = np.array([0.5, 1.0, 2.0])
        dfs = np.array([3.0, 5.0, 10.0])
        x = rng.normal(size=11)
        mp = direct_params(np.tile(w, (11, 1)), np.tile(locs, (11, 1)),
                           np.tile(scales, (11, 1)), np.tile(dfs, (11, 1)))
        expected = -np.mean(np.log(
            (w * stats.t.pdf((x[:, None] - locs) / scales, dfs) / scales).sum(axis=1)
        ))
        got = float(mixture_nll(mp, torch.tensor(x), torch.ones(11, dtype=torch.bool)))
        assert abs(got - expected) < 1e-10


class TestMoments:
    def test_mean_single_component(self):
        mp = direct_params([[1.0]], [[3.0]], [[0.7]], [[8.0]])
        mean, _ = mixture_moments(mp)
        np.testing.assert_allclose(mean, 3.0, atol=1e-12)

    def test_variance_df4(self):
        mp = direct_params([[1.0]], [[0.0]], [[1.0]], [[4.0]])
        _, var = mixture_moments(mp)
        np.testing.assert_allclose(var, 2.0, atol=1e-12)

    def test_sample_mean_within_three_se(self, rng):
        mp = direct_params([[0.3, 0.7]], [[-2.0, 1.0]], [[0.5, 1.5]], [[6.0, 4.0]])
        mean, var = mixture_moments(mp)
        draws = mixture_sample(mp, 1_000_000, rng)
        se = math.sqrt(var[0] / draws.shape[0])
        assert abs(draws.mean() - mean[0]) < 3 * se


class TestQuantile:
    def test_symmetric_median_zero(self):
        mp = direct_params([[0.5, 0.5]], [[-1.0, 1.0]], [[0.8, 0.8]], [[4.0, 4.0]])
        q = mixture_quantile(mp, 0.5)
        assert abs(q[0]) < 1e-6

    def test_single_component_matches_scipy_ppf(self):
        mp = direct_params([[1.0]], [[0.7]], [[2.0]], [[5.0]])
        for alpha in (0.1, 0.25, 0.5, 0.9):
            expected = 0.7 + 2.0 * stats.t.ppf(alpha, 5.0)
            assert abs(mixture_quantile(mp, alpha)[0] - expected) < 1e-6

    def test_cdf_inverse_identity(self, rng):
        raw = torch.tensor(rng.normal(size=(4, 12)))
        mp = MixtureParams.from_raw(raw, 3)
        for alpha in np.arange(0.1, 0.95, 0.1):
            q = mixture_quantile(mp, float(alpha))
            np.testing.assert_allclose(mixture_cdf(mp, q), alpha, atol=1e-5)

    def test_alpha_bounds(self):
        mp = direct_params([[1.0]], [[0.0]], [[1.0]], [[3.0]])
        with pytest.raises(ValueError):
            mixture_quantile(mp, 0.0)
        with pytest.raises(ValueError):
            mixture_quantile(mp, 1.0)


class TestLogpdfShapes:
    def test_broadcast_over_positions(self, rng):
        raw = torch.tensor(rng.normal(size=(2, 3, 4, 8)))
        mp = MixtureParams.from_raw(raw, 2)
        x = torch.tensor(rng.normal(size=(2, 3, 4)))
        assert mixture_logpdf(mp, x).shape == (2, 3, 4)
