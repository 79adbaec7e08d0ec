import math

import numpy as np
import pytest
import torch

from entdiff.errors import ConfigError
from entdiff.numeric import (
    GmmParams,
    NumericEmbeddingConfig,
    SCALE_FLOOR,
    dice_features,
    embed_numeric,
    gmm_from_raw,
    gmm_nll,
    gmm_point,
    gmm_sample,
    mse_params,
    periodic_features,
)

HALF_LOG_TWO_PI = 0.5 * math.log(2 * math.pi)


def params(weights, means, scales) -> GmmParams:
    return GmmParams(
        weights=torch.tensor(weights, dtype=torch.float64),
        means=torch.tensor(means, dtype=torch.float64),
        scales=torch.tensor(scales, dtype=torch.float64),
    )


class TestGmmNll:
    def test_standard_normal_at_mode(self):
        value = float(gmm_nll(params([1.0], [0.0], [1.0]), 0.0))
        assert value == pytest.approx(HALF_LOG_TWO_PI, abs=1e-9)
        assert value == pytest.approx(0.918939, abs=1e-6)

    def test_mixture_collapse(self):
        two = float(gmm_nll(params([0.3, 0.7], [0.0, 0.0], [1.0, 1.0]), 1.7))
        one = float(gmm_nll(params([1.0], [0.0], [1.0]), 1.7))
        assert two == pytest.approx(one, abs=1e-12)

    def test_symmetric_two_component(self):
        value = float(gmm_nll(params([0.5, 0.5], [-1.0, 1.0], [1.0, 1.0]), 0.0))
        assert value == pytest.approx(0.5 + HALF_LOG_TWO_PI, abs=1e-9)
        assert value == pytest.approx(1.418939, abs=1e-6)

    def test_component_permutation_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            w = rng.dirichlet([1, 1, 1])
            m = rng.normal(size=3)
            s = rng.uniform(0.1, 2, size=3)
            x = rng.normal()
            perm = rng.permutation(3)
            a = float(gmm_nll(params(w, m, s), x))
            b = float(gmm_nll(params(w[perm], m[perm], s[perm]), x))
            assert a == pytest.approx(b, rel=1e-12)

    def test_batched_matches_scalar(self):
        p = gmm_from_raw(
            torch.randn(4, 3, dtype=torch.float64),
            torch.randn(4, 3, dtype=torch.float64),
            torch.randn(4, 3, dtype=torch.float64),
        )
        xs = torch.randn(4, dtype=torch.float64)
        batched = gmm_nll(p, xs)
        for i in range(4):
            single = gmm_nll(
                GmmParams(p.weights[i], p.means[i], p.scales[i]), float(xs[i])
            )
            assert float(batched[i]) == pytest.approx(float(single), rel=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            gmm_nll(params([1.0], [0.0], [1.0]), float("nan"))

    def test_minimum_at_target_for_unit_gaussian(self):
        x = 0.37
        at_x = float(gmm_nll(params([1.0], [x], [1.0]), x))
        for delta in (1e-3, -1e-3, 0.1):
            assert at_x < float(gmm_nll(params([1.0], [x + delta], [1.0]), x))


class TestGmmGradients:
    def test_gradcheck_against_central_differences(self):
        rng = np.random.default_rng(42)
        h = 1e-6
        for _ in range(100):
            m = int(rng.integers(1, 6))
            logits = torch.tensor(rng.normal(size=m), requires_grad=True)
            means = torch.tensor(rng.normal(size=m), requires_grad=True)
            raw_scales = torch.tensor(rng.normal(size=m), requires_grad=True)
            x = float(rng.normal())

            def f(lo, me, sc):
                return gmm_nll(gmm_from_raw(lo, me, sc), x)

            loss = f(logits, means, raw_scales)
            loss.backward()
            tensors = (logits, means, raw_scales)
            for which, tensor in enumerate(tensors):
                for j in range(m):
                    plus = [t.detach().clone() for t in tensors]
                    minus = [t.detach().clone() for t in tensors]
                    plus[which][j] += h
                    minus[which][j] -= h
                    fd = (float(f(*plus)) - float(f(*minus))) / (2 * h)
                    analytic = float(tensor.grad[j])
                    assert analytic == pytest.approx(fd, rel=1e-4, abs=1e-7)


class TestGmmSample:
    def test_degenerate_component_concentrates(self):
        rng = np.random.default_rng(1)
        p = gmm_from_raw(
            torch.tensor([0.0]), torch.tensor([3.0]), torch.tensor([-40.0])
        )  # softplus(-40) ~ 0, so scale ~ floor
        draws = np.array([gmm_sample(p, rng) for _ in range(10_000)])
        assert abs(draws.mean() - 3.0) < 1e-3
        assert draws.std() <= 2 * SCALE_FLOOR

    def test_bimodal_mixture(self):
        rng = np.random.default_rng(2)
        p = params([0.5, 0.5], [-1.0, 1.0], [0.1, 0.1])
        draws = np.array([gmm_sample(p, rng) for _ in range(10_000)])
        assert abs(draws.mean()) < 0.05
        middle = np.mean(np.abs(draws) < 0.5)
        assert middle < 0.05

    def test_deterministic_given_seed(self):
        p = params([0.4, 0.6], [0.0, 2.0], [0.5, 0.25])
        a = [gmm_sample(p, np.random.default_rng(9)) for _ in range(5)]
        b = [gmm_sample(p, np.random.default_rng(9)) for _ in range(5)]
        assert a == b

    def test_sampling_nll_matches_quadrature_entropy(self):
        p = params([0.3, 0.7], [-0.5, 1.0], [0.3, 0.6])
        rng = np.random.default_rng(3)
        draws = np.array([gmm_sample(p, rng) for _ in range(100_000)])
        empirical = float(
            np.mean([float(gmm_nll(p, torch.tensor(d, dtype=torch.float64))) for d in draws[:20_000]])
        )
        # independent oracle: differential entropy by quadrature
        grid = np.linspace(-6, 8, 20_001)
        w = p.weights.numpy()
        m = p.means.numpy()
        s = p.scales.numpy()
        density = sum(
            wi * np.exp(-0.5 * ((grid - mi) / si) ** 2) / (si * math.sqrt(2 * math.pi))
            for wi, mi, si in zip(w, m, s)
        )
        entropy = float(-np.trapezoid(density * np.log(density + 1e-300), grid))
        assert empirical == pytest.approx(entropy, rel=0.02)


class TestGmmPoint:
    @pytest.mark.parametrize(
        "w,m,expected",
        [([1.0], [2.5], 2.5), ([0.5, 0.5], [-1.0, 1.0], 0.0), ([0.2, 0.8], [0.0, 10.0], 8.0)],
    )
    def test_values(self, w, m, expected):
        assert gmm_point(params(w, m, [1.0] * len(w))) == pytest.approx(expected, abs=1e-12)


class TestMseMode:
    def test_nll_values(self):
        zero = mse_params(torch.tensor(0.0, dtype=torch.float64))
        one = mse_params(torch.tensor(1.0, dtype=torch.float64))
        assert float(gmm_nll(zero, 0.0)) == pytest.approx(HALF_LOG_TWO_PI, abs=1e-12)
        assert float(gmm_nll(one, 0.0)) == pytest.approx(0.5 + HALF_LOG_TWO_PI, abs=1e-12)

    def test_gradient_is_residual(self):
        mean = torch.tensor(1.0, dtype=torch.float64, requires_grad=True)
        loss = gmm_nll(mse_params(mean), 0.0)
        loss.backward()
        assert float(mean.grad) == pytest.approx(1.0, abs=1e-12)


class TestEmbeddings:
    def test_periodic_at_zero(self):
        cfg = NumericEmbeddingConfig(kind="periodic", dim=8)
        vec = embed_numeric(0.0, cfg)
        assert torch.allclose(vec[:4], torch.zeros(4, dtype=torch.float64))
        assert torch.allclose(vec[4:], torch.ones(4, dtype=torch.float64))

    def test_deterministic(self):
        cfg = NumericEmbeddingConfig(kind="periodic", dim=6)
        assert torch.equal(embed_numeric(0.73, cfg), embed_numeric(0.73, cfg))
        dice_cfg = NumericEmbeddingConfig(kind="dice", dim=6)
        assert torch.equal(embed_numeric(0.73, dice_cfg), embed_numeric(0.73, dice_cfg))

    def test_periodic_needs_even_dim(self):
        with pytest.raises(ConfigError):
            NumericEmbeddingConfig(kind="periodic", dim=7)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            NumericEmbeddingConfig(kind="fourier", dim=8)

    def test_dice_similarity_monotone(self):
        cfg = NumericEmbeddingConfig(kind="dice", dim=16)
        rng = np.random.default_rng(4)

        def cos_sim(a, b):
            a, b = a.numpy(), b.numpy()
            return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

        for _ in range(100):
            x, y, z = np.sort(rng.uniform(0, 1, size=3))
            if y - x < 1e-6 or z - y < 1e-6:
                continue
            ex, ey, ez = (dice_features(v, cfg) for v in (x, y, z))
            assert cos_sim(ex, ey) > cos_sim(ex, ez)

    def test_periodic_frequencies_override(self):
        freqs = torch.tensor([1.0, 2.0], dtype=torch.float64)
        vec = periodic_features(torch.tensor(0.5, dtype=torch.float64), freqs)
        expected = torch.tensor(
            [math.sin(0.5), math.sin(1.0), math.cos(0.5), math.cos(1.0)], dtype=torch.float64
        )
        assert torch.allclose(vec, expected)
