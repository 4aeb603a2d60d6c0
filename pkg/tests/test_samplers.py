import math

import numpy as np
import pytest

from shapprop import engine
from shapprop.graph import chain, linear_node
from shapprop.oracle import shapley_background
from shapprop import samplers
from shapprop.samplers import (
    SamplerConfig,
    SingularRegressionWarning,
    ime_estimator,
    ime_shap,
    kernel_estimator,
    kernel_shap,
    kth_largest_abs,
    shapley_kernel_weight,
    variance_probe,
)

from factories import random_mlp


@pytest.fixture
def mlp6():
    rng = np.random.default_rng(11)
    g = random_mlp(rng, 6, max_layers=2, activations=("tanh",))
    return g, rng.normal(size=6) * 2, rng.normal(size=(3, 6))


def linear4():
    return chain(4, linear_node("l", [[1.0, -2.0, 0.5, 3.0]], [1.0]))


class TestKernel:
    def test_full_enumeration_linear_exact(self):
        g = linear4()
        x, B = np.array([1.0, 2.0, -1.0, 0.5]), np.array([[0.0, 0.0, 0.0, 0.0], [1.0, -1.0, 2.0, 0.0]])
        np.testing.assert_allclose(kernel_shap(g, x, B, SamplerConfig(14)), shapley_background(g, x, B),
                                   atol=1e-6)

    def test_full_enumeration_nonlinear_exact(self, mlp6):
        g, x, B = mlp6
        np.testing.assert_allclose(kernel_shap(g, x, B, SamplerConfig(62)), shapley_background(g, x, B),
                                   atol=1e-9)

    def test_fg_equals_bg(self, mlp6):
        g, x, _ = mlp6
        np.testing.assert_allclose(kernel_shap(g, x, [x], SamplerConfig(20, 3)), 0.0, atol=1e-12)

    def test_seed_determinism(self, mlp6):
        g, x, B = mlp6
        a = kernel_shap(g, x, B, SamplerConfig(30, 5))
        assert np.array_equal(a, kernel_shap(g, x, B, SamplerConfig(30, 5)))
        assert not np.array_equal(a, kernel_shap(g, x, B, SamplerConfig(30, 6)))

    def test_efficiency(self, mlp6):
        g, x, B = mlp6
        for seed in range(5):
            phi = kernel_shap(g, x, B, SamplerConfig(20, seed))
            assert math.fsum(phi) == pytest.approx(g(x) - g(B).mean(), abs=1e-9)

    def test_minimum_samples(self, mlp6):
        g, x, B = mlp6
        with pytest.raises(ValueError, match="n_samples >= 14"):
            kernel_shap(g, x, B, SamplerConfig(13))

    def test_kernel_weights(self):
        # M = 4: sizes 1..3 -> 3 / (C(4,s) s (4-s))
        np.testing.assert_allclose(shapley_kernel_weight(4, np.array([1, 2, 3])),
                                   [3 / 12, 3 / 24, 3 / 12])

    def test_singular_design_redraws(self, mlp6, monkeypatch):
        g, x, B = mlp6
        real = samplers._solve_constrained
        calls = []

        def flaky(*a):
            calls.append(1)
            return None if len(calls) < 3 else real(*a)

        monkeypatch.setattr(samplers, "_solve_constrained", flaky)
        with pytest.warns(SingularRegressionWarning):
            phi = kernel_shap(g, x, B, SamplerConfig(20, 1))
        assert len(calls) == 3
        assert math.fsum(phi) == pytest.approx(g(x) - g(B).mean(), abs=1e-9)

    def test_singular_design_gives_up(self, mlp6, monkeypatch):
        g, x, B = mlp6
        monkeypatch.setattr(samplers, "_solve_constrained", lambda *a: None)
        with pytest.warns(SingularRegressionWarning), pytest.raises(np.linalg.LinAlgError):
            kernel_shap(g, x, B, SamplerConfig(20, 1))


class TestIME:
    def test_exhaustive_three_features(self):
        rng = np.random.default_rng(2)
        g = random_mlp(rng, 3, activations=("relu",))
        x = rng.normal(size=3)
        B = rng.normal(size=(2, 3))
        np.testing.assert_allclose(ime_shap(g, x, B, SamplerConfig(1, estimator="ime"), exhaustive=True),
                                   shapley_background(g, x, B), atol=1e-12)

    def test_linear_repeats_within_three_standard_errors(self):
        g = linear4()
        x = np.array([1.0, 2.0, -1.0, 0.5])
        B = np.random.default_rng(0).normal(size=(3, 4))
        runs = np.array([ime_shap(g, x, B, SamplerConfig(500, s, "ime")) for s in range(30)])
        se = runs.std(axis=0, ddof=1) / math.sqrt(len(runs))
        assert np.all(np.abs(runs.mean(axis=0) - shapley_background(g, x, B)) <= 3 * se + 1e-12)

    def test_nonlinear_repeats_within_three_standard_errors(self, mlp6):
        g, x, B = mlp6
        runs = np.array([ime_shap(g, x, B, SamplerConfig(60, s, "ime")) for s in range(40)])
        se = runs.std(axis=0, ddof=1) / math.sqrt(len(runs))
        assert np.all(se > 0)
        assert np.all(np.abs(runs.mean(axis=0) - shapley_background(g, x, B)) <= 3 * se)

    def test_seed_determinism(self, mlp6):
        g, x, B = mlp6
        a = ime_shap(g, x, B, SamplerConfig(50, 9, "ime"))
        assert np.array_equal(a, ime_shap(g, x, B, SamplerConfig(50, 9, "ime")))

    @pytest.mark.parametrize("n", [3, 7, 50])
    def test_efficiency(self, mlp6, n):
        g, x, B = mlp6
        phi = ime_shap(g, x, B, SamplerConfig(n, 1, "ime"))
        assert math.fsum(phi) == pytest.approx(g(x) - g(B).mean(), abs=1e-9)

    def test_needs_one_draw_per_background(self, mlp6):
        g, x, B = mlp6
        with pytest.raises(ValueError):
            ime_shap(g, x, B, SamplerConfig(2, 0, "ime"))


def test_error_decreases_with_samples(mlp6):
    g, x, B = mlp6
    exact = shapley_background(g, x, B)
    for est, grid in ((kernel_estimator, (14, 28, 56, 112)), (ime_estimator, (50, 100, 200, 400))):
        mae = [np.mean([np.abs(est(g, x, B, n, s) - exact).mean() for s in range(5)]) for n in grid]
        assert all(a > b for a, b in zip(mae, mae[1:])), (est.__name__, mae)


class TestVarianceProbe:
    def test_identical_seeds_zero(self, mlp6):
        g, x, B = mlp6
        rep = variance_probe(ime_estimator, g, x, B, [20, 40], seeds=[4, 4])
        assert rep.std == {20: 0.0, 40: 0.0}

    def test_deepshap_zero(self, mlp6):
        g, x, B = mlp6
        deep = lambda m, x, B, n, s: engine.explain(m, x, B).phi
        rep = variance_probe(deep, g, x, B, [10, 100, 1000], repeats=3)
        assert all(v == 0.0 for v in rep.std.values())

    def test_rank_flag_for_small_inputs(self, mlp6):
        g, x, B = mlp6
        rep = variance_probe(ime_estimator, g, x, B, [30], repeats=3)
        assert rep.rank == 6 and rep.rank_flagged
        assert rep.attributions[30].shape == (3, 6)
        assert rep.std[30] > 0

    def test_needs_two_repeats(self, mlp6):
        g, x, B = mlp6
        with pytest.raises(ValueError):
            variance_probe(ime_estimator, g, x, B, [30], repeats=1)

    def test_kth_largest(self):
        assert kth_largest_abs(np.array([1.0, -5.0, 3.0]), 2) == 3.0
