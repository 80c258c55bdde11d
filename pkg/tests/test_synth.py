import numpy as np
import pytest

from crashsev.stats import auc_roc
from crashsev.synth import PlantedGenerator, planted_generator


class TestGenerator:
    def test_prevalence_calibrated(self):
        gen = planted_generator(n_features=50, n_informative=5, prevalence=1 / 51)
        assert gen.prevalence() == pytest.approx(1 / 51, abs=1e-6)
        _, y = gen.sample(60_000, seed=1)
        assert y.mean() == pytest.approx(1 / 51, abs=0.004)

    def test_planted_names(self):
        gen = planted_generator(n_features=20, n_informative=3)
        assert gen.planted == ["f00", "f01", "f02"]

    def test_sampling_deterministic(self):
        gen = planted_generator(n_features=10, n_informative=2)
        Xa, ya = gen.sample(500, seed=9)
        Xb, yb = gen.sample(500, seed=9)
        assert np.array_equal(Xa, Xb)
        assert np.array_equal(ya, yb)

    def test_bayes_auc_matches_monte_carlo(self):
        gen = planted_generator(n_features=30, n_informative=6, effect=0.5, prevalence=0.05)
        analytic = gen.bayes_auc()
        X, y = gen.sample(300_000, seed=4)
        empirical = auc_roc(X @ gen.coef, y)
        assert analytic == pytest.approx(empirical, abs=0.005)

    def test_bayes_auc_monotone_in_effect(self):
        aucs = [
            planted_generator(n_features=10, n_informative=5, effect=e).bayes_auc()
            for e in (0.2, 0.5, 1.0)
        ]
        assert aucs[0] < aucs[1] < aucs[2]

    def test_no_signal_rejected(self):
        gen = PlantedGenerator(n_features=4, coef=np.zeros(4), intercept=-2.0)
        with pytest.raises(ValueError):
            gen.bayes_auc()
