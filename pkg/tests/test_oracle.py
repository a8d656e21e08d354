import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptda.oracle import (DiscreteWorld, WorldError, concept_posterior,
                              conditional_entropy_y_given_x, exact_jsd, optimal_discriminator,
                              optimal_predictor, predictor_cross_entropy, random_world)


def world_from(p_xyc, K=1):
    """Same ``p(x, y, c)`` in both domains."""
    p = np.asarray(p_xyc, dtype=float)
    joint = np.stack([p, p], axis=-1) * 0.5
    return DiscreteWorld(np.eye(p.shape[0]), joint / joint.sum(), p.shape[1], K)


class TestOptimalDiscriminator:
    def test_values(self):
        np.testing.assert_array_equal(optimal_discriminator([0.2, 0.3], [0.2, 0.3]), [0.5, 0.5])
        assert optimal_discriminator([0.0], [0.4])[0] == 1.0
        assert optimal_discriminator([0.1], [0.2])[0] == pytest.approx(2 / 3)

    def test_both_zero(self):
        with pytest.raises(ValueError):
            optimal_discriminator([0.0], [0.0])


class TestEntropy:
    def test_deterministic(self):
        w = world_from([[[0.5, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.5]]])
        assert conditional_entropy_y_given_x(w) == 0.0

    def test_independent(self):
        w = world_from(np.full((3, 2, 2), 1 / 12))
        assert conditional_entropy_y_given_x(w) == pytest.approx(math.log(2))

    def test_two_term(self):
        w = world_from([[[0.25, 0.0], [0.75, 0.0]]])
        expected = 0.75 * math.log(4 / 3) + 0.25 * math.log(4)
        assert conditional_entropy_y_given_x(w) == pytest.approx(expected, abs=1e-14)
        assert expected == pytest.approx(0.5623, abs=1e-4)


class TestPosterior:
    def test_deterministic(self):
        w = world_from([[[0.5, 0.0], [0.0, 0.0]], [[0.0, 0.25], [0.0, 0.25]]])
        np.testing.assert_array_equal(concept_posterior(w)[:, 0], [0.0, 1.0])

    def test_independent(self):
        w = world_from([[[0.35, 0.15]], [[0.35, 0.15]]])
        np.testing.assert_allclose(concept_posterior(w)[:, 0], [0.3, 0.3])

    def test_ratio(self):
        w = world_from([[[0.3, 0.1]], [[0.2, 0.4]]])
        assert concept_posterior(w)[0, 0] == pytest.approx(0.25)

    def test_pattern_bit_order(self):
        w = random_world(2, 2, 3, np.random.default_rng(0))
        pats = w.patterns()
        assert pats[1].tolist() == [0, 0, 1] and pats[4].tolist() == [1, 0, 0]


class TestJsd:
    def test_values(self):
        assert exact_jsd([0.3, 0.7], [0.3, 0.7]) == 0.0
        assert exact_jsd([1.0, 0.0], [0.0, 1.0]) == pytest.approx(math.log(2))
        assert exact_jsd([0.5, 0.5], [1.0, 0.0]) == pytest.approx(0.215762, abs=1e-6)

    def test_unnormalized(self):
        with pytest.raises(ValueError):
            exact_jsd([0.5, 0.6], [0.5, 0.5])

    @given(st.lists(st.floats(0.01, 1), min_size=2, max_size=6), st.integers(0, 10 ** 6))
    def test_symmetric_bounded(self, raw, seed):
        p = np.array(raw) / sum(raw)
        q = np.random.default_rng(seed).dirichlet(np.ones(len(p)))
        a, b = exact_jsd(p, q), exact_jsd(q, p)
        assert a == pytest.approx(b, abs=1e-15)
        assert 0 <= a <= math.log(2)


class TestOptimalPredictor:
    def setup_method(self):
        # p(y=1|x0)=0.2, p(y=1|x1)=0.6, equal mass
        self.w = world_from([[[0.4, 0.0], [0.1, 0.0]], [[0.2, 0.0], [0.3, 0.0]]])

    def test_injective(self):
        table = optimal_predictor(self.w, lambda x: x)
        np.testing.assert_allclose(table[(1.0, 0.0)], [0.8, 0.2])
        np.testing.assert_allclose(table[(0.0, 1.0)], [0.4, 0.6])

    def test_merged(self):
        table = optimal_predictor(self.w, lambda x: np.zeros(1))
        np.testing.assert_allclose(table[(0.0,)], [0.6, 0.4])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10 ** 6), st.integers(2, 6), st.integers(2, 3), st.integers(1, 3))
    def test_plugin_achieves_entropy(self, seed, n_x, Q, K):
        w = random_world(n_x, Q, K, np.random.default_rng(seed))
        table = optimal_predictor(w, lambda x: x)
        ce = predictor_cross_entropy(w, lambda x: x, table)
        assert abs(ce - conditional_entropy_y_given_x(w)) < 1e-12


class TestWorld:
    def test_validation(self):
        with pytest.raises(WorldError):
            DiscreteWorld(np.eye(2), np.full((2, 2, 2, 2), 0.1), 2, 1)
        lopsided = np.zeros((1, 2, 2, 2))
        lopsided[0, 0, 0, 0] = 1.0
        with pytest.raises(WorldError):
            DiscreteWorld(np.eye(1), lopsided, 2, 1)
        with pytest.raises(WorldError):
            DiscreteWorld(np.zeros((2, 2)), np.full((2, 2, 2, 2), 1 / 16), 2, 1)

    def test_size_cap(self):
        with pytest.raises(WorldError):
            random_world(65, 2, 1, np.random.default_rng(0))

    def test_csv_round_trip(self, tmp_path):
        w = random_world(4, 3, 2, np.random.default_rng(1), shared_inputs=False)
        w.to_csv(tmp_path / "w.csv")
        back = DiscreteWorld.from_csv(tmp_path / "w.csv")
        np.testing.assert_array_equal(back.joint, w.joint)
        np.testing.assert_array_equal(back.xs, w.xs)
        rows = (tmp_path / "w.csv").read_text().strip().split("\n")
        assert len(rows) == 1 + 4 * 3 * 4 * 2

    def test_sampling_frequencies(self):
        w = random_world(3, 2, 1, np.random.default_rng(2))
        _, y, c, xi = w.sample(50000, 0, np.random.default_rng(3))
        dom = w.domain(0)
        for i, yy, ci in itertools.product(range(3), range(2), range(2)):
            freq = np.mean((xi == i) & (y == yy) & (c[:, 0] == ci))
            assert abs(freq - dom[i, yy, ci]) < 4 * math.sqrt(dom[i, yy, ci] / 50000) + 1e-4
