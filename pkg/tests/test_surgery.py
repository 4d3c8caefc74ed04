import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gaal.numerics import ShapeError
from gaal.surgery import (
    SurgeryConfig,
    cosine_similarity,
    entropies,
    n_selected,
    orthogonalize,
    project_gradient,
    sample_entropy,
    select_hard,
)

from oracles import qp_oracle


def grid_minimiser(g, a, eps, lo=-3.0, hi=3.0, step=0.005):
    """Dense 2-D search for min |x - g| subject to a.x >= eps."""
    xs = np.arange(lo, hi + step / 2, step)
    xx, yy = np.meshgrid(xs, xs)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    feas = pts[pts @ a >= eps]
    return feas[np.argmin(((feas - g) ** 2).sum(axis=1))]


class TestCosine:
    def test_examples(self):
        assert cosine_similarity([1, 0], [0, 1]) == 0
        assert cosine_similarity([3, 4], [3, 4]) == pytest.approx(1.0, abs=1e-15)
        assert cosine_similarity([1, 1], [-1, -1]) == pytest.approx(-1.0, abs=1e-15)

    def test_zero_vector_gives_zero(self):
        assert cosine_similarity([0, 0], [1, 2]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            cosine_similarity([1, 2], [1, 2, 3])


class TestProjectGradient:
    @pytest.mark.parametrize(
        "eps, v, expected",
        [(0.0, 0.5, (1.5, -1.5)), (0.5, 0.75, (1.75, -1.25))],
    )
    def test_worked_examples(self, eps, v, expected):
        g, gp = np.array([1.0, -2.0]), np.array([1.0, 1.0])
        res = project_gradient(g, gp, eps)
        assert res.applied and res.v == v
        np.testing.assert_allclose(res.g_tilde, expected, atol=1e-15)
        assert gp @ res.g_tilde == pytest.approx(eps, abs=1e-15)
        # independent checks: grid search to its resolution, KKT solve exactly
        np.testing.assert_allclose(grid_minimiser(g, gp, eps), expected, atol=0.005)
        np.testing.assert_allclose(qp_oracle(g, gp, eps), expected, atol=1e-12)

    def test_inactive_constraint_returns_g_itself(self):
        g = np.array([2.0, 1.0])
        res = project_gradient(g, [1.0, 0.0], 0.5)
        assert not res.applied and res.v == 0.0
        assert res.g_tilde is g or np.array_equal(res.g_tilde, g)

    def test_opposite_gradient_cancels(self):
        g = np.array([0.3, -1.2, 2.0])
        np.testing.assert_allclose(project_gradient(g, -g, 0.0).g_tilde, 0.0, atol=1e-15)

    def test_tiny_reference_is_skipped(self):
        res = project_gradient([1.0, -1.0], [1e-8, 0.0], 0.1)
        assert not res.applied and res.v == 0.0

    def test_errors(self):
        with pytest.raises(ShapeError):
            project_gradient([1, 2], [1, 2, 3])
        with pytest.raises(ValueError):
            project_gradient([np.nan, 1.0], [1.0, 1.0])

    @settings(max_examples=300)
    @given(
        st.integers(2, 10).flatmap(
            lambda n: st.tuples(
                arrays(np.float64, n, elements=st.floats(-10, 10)),
                arrays(np.float64, n, elements=st.floats(-10, 10)),
            )
        ),
        st.floats(0, 2),
    )
    def test_properties(self, pair, eps):
        g, gp = pair
        res = project_gradient(g, gp, eps)
        sq = gp @ gp
        if sq < 1e-12:
            assert not res.applied
            return
        assert res.v >= 0
        assert abs(res.v - max(0.0, (eps - gp @ g) / sq)) <= 1e-12
        if res.applied:
            assert gp @ res.g_tilde >= eps - 1e-9
        else:
            assert np.array_equal(res.g_tilde, g)
        # minimality against feasible points along random directions
        rng = np.random.default_rng(0)
        for _ in range(5):
            x = res.g_tilde + rng.normal(size=g.size)
            if gp @ x >= eps:
                assert np.linalg.norm(res.g_tilde - g) <= np.linalg.norm(x - g) + 1e-12


def test_orthogonalize_removes_reference_component():
    g, gp = np.array([1.0, 2.0, -1.0]), np.array([0.5, 1.0, 0.0])
    res = orthogonalize(g, gp)
    assert abs(res.g_tilde @ gp) < 1e-14
    assert res.applied


class TestEntropy:
    def test_one_hot(self):
        assert sample_entropy([0.0, 1.0, 0.0]) == 0.0

    @pytest.mark.parametrize("y_dim", [2, 4, 10])
    def test_uniform(self, y_dim):
        assert abs(sample_entropy(np.full(y_dim, 1 / y_dim)) - math.log(y_dim)) <= 1e-12

    def test_known_value(self):
        # -0.9 ln 0.9 - 0.1 ln 0.1 via mpmath
        assert sample_entropy([0.9, 0.1]) == pytest.approx(0.325082973391448240, abs=1e-15)

    def test_invalid(self):
        with pytest.raises(ValueError):
            sample_entropy([0.5, 0.6])
        with pytest.raises(ValueError):
            sample_entropy([1.5, -0.5])

    def test_batch_matches_rowwise(self, rng):
        p = rng.dirichlet(np.ones(5), size=20)
        p[3] = [0, 0, 1, 0, 0]
        np.testing.assert_allclose(entropies(p), [sample_entropy(r) for r in p], atol=1e-15)


def sort_oracle(h, lam):
    k = max(1, math.ceil(round(lam * len(h), 9)))
    return sorted(sorted(range(len(h)), key=lambda i: (-h[i], i))[:k])


class TestSelectHard:
    def test_examples(self):
        assert select_hard([0.1, 0.9, 0.5, 0.7], 0.5).tolist() == [1, 3]
        assert select_hard([0.3, 0.1, 0.2], 1.0).tolist() == [0, 1, 2]
        assert select_hard([0.4] * 8, 0.25).tolist() == [0, 1]

    def test_at_least_one(self):
        assert select_hard([0.2, 0.5, 0.1], 0.01).tolist() == [1]

    def test_exact_fraction_does_not_round_up(self):
        assert n_selected(10, 0.3) == 3
        assert n_selected(10, 0.31) == 4

    def test_empty(self):
        with pytest.raises(ValueError):
            select_hard([], 0.5)

    @given(
        st.lists(st.integers(0, 4), min_size=1, max_size=30),
        st.floats(0.01, 1.0),
        st.randoms(use_true_random=False),
    )
    def test_permutation_equivariance(self, values, lam, rnd):
        h = np.array(values, dtype=float)
        perm = list(range(len(h)))
        rnd.shuffle(perm)
        chosen = select_hard(h, lam)
        chosen_perm = select_hard(h[perm], lam)
        # same multiset of selected entropy values; ties may pick different members
        assert sorted(h[chosen]) == sorted(h[perm][chosen_perm])


def test_config_validation():
    with pytest.raises(ValueError):
        SurgeryConfig(epsilon=-0.1)
    with pytest.raises(ValueError):
        SurgeryConfig(lambda_image=0.0)
    assert SurgeryConfig(lambda_tabular=1.0).lam("T") == 1.0
