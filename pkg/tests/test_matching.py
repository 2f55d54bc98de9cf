import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import expit

from calibra.matching import (MatchingError, fit_membership_scores, match_aux, nn_match,
                              standardized_mean_differences)


def test_identical_distributions_give_base_rate_scores():
    r = np.random.default_rng(0)
    A, B = r.standard_normal((2000, 2)), r.standard_normal((4000, 2))
    s = fit_membership_scores(A, B)
    p = expit(np.concatenate([s.main_logit, s.aux_logit]))
    assert np.all(np.abs(p - 1 / 3) < 0.05)


def test_shifted_main_scores_separate():
    r = np.random.default_rng(1)
    A = r.standard_normal((300, 1)) + 2.0
    B = r.standard_normal((600, 1))
    s = fit_membership_scores(A, B)
    assert np.median(expit(s.main_logit)) > np.median(expit(s.aux_logit)) + 0.4


def test_constant_column_gives_equal_scores():
    s = fit_membership_scores(np.ones((5, 1)), np.ones((10, 1)))
    np.testing.assert_allclose(s.main_logit, np.log(0.5), atol=1e-12)
    np.testing.assert_allclose(s.aux_logit, np.log(0.5), atol=1e-12)
    assert s.kept_columns.size == 0


def test_perfect_separation_raises():
    with pytest.raises(MatchingError):
        fit_membership_scores(np.arange(5.0)[:, None] + 10, np.arange(5.0)[:, None])


def test_duplicate_aux_unit_matches_at_distance_zero():
    ms = np.array([0.3])
    res = nn_match(ms, np.array([0.3, 0.3, 5.0]), k=2, seed=0)
    assert sorted(res.pairs[:, 0].tolist()) == [0, 1]
    np.testing.assert_array_equal(res.kept_aux_indices, [0, 1])


def test_ties_go_to_lowest_index():
    res = nn_match(np.array([0.0]), np.array([1.0, -1.0, 1.0]), k=1)
    assert res.pairs[0, 0] == 0


@given(st.integers(0, 10 ** 6), st.integers(1, 30), st.integers(1, 3), st.integers(0, 80))
def test_no_aux_unit_reused_and_backends_agree(seed, n, k, N):
    r = np.random.default_rng(seed)
    ms, av = r.standard_normal(n), r.standard_normal(N)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = nn_match(ms, av, k, seed, use_numba=True)
        b = nn_match(ms, av, k, seed, use_numba=False)
    np.testing.assert_array_equal(a.pairs, b.pairs)
    used = a.pairs[a.pairs >= 0]
    assert used.size == np.unique(used).size == min(N, n * k)


def test_partial_match_warns():
    with pytest.warns(UserWarning, match="partial"):
        res = nn_match(np.zeros(4), np.zeros(3), k=1)
    assert res.kept_aux_indices.size == 3


def test_caliper_limits_matches():
    res = nn_match(np.array([0.0, 10.0]), np.array([0.05, 3.0]), k=1, caliper=0.1)
    assert res.kept_aux_indices.tolist() == [0]


def test_matching_is_deterministic_per_seed():
    r = np.random.default_rng(2)
    ms, av = r.standard_normal(50), r.standard_normal(200)
    a, b = nn_match(ms, av, 2, seed=7), nn_match(ms, av, 2, seed=7)
    np.testing.assert_array_equal(a.pairs, b.pairs)


def test_matching_restores_balance():
    r = np.random.default_rng(3)
    A = r.standard_normal((300, 2)) + np.array([0.5, 0.0])
    B = r.standard_normal((3000, 2))
    res = match_aux(A, B, k=2, seed=1, column_names=("z1", "z2"))
    assert abs(res.smd_before[0]) > 0.4
    assert np.all(np.abs(res.smd_after) < 0.1)
    assert res.column_names == ("z1", "z2")
    assert res.kept_aux_indices.size == 600


def test_smd_formula():
    A = np.array([[1.0], [3.0]])
    B = np.array([[0.0], [2.0]])
    assert standardized_mean_differences(A, B)[0] == pytest.approx(1 / np.sqrt(2))
