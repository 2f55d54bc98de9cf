import numpy as np
import pytest

from calibra.data import LearnerKind, LearnerSpec, MainDataset, StudyConfig
from calibra.learners import (LearnerError, assemble_candidates, clip_and_normalize, fit_cm,
                              fit_ps, predict)

ALL_CM = [LearnerKind.RIDGE_REGRESSION, LearnerKind.RANDOM_FOREST,
          LearnerKind.GRADIENT_BOOSTING]
ALL_PS = [LearnerKind.RIDGE_MULTINOMIAL, LearnerKind.RANDOM_FOREST,
          LearnerKind.GRADIENT_BOOSTING]


def _toy(seed=0, n=160, p=4, levels=2):
    r = np.random.default_rng(seed)
    Z = r.standard_normal((n, p))
    x = np.arange(n) % levels
    r.shuffle(x)
    y = Z[:, 0] + x + 0.1 * r.standard_normal(n)
    return Z, x, y


def test_separable_binary_ridge_multinomial_is_confident():
    Z = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    x = np.array([0, 0, 1, 1])
    m = fit_ps(LearnerSpec(LearnerKind.RIDGE_MULTINOMIAL, {"lambda": 1e-8}), Z, x, 2)
    P = predict(m, Z)
    assert np.all(P[np.arange(4), x] >= 0.9)


@pytest.mark.parametrize("kind", ALL_PS)
def test_ps_rejects_missing_level(kind):
    Z, _, _ = _toy()
    with pytest.raises(LearnerError, match="absent"):
        fit_ps(LearnerSpec(kind), Z, np.ones(Z.shape[0], dtype=int), 2)


def test_forest_on_noise_is_calibrated():
    r = np.random.default_rng(3)
    Z = r.standard_normal((300, 5))
    x = np.repeat([0, 1], 150)
    m = fit_ps(LearnerSpec(LearnerKind.RANDOM_FOREST), Z, x, 2, seed=1)
    assert 0.45 <= predict(m, r.standard_normal((200, 5)))[:, 1].mean() <= 0.55


def test_ridge_infinite_shrinkage_predicts_subgroup_mean():
    Z, x, y = _toy()
    m = fit_cm(LearnerSpec(LearnerKind.RIDGE_REGRESSION, {"lambda": 1e300}), Z, y, x, 1)
    q = np.random.default_rng(1).standard_normal((7, Z.shape[1]))
    np.testing.assert_allclose(predict(m, q), y[x == 1].mean(), rtol=1e-12)


@pytest.mark.parametrize("kind", ALL_CM)
def test_constant_outcome_predicts_constant(kind):
    Z, x, _ = _toy(n=80)
    y = np.full(Z.shape[0], 3.25)
    hp = {"n_trees": 50} if kind is LearnerKind.RANDOM_FOREST else {}
    m = fit_cm(LearnerSpec(kind, hp), Z, y, x, 0)
    np.testing.assert_allclose(predict(m, Z), 3.25, rtol=1e-12)


def test_zero_round_booster_predicts_subgroup_mean():
    Z, x, y = _toy()
    m = fit_cm(LearnerSpec(LearnerKind.GRADIENT_BOOSTING, {"n_rounds": 0}), Z, y, x, 0)
    np.testing.assert_allclose(predict(m, Z), y[x == 0].mean(), rtol=1e-14)


def test_booster_rounds_attain_cv_minimum():
    r = np.random.default_rng(5)
    Z = r.standard_normal((120, 3))
    x = np.zeros(120, dtype=int)
    y = Z[:, 0] + r.standard_normal(120)
    m = fit_cm(LearnerSpec(LearnerKind.GRADIENT_BOOSTING, {"max_trees": 80}), Z, y, x, 0)
    curve = m.state["cv_curve"]
    assert curve.shape == (81,)
    assert m.chosen["n_rounds"] == int(np.argmin(curve))
    assert m.cv_score == curve.min()


def test_cm_subgroup_too_small():
    Z, x, y = _toy(n=30)
    x[:] = 0
    x[:5] = 1
    with pytest.raises(LearnerError, match="need at least 10"):
        fit_cm(LearnerSpec(LearnerKind.RIDGE_REGRESSION), Z, y, x, 1)


def test_predict_is_finite_on_training_rows():
    Z, x, y = _toy()
    for kind in ALL_CM:
        hp = {"n_trees": 30} if kind is LearnerKind.RANDOM_FOREST else {}
        assert np.all(np.isfinite(predict(fit_cm(LearnerSpec(kind, hp), Z, y, x, 1), Z)))


def test_clip_rule():
    P = clip_and_normalize(np.array([[0.0001, 0.9999]]), 1e-3)
    np.testing.assert_allclose(P, [[0.001, 0.999]])
    P3 = clip_and_normalize(np.array([[0.0, 0.9999, 0.0001]]), 1e-3)
    assert P3.min() > 0 and abs(P3.sum() - 1) < 1e-15


def test_ridge_recovers_linear_function():
    r = np.random.default_rng(0)
    Z = r.standard_normal((100, 2))
    y = 2 * Z[:, 0]
    m = fit_cm(LearnerSpec(LearnerKind.RIDGE_REGRESSION, {"lambda": 1e-8}), Z, y,
               np.zeros(100, dtype=int), 0)
    assert abs(predict(m, np.array([[3.0, 0.0]]))[0] - 6.0) < 0.01


def test_predict_dimension_mismatch():
    Z, x, y = _toy()
    m = fit_cm(LearnerSpec(LearnerKind.RIDGE_REGRESSION), Z, y, x, 1)
    with pytest.raises(LearnerError, match="expected 4"):
        predict(m, Z[:, :2])


def test_ridge_cv_returns_grid_minimum():
    Z, x, y = _toy(p=6)
    m = fit_cm(LearnerSpec(LearnerKind.RIDGE_REGRESSION), Z, y, x, 1)
    curve = m.state["cv_curve"]
    assert curve.shape == (20,) and np.all(np.isfinite(curve))
    assert m.chosen["lambda"] == m.state["lambdas"][np.argmin(curve)]
    mp = fit_ps(LearnerSpec(LearnerKind.RIDGE_MULTINOMIAL), Z, x, 2)
    assert mp.chosen["lambda"] == mp.state["lambdas"][np.argmin(mp.state["cv_curve"])]
    assert np.isclose(mp.cv_score, mp.state["cv_curve"].min())


@pytest.mark.parametrize("levels", [2, 3])
@pytest.mark.parametrize("kind", ALL_PS)
def test_ps_rows_sum_to_one(kind, levels):
    Z, x, _ = _toy(levels=levels)
    hp = {"n_trees": 60} if kind is LearnerKind.RANDOM_FOREST else {}
    if kind is LearnerKind.GRADIENT_BOOSTING:
        hp = {"max_trees": 40}
    P = predict(fit_ps(LearnerSpec(kind, hp), Z, x, levels, seed=2), Z)
    assert P.shape == (Z.shape[0], levels)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    assert P.min() > 0


@pytest.mark.parametrize("kind", ALL_PS)
def test_ps_fit_is_deterministic(kind):
    Z, x, _ = _toy()
    hp = {"n_trees": 40} if kind is LearnerKind.RANDOM_FOREST else {}
    a = predict(fit_ps(LearnerSpec(kind, hp), Z, x, 2, seed=[4, 1]), Z)
    b = predict(fit_ps(LearnerSpec(kind, hp), Z, x, 2, seed=[4, 1]), Z)
    assert a.tobytes() == b.tobytes()


def test_frozen_hyperparameters_reproduce_fit():
    Z, x, y = _toy()
    spec = LearnerSpec(LearnerKind.GRADIENT_BOOSTING)
    m = fit_cm(spec, Z, y, x, 1, seed=3)
    m2 = fit_cm(spec.frozen(m.chosen), Z, y, x, 1, seed=3)
    assert m2.cv_score is None
    np.testing.assert_array_equal(predict(m, Z), predict(m2, Z))


def _small_config(**kw):
    return StudyConfig(ps_candidates=(LearnerSpec("RidgeMultinomial"),
                                      LearnerSpec("RandomForest", {"n_trees": 30}),
                                      LearnerSpec("GradientBoosting", {"max_trees": 30})),
                       cm_candidates=(LearnerSpec("RidgeRegression"),
                                      LearnerSpec("RandomForest", {"n_trees": 30}),
                                      LearnerSpec("GradientBoosting", {"max_trees": 30})),
                       **kw)


def test_assemble_candidates_shapes_and_swap():
    Z, x, y = _toy(n=120)
    ds = MainDataset(y, x, Z)
    a, b = np.arange(0, 120, 2), np.arange(1, 120, 2)
    cfg = _small_config()
    cp = assemble_candidates(ds, cfg, a, b, 0)
    for lvl in (0, 1):
        assert cp.ps[lvl].shape == (60, 3) and cp.cm[lvl].shape == (60, 3)
    np.testing.assert_allclose(cp.ps[0] + cp.ps[1], 1.0, atol=1e-12)
    swapped = assemble_candidates(ds, cfg, b, a, 0, half=1)
    np.testing.assert_array_equal(swapped.eval_idx, a)
    assert not np.allclose(swapped.cm[1], cp.cm[1])


def test_assemble_single_candidates():
    Z, x, y = _toy(n=80)
    ds = MainDataset(y, x, Z)
    cfg = StudyConfig(ps_candidates=(LearnerSpec("RidgeMultinomial"),),
                      cm_candidates=(LearnerSpec("RidgeRegression"),))
    cp = assemble_candidates(ds, cfg, np.arange(40), np.arange(40, 80), 0)
    assert cp.ps[1].shape == (40, 1) and cp.cm[0].shape == (40, 1)
