import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from bodyfit import fitter as F
from bodyfit.estimators import GenderShapePrior, KeypointFitter, ModeratorFusion
from bodyfit.exceptions import ConfigInvalid, DimensionMismatch
from bodyfit.synthetic import sample_parameters

from conftest import synthetic_observations


def test_gender_prior_estimator(rng):
    X = np.vstack([rng.standard_normal((50, 3)) + 2, rng.standard_normal((50, 3)) - 2])
    y = np.array(["female"] * 50 + ["male"] * 50)
    est = GenderShapePrior().fit(X, y)
    assert est.classes_.tolist() == ["female", "male", "neutral"]
    assert est.n_features_in_ == 3
    assert (est.predict(X) == y).mean() > 0.95
    assert est.mahalanobis(X[:1], "female")[0] < est.mahalanobis(X[:1], "male")[0]
    assert clone(est).get_params() == {"neutral": True}
    assert "neutral" not in GenderShapePrior(neutral=False).fit(X, y).classes_


def test_gender_prior_needs_gendered_class(rng):
    est = GenderShapePrior().fit(rng.standard_normal((10, 2)), ["neutral"] * 10)
    with pytest.raises(ConfigInvalid):
        est.predict(np.zeros((1, 2)))


def test_not_fitted():
    with pytest.raises(NotFittedError):
        GenderShapePrior().predict(np.zeros((1, 2)))
    with pytest.raises(NotFittedError):
        ModeratorFusion().predict(np.zeros((1, 2)))
    with pytest.raises(NotFittedError):
        KeypointFitter().predict()


def test_moderator_fusion_estimator(rng):
    z = rng.standard_normal((400, 4))
    X = np.hstack([z + rng.standard_normal(z.shape), z + 0.05 * rng.standard_normal(z.shape)])
    est = ModeratorFusion(steps=300, lr=1e-2, random_state=1).fit(X, z)
    assert len(est.loss_history_) == 300
    fused = est.predict(X)
    assert fused.shape == z.shape
    assert np.mean((fused - z) ** 2) < np.mean((X[:, :4] - z) ** 2)
    w = est.transform(X)
    assert w.shape == (400,) and w.mean() < 0.5
    again = clone(est).fit(X, z)
    assert np.array_equal(again.predict(X), fused)
    with pytest.raises(DimensionMismatch):
        est.predict(X[:, :5])
    with pytest.raises(DimensionMismatch):
        ModeratorFusion(steps=1).fit(X, z[:, :3])


def test_keypoint_fitter_estimator(small_model):
    p = sample_parameters(small_model, np.random.default_rng(0))
    obs = synthetic_observations(small_model, p)
    cfg = F.FitConfig(stages=[F.Stage(F.FREE_GROUPS, 20, smoothing=(1.0, 0.01), optimizer="lbfgs")])
    est = KeypointFitter(model=small_model, config=cfg).fit(obs)
    assert est.predict().shape == (small_model.n_vertices, 3)
    assert est.transform().shape == (small_model.n_joints, 3)
    assert set(est.cameras_) == set(F.CAMERAS)
    assert est.get_params()["config"] is cfg
    with pytest.raises(ConfigInvalid):
        KeypointFitter().fit(obs)
