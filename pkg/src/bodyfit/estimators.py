"""scikit-learn style wrappers: fit / predict / transform with get_params.

Hyperparameters are stored verbatim by ``__init__``; learned state lives in
attributes with a trailing underscore.
"""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import losses as L
from . import moderator as mod
from .body_model import pose_model
from .exceptions import ConfigInvalid, DimensionMismatch
from .fitter import FitConfig, FitProblem, fit


class GenderShapePrior(BaseEstimator):
    """Per-label Gaussians over shape coefficients.

    ``fit(X, y)`` takes shape vectors and their labels (``female``/``male``);
    a ``neutral`` class over all samples is added when ``neutral`` is set.
    """

    def __init__(self, neutral=True):
        self.neutral = neutral

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        classes = {}
        for label in sorted(set(y.tolist())):
            classes[str(label)] = L.fit_gender_prior(X[y == label], label)
        if self.neutral and L.NEUTRAL not in classes:
            classes[L.NEUTRAL] = L.fit_gender_prior(X, L.NEUTRAL)
        self.prior_ = L.GenderPrior(classes)
        self.classes_ = np.array(sorted(classes))
        self.n_features_in_ = X.shape[1]
        return self

    def mahalanobis(self, X, label):
        """Squared Mahalanobis distance of every row to the class mean."""
        check_is_fitted(self, "prior_")
        X = check_array(X)
        return np.array([L.gendered_shape_loss(x, label, self.prior_) for x in X])

    def predict(self, X):
        """Nearest gendered class in Mahalanobis distance."""
        check_is_fitted(self, "prior_")
        labels = [c for c in self.classes_ if c != L.NEUTRAL]
        if not labels:
            raise ConfigInvalid("no gendered class was fitted")
        d = np.stack([self.mahalanobis(X, c) for c in labels], axis=1)
        return np.asarray(labels)[np.argmin(d, axis=1)]


class ModeratorFusion(BaseEstimator, RegressorMixin, TransformerMixin):
    """Gated fusion learned from ``X = [F_b, F_p]`` (n x 2d) to target ``y`` (n x d).

    ``predict`` returns the fused feature, ``transform`` the body weight ``w``.
    """

    def __init__(self, hidden=None, steps=2000, lr=1e-3, batch_size=64, update_weight=0.1, random_state=0):
        self.hidden = hidden
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.update_weight = update_weight
        self.random_state = random_state

    def _split(self, X):
        X = check_array(X)
        if X.shape[1] % 2:
            raise DimensionMismatch("X must hold F_b and F_p side by side (even width)")
        d = X.shape[1] // 2
        return X[:, :d], X[:, d:]

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True)
        F_b, F_p = self._split(X)
        y = np.asarray(y).reshape(F_b.shape[0], -1)
        if y.shape[1] != F_b.shape[1]:
            raise DimensionMismatch("target width must equal the feature width")
        rng = np.random.default_rng(self.random_state)
        self.state_ = mod.init_moderator(F_b.shape[1], self.hidden, rng)
        self.loss_history_ = mod.fit_moderator(
            self.state_, F_b, F_p, y, self.steps, self.lr, self.batch_size, self.update_weight, rng
        )
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "state_")
        F_b, F_p = self._split(X)
        out, _ = mod.forward(self.state_, F_b, F_p)
        return np.atleast_2d(out.fused)

    def transform(self, X):
        check_is_fitted(self, "state_")
        F_b, F_p = self._split(X)
        out, _ = mod.forward(self.state_, F_b, F_p)
        return np.atleast_1d(out.w)


class KeypointFitter(BaseEstimator):
    """Fit a body model to one set of :class:`~bodyfit.fitter.Observations`.

    ``fit(X)`` takes the observations; ``predict()`` returns the posed mesh
    vertices and ``transform()`` the posed joints of the fitted parameters.
    """

    def __init__(self, model=None, config=None, weights=None, prior=None, gender=None):
        self.model = model
        self.config = config
        self.weights = weights
        self.prior = prior
        self.gender = gender

    def fit(self, X, y=None):
        if self.model is None:
            raise ConfigInvalid("KeypointFitter needs a body model")
        problem = FitProblem(
            self.model, X, gender=self.gender, prior=self.prior, weights=self.weights or L.LossWeights()
        )
        self.result_ = fit(problem, self.config or FitConfig())
        self.params_ = self.result_.params
        self.cameras_ = self.result_.cameras
        self._posed = pose_model(self.model, self.params_)
        return self

    def predict(self, X=None):
        check_is_fitted(self, "result_")
        return self._posed.vertices

    def transform(self, X=None):
        check_is_fitted(self, "result_")
        return self._posed.joints_posed
