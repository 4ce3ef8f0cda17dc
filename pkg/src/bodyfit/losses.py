"""Training losses and priors as pure scalar functions.

Each differentiable loss ``foo`` has a companion ``foo_grad`` returning the
gradient w.r.t. its first (predicted) argument. L1 terms use a zero
subgradient at zero residual. Keypoint L1 terms accept ``delta > 0`` to swap
``|r|`` for the smooth ``sqrt(r^2 + delta^2) - delta``, which the fitter uses
to avoid stalling on kinks.
"""

from dataclasses import asdict, dataclass, fields

import numpy as np

from ._validation import as_float_array, as_visibility, check_same_shape
from .body_model import N_LANDMARKS
from .exceptions import (
    ConfigInvalid,
    DimensionMismatch,
    IndexOutOfRange,
    InsufficientSamples,
    NonFiniteComponent,
    ShapeMismatch,
    SingularCovariance,
    UnknownLabelClassMissing,
    ValidationError,
    ZeroVector,
)

GENDER_LABELS = ("female", "male")
NEUTRAL = "neutral"
FACE_YAW_LIMIT_DEG = 90.0


@dataclass
class LossWeights:
    body_2d: float = 1.0
    body_3d: float = 1.0
    body_params: float = 1.0
    hand_2d: float = 1.0
    hand_3d: float = 1.0
    hand_params: float = 1.0
    face_params: float = 1.0
    landmarks: float = 1.0
    closure: float = 1.0
    photometric: float = 1.0
    identity: float = 1.0
    expression: float = 1.0
    jaw: float = 1.0
    face_yaw: float = 1.0
    shape: float = 1.0
    update: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not np.isfinite(v) or v < 0:
                raise ConfigInvalid(f"loss weight {f.name} must be finite and nonnegative")
            setattr(self, f.name, v)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigInvalid(f"unknown loss weight(s): {sorted(unknown)}")
        return cls(**d)


def _abs(r, delta):
    if delta > 0:
        return np.sqrt(r * r + delta * delta) - delta
    return np.abs(r)


def _abs_grad(r, delta):
    if delta > 0:
        return r / np.sqrt(r * r + delta * delta)
    return np.sign(r)


def _l1_pair(pred, gt, vis, dim, names):
    pred = as_float_array(pred, names[0], shape=(None, dim))
    gt = as_float_array(gt, names[1], shape=(None, dim))
    check_same_shape(pred, gt, names)
    vis = as_visibility(vis, pred.shape[0])
    return pred, gt, vis


def joint_loss_2d(pred, gt, visibility=None, delta=0.0):
    """Sum of L1 distances over visible 2D joints."""
    pred, gt, vis = _l1_pair(pred, gt, visibility, 2, ("pred", "gt"))
    return float(_abs(pred - gt, delta)[vis].sum())


def joint_loss_2d_grad(pred, gt, visibility=None, delta=0.0):
    pred, gt, vis = _l1_pair(pred, gt, visibility, 2, ("pred", "gt"))
    return _abs_grad(pred - gt, delta) * vis[:, None]


def joint_loss_3d(pred, gt, visibility=None, delta=0.0):
    pred, gt, vis = _l1_pair(pred, gt, visibility, 3, ("pred", "gt"))
    return float(_abs(pred - gt, delta)[vis].sum())


def joint_loss_3d_grad(pred, gt, visibility=None, delta=0.0):
    pred, gt, vis = _l1_pair(pred, gt, visibility, 3, ("pred", "gt"))
    return _abs_grad(pred - gt, delta) * vis[:, None]


def _param_arrays(pred, gt):
    pred = [np.asarray(p, dtype=np.float64) for p in pred]
    gt = [np.asarray(g, dtype=np.float64) for g in gt]
    if len(pred) != len(gt) or any(p.shape != g.shape for p, g in zip(pred, gt)):
        raise DimensionMismatch("parameter blocks do not match")
    return pred, gt


def param_loss(pred, gt):
    """Squared L2 summed over matching parameter blocks, e.g. ``(pose, beta)``."""
    pred, gt = _param_arrays(pred, gt)
    return float(sum(np.sum((p - g) ** 2) for p, g in zip(pred, gt)))


def param_loss_grad(pred, gt):
    pred, gt = _param_arrays(pred, gt)
    return [2.0 * (p - g) for p, g in zip(pred, gt)]


def _check_landmarks(pred, gt):
    pred = as_float_array(pred, "pred landmarks", shape=(N_LANDMARKS, 2))
    gt = as_float_array(gt, "gt landmarks", shape=(N_LANDMARKS, 2))
    return pred, gt


def landmark_loss(pred, gt, visibility=None, delta=0.0):
    pred, gt = _check_landmarks(pred, gt)
    return joint_loss_2d(pred, gt, visibility, delta)


def landmark_loss_grad(pred, gt, visibility=None, delta=0.0):
    pred, gt = _check_landmarks(pred, gt)
    return joint_loss_2d_grad(pred, gt, visibility, delta)


def _check_pairs(pairs, n):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        raise IndexOutOfRange("closure pair indexes outside the landmark set")
    return pairs


def closure_loss(pred, gt, pairs, delta=0.0):
    """L1 on relative offsets between landmark pairs (eyelids, lips)."""
    pred, gt = _check_landmarks(pred, gt)
    pairs = _check_pairs(pairs, pred.shape[0])
    if not pairs.size:
        return 0.0
    i, j = pairs[:, 0], pairs[:, 1]
    return float(_abs((pred[i] - pred[j]) - (gt[i] - gt[j]), delta).sum())


def closure_loss_grad(pred, gt, pairs, delta=0.0):
    pred, gt = _check_landmarks(pred, gt)
    pairs = _check_pairs(pairs, pred.shape[0])
    g = np.zeros_like(pred)
    if not pairs.size:
        return g
    i, j = pairs[:, 0], pairs[:, 1]
    s = _abs_grad((pred[i] - pred[j]) - (gt[i] - gt[j]), delta)
    np.add.at(g, i, s)
    np.add.at(g, j, -s)
    return g


def _check_images(image, rendered, mask):
    image = np.asarray(image, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if image.shape != rendered.shape or image.ndim != 3:
        raise ShapeMismatch(f"images must share an H x W x C shape, got {image.shape} and {rendered.shape}")
    if mask.shape != image.shape[:2]:
        raise ShapeMismatch(f"mask must be H x W, got {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValidationError("mask must be binary")
    return image, rendered, mask


def photometric_loss(image, rendered, mask):
    """Masked L1 between the input face image and the rendered image."""
    image, rendered, mask = _check_images(image, rendered, mask)
    return float(np.abs(mask[:, :, None] * (image - rendered)).sum())


def photometric_loss_grad(image, rendered, mask):
    """Gradient w.r.t. the rendered image."""
    image, rendered, mask = _check_images(image, rendered, mask)
    return -np.sign(image - rendered) * mask[:, :, None]


def _check_embeddings(a, b):
    a = as_float_array(a, "embedding", ndim=1)
    b = as_float_array(b, "embedding", ndim=1)
    if a.shape != b.shape:
        raise DimensionMismatch("embeddings differ in length")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("identity loss needs nonzero embeddings")
    return a, b, na, nb


def identity_loss(emb_a, emb_b):
    """One minus cosine similarity."""
    a, b, na, nb = _check_embeddings(emb_a, emb_b)
    return float(1.0 - a @ b / (na * nb))


def identity_loss_grad(emb_a, emb_b):
    """Gradients w.r.t. both embeddings."""
    a, b, na, nb = _check_embeddings(emb_a, emb_b)
    cos = a @ b / (na * nb)
    ga = -(b / (na * nb) - cos * a / na**2)
    gb = -(a / (na * nb) - cos * b / nb**2)
    return ga, gb


def expression_prior(psi):
    psi = as_float_array(psi, "psi", ndim=1)
    return float(psi @ psi)


def expression_prior_grad(psi):
    return 2.0 * as_float_array(psi, "psi", ndim=1)


def jaw_prior(jaw):
    """pitch^2 + roll^2 + min(yaw, 0)^2; the jaw opens towards positive yaw."""
    pitch, roll, yaw = as_float_array(jaw, "jaw", shape=(3,))
    return float(pitch**2 + roll**2 + min(yaw, 0.0) ** 2)


def jaw_prior_grad(jaw):
    pitch, roll, yaw = as_float_array(jaw, "jaw", shape=(3,))
    return np.array([2 * pitch, 2 * roll, 2 * min(yaw, 0.0)])


def face_yaw_prior(yaw_degrees):
    """Hinge penalty on head yaw beyond +-90 degrees."""
    return float(max(abs(float(yaw_degrees)) - FACE_YAW_LIMIT_DEG, 0.0) ** 2)


def face_yaw_prior_grad(yaw_degrees):
    y = float(yaw_degrees)
    excess = abs(y) - FACE_YAW_LIMIT_DEG
    return 2.0 * excess * np.sign(y) if excess > 0 else 0.0


@dataclass(frozen=True, eq=False)
class GaussianClass:
    mu: np.ndarray
    cov: np.ndarray
    precision: np.ndarray


@dataclass
class GenderPrior:
    """Per-class Gaussians over shape coefficients; ``neutral`` serves unknown gender."""

    classes: dict

    @property
    def n_betas(self):
        return next(iter(self.classes.values())).mu.shape[0]

    def entry(self, label):
        key = NEUTRAL if label in (None, "unknown", NEUTRAL) else label
        if key not in self.classes:
            raise UnknownLabelClassMissing(f"prior has no class for label {label!r}")
        return self.classes[key]

    @classmethod
    def isotropic(cls, n_betas):
        """Standard normal for every label, so any gender label is accepted."""
        eye = np.eye(n_betas)
        return cls({k: GaussianClass(np.zeros(n_betas), eye.copy(), eye.copy()) for k in GENDER_LABELS + (NEUTRAL,)})


def fit_gender_prior(samples, label=None):
    """Sample mean and ridge-regularized covariance of shape vectors.

    The ridge is ``1e-6 * trace / n_beta`` with an absolute floor of 1e-6 so
    that identical samples still give an invertible covariance.
    """
    X = as_float_array(samples, "samples", ndim=2)
    n, k = X.shape
    if n < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {n}")
    mu = X.mean(axis=0)
    cov = np.atleast_2d(np.cov(X, rowvar=False))
    eps = 1e-6 * np.trace(cov) / k
    if eps <= 0:
        eps = 1e-6
    cov = cov + eps * np.eye(k)
    cov = 0.5 * (cov + cov.T)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(f"covariance for {label!r} is not positive definite") from exc
    Linv = np.linalg.solve(L, np.eye(k))
    precision = Linv.T @ Linv
    if not np.all(np.isfinite(precision)):
        raise SingularCovariance(f"covariance for {label!r} could not be inverted")
    return GaussianClass(mu=mu, cov=cov, precision=precision)


def gendered_shape_loss(beta, label, prior):
    """Squared Mahalanobis distance of beta to the label's class mean.

    Unknown or missing labels use the label-free ``neutral`` class.
    """
    entry = prior.entry(label)
    beta = as_float_array(beta, "beta", shape=entry.mu.shape)
    r = beta - entry.mu
    return float(r @ entry.precision @ r)


def gendered_shape_loss_grad(beta, label, prior):
    entry = prior.entry(label)
    beta = as_float_array(beta, "beta", shape=entry.mu.shape)
    P = entry.precision
    return (P + P.T) @ (beta - entry.mu)


def update_loss(fbp, fused):
    """L1 distance between the extracted body feature and the fused feature."""
    a = as_float_array(fbp, "F_b^p")
    b = as_float_array(fused, "fused")
    if a.shape != b.shape:
        raise DimensionMismatch("feature shapes differ")
    return float(np.abs(a - b).sum())


def update_loss_grad(fbp, fused):
    """Gradients w.r.t. both arguments."""
    s = np.sign(np.asarray(fbp, dtype=np.float64) - np.asarray(fused, dtype=np.float64))
    return s, -s


def total_loss(components, weights=None):
    """Weighted sum of named loss values; returns ``(total, breakdown)``.

    ``breakdown`` holds the weighted contribution of every component so that
    it sums to the total.
    """
    weights = LossWeights() if weights is None else weights
    breakdown = {}
    for name, value in components.items():
        value = float(value)
        if not np.isfinite(value):
            raise NonFiniteComponent(f"loss component {name} is not finite")
        if not hasattr(weights, name):
            raise ConfigInvalid(f"no weight for loss component {name}")
        breakdown[name] = getattr(weights, name) * value
    return float(sum(breakdown.values())), breakdown
