"""Confidence-moderated fusion of body and part-expert features.

The body feature passes through a linear extractor, a one-hidden-layer tanh
MLP scores the pair (extracted body feature, part feature), and a
temperature-scaled sigmoid turns the score into the body weight ``w``::

    fused = w * F_b^p + (1 - w) * F_p

A toy training harness with hand-written backpropagation shows the gate
learning to distrust a corrupted part expert.
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import as_float_array
from .exceptions import ConfigInvalid, DimensionMismatch, StaleCache
from .losses import update_loss
from .optim import Adam

PARAM_NAMES = ("W_ext", "b_ext", "W1", "b1", "w2", "b2", "temperature")


@dataclass(eq=False)
class ModeratorState:
    W_ext: np.ndarray  # (d, d)
    b_ext: np.ndarray  # (d,)
    W1: np.ndarray  # (h, 2d)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h,)
    b2: float
    temperature: float
    version: int = field(default=0, compare=False)

    @property
    def n_features(self):
        return self.W_ext.shape[0]

    @property
    def hidden(self):
        return self.W1.shape[0]

    def to_vector(self):
        return np.concatenate(
            [self.W_ext.ravel(), self.b_ext, self.W1.ravel(), self.b1, self.w2, [self.b2, self.temperature]]
        )

    def set_vector(self, vec):
        """Overwrite all parameters in place and invalidate outstanding caches."""
        d, h = self.n_features, self.hidden
        sizes = [d * d, d, h * 2 * d, h, h, 1, 1]
        if vec.shape != (sum(sizes),):
            raise DimensionMismatch("parameter vector has the wrong length")
        parts = np.split(vec, np.cumsum(sizes)[:-1])
        self.W_ext = parts[0].reshape(d, d).copy()
        self.b_ext = parts[1].copy()
        self.W1 = parts[2].reshape(h, 2 * d).copy()
        self.b1 = parts[3].copy()
        self.w2 = parts[4].copy()
        self.b2 = float(parts[5][0])
        self.temperature = float(parts[6][0])
        self.version += 1

    def copy(self):
        return ModeratorState(
            self.W_ext.copy(), self.b_ext.copy(), self.W1.copy(), self.b1.copy(), self.w2.copy(),
            self.b2, self.temperature, self.version,
        )


def default_hidden(d):
    return max(8, d // 4)


def init_moderator(n_features, hidden=None, rng=None):
    """Uniform(+-1/sqrt(fan_in)) weights, temperature 1."""
    rng = np.random.default_rng(0) if rng is None else rng
    d = int(n_features)
    h = default_hidden(d) if hidden is None else int(hidden)
    if d < 1 or h < 1:
        raise ConfigInvalid("feature and hidden sizes must be positive")

    def u(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return ModeratorState(
        W_ext=u(d, (d, d)),
        b_ext=u(d, d),
        W1=u(2 * d, (h, 2 * d)),
        b1=u(2 * d, h),
        w2=u(h, h),
        b2=float(u(h, ())),
        temperature=1.0,
    )


def _batch(x, d, name):
    x = as_float_array(x, name)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != d:
        raise DimensionMismatch(f"{name}: expected trailing size {d}, got {x.shape}")
    return x, single


def extract(state, F_b):
    """Linear extractor ``W F_b + b`` mapping the body feature into part space."""
    x, single = _batch(F_b, state.n_features, "F_b")
    out = x @ state.W_ext.T + state.b_ext
    return out[0] if single else out


@dataclass
class MLPCache:
    x: np.ndarray
    a1: np.ndarray
    token: tuple


def mlp_forward(state, x):
    """Score of the concatenated input (length 2d); returns ``(score, cache)``."""
    x, single = _batch(x, 2 * state.n_features, "moderator input")
    a1 = np.tanh(x @ state.W1.T + state.b1)
    score = a1 @ state.w2 + state.b2
    cache = MLPCache(x=x, a1=a1, token=(id(state), state.version))
    return (score[0] if single else score), cache


@dataclass
class FusionOutput:
    w: np.ndarray
    fused: np.ndarray


def _sigmoid(u):
    # split by sign to avoid overflow in exp
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def confidence(score, temperature):
    return _sigmoid(temperature * np.atleast_1d(np.asarray(score, dtype=np.float64)))


@dataclass
class ForwardCache:
    F_b: np.ndarray
    F_p: np.ndarray
    fbp: np.ndarray
    score: np.ndarray
    w: np.ndarray
    mlp: MLPCache
    single: bool


def fuse(state, F_b_p, F_p):
    """Gate and blend an already-extracted body feature with a part feature."""
    out, _ = _fuse(state, F_b_p, F_p)
    return out


def _fuse(state, F_b_p, F_p):
    d = state.n_features
    fbp, single = _batch(F_b_p, d, "F_b^p")
    fp, _ = _batch(F_p, d, "F_p")
    if fbp.shape != fp.shape:
        raise DimensionMismatch("F_b^p and F_p batch shapes differ")
    score, mlp_cache = mlp_forward(state, np.concatenate([fbp, fp], axis=1))
    score = np.atleast_1d(score)
    w = confidence(score, state.temperature)
    fused = w[:, None] * fbp + (1.0 - w[:, None]) * fp
    out = FusionOutput(w=w[0] if single else w, fused=fused[0] if single else fused)
    return out, (fbp, fp, score, w, mlp_cache, single)


def forward(state, F_b, F_p):
    """extract -> MLP -> gate -> blend; returns ``(FusionOutput, ForwardCache)``."""
    fbp = extract(state, F_b)
    out, (fbp2, fp, score, w, mlp_cache, single) = _fuse(state, fbp, F_p)
    fb, _ = _batch(F_b, state.n_features, "F_b")
    cache = ForwardCache(F_b=fb, F_p=fp, fbp=fbp2, score=score, w=w, mlp=mlp_cache, single=single)
    return out, cache


@dataclass
class ModeratorGrads:
    W_ext: np.ndarray
    b_ext: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    temperature: float
    F_b: np.ndarray
    F_p: np.ndarray

    def to_vector(self):
        return np.concatenate(
            [self.W_ext.ravel(), self.b_ext, self.W1.ravel(), self.b1, self.w2, [self.b2, self.temperature]]
        )


def backward(state, cache, grad_fused=None, grad_fbp=None, grad_w=None):
    """Backpropagate upstream gradients through :func:`forward`.

    ``grad_fused`` is dL/dfused, ``grad_fbp`` any direct dL/dF_b^p (e.g. from
    the update loss) and ``grad_w`` any direct dL/dw. Returns gradients for
    every state parameter (temperature included) and both input features.
    """
    if cache.mlp.token != (id(state), state.version):
        raise StaleCache("forward cache does not belong to the current moderator state")
    n, d = cache.fbp.shape

    def as_grad(g, shape):
        if g is None:
            return np.zeros(shape)
        return np.asarray(g, dtype=np.float64).reshape(shape)

    g_f = as_grad(grad_fused, (n, d))
    g_fbp = as_grad(grad_fbp, (n, d))
    g_w = as_grad(grad_w, (n,))

    w = cache.w
    g_w = g_w + np.sum(g_f * (cache.fbp - cache.F_p), axis=1)
    g_fbp = g_fbp + w[:, None] * g_f
    g_fp = (1.0 - w[:, None]) * g_f

    g_u = g_w * w * (1.0 - w)
    g_t = float(np.sum(g_u * cache.score))
    g_score = g_u * state.temperature

    a1 = cache.mlp.a1
    g_w2 = a1.T @ g_score
    g_b2 = float(np.sum(g_score))
    g_z1 = np.outer(g_score, state.w2) * (1.0 - a1 * a1)
    g_W1 = g_z1.T @ cache.mlp.x
    g_b1 = g_z1.sum(axis=0)
    g_x = g_z1 @ state.W1
    g_fbp = g_fbp + g_x[:, :d]
    g_fp = g_fp + g_x[:, d:]

    g_Wext = g_fbp.T @ cache.F_b
    g_bext = g_fbp.sum(axis=0)
    g_Fb = g_fbp @ state.W_ext

    if cache.single:
        g_Fb, g_fp = g_Fb[0], g_fp[0]
    return ModeratorGrads(g_Wext, g_bext, g_W1, g_b1, g_w2, g_b2, g_t, g_Fb, g_fp)


@dataclass
class ToyConfig:
    seed: int = 0
    steps: int = 5000
    lr: float = 1e-3
    corruption_rate: float = 0.5
    n_features: int = 32
    hidden: int = None
    batch_size: int = 64
    body_noise: float = 1.0
    part_noise: float = 0.1
    corruption_noise: float = 1.5
    update_weight: float = 0.1
    eval_samples: int = 2000
    threshold: float = 0.5

    def __post_init__(self):
        if self.steps < 0 or self.lr <= 0 or self.batch_size < 1 or self.n_features < 1:
            raise ConfigInvalid("steps >= 0, lr > 0, batch_size >= 1 and n_features >= 1 are required")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ConfigInvalid("corruption_rate must lie in [0, 1]")
        if min(self.body_noise, self.part_noise, self.corruption_noise) < 0 or self.update_weight < 0:
            raise ConfigInvalid("noise levels and update_weight must be nonnegative")


class ToyTask:
    """Latent target seen through a mixed, noisy body channel and a part
    channel that is occasionally corrupted by heavy noise."""

    def __init__(self, config, rng):
        self.config = config
        d = config.n_features
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        self.mixing = q

    def sample(self, rng, n, corruption_rate=None, part_noise=None):
        c = self.config
        rate = c.corruption_rate if corruption_rate is None else corruption_rate
        d = c.n_features
        z = rng.standard_normal((n, d))
        F_b = z @ self.mixing.T + c.body_noise * rng.standard_normal((n, d))
        corrupted = rng.random(n) < rate
        if part_noise is None:
            noise = np.where(corrupted, c.corruption_noise, c.part_noise)
        else:
            noise = np.full(n, float(part_noise))
        F_p = z + noise[:, None] * rng.standard_normal((n, d))
        return F_b, F_p, z, corrupted


def training_loss(state, F_b, F_p, target, update_weight=1.0):
    """Batch-mean of squared regression error plus weighted update loss, with grads."""
    out, cache = forward(state, F_b, F_p)
    n = cache.fbp.shape[0]
    fused = np.atleast_2d(out.fused)
    err = fused - np.atleast_2d(target)
    reg = float(np.sum(err * err)) / n
    upd = update_loss(cache.fbp, fused) / n
    s = np.sign(cache.fbp - fused)
    g_fused = (2.0 * err - update_weight * s) / n
    g_fbp = update_weight * s / n
    grads = backward(state, cache, grad_fused=g_fused, grad_fbp=g_fbp)
    return reg + update_weight * upd, grads


def roc_auc(scores, labels):
    """Mann-Whitney estimate of P(score | positive > score | negative)."""
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class ToyReport:
    mean_w_clean: float
    mean_w_corrupted: float
    auc: float
    final_loss: float
    calibration: list  # rows of (noise_level, mean_w, count)
    loss_history: list = field(repr=False, default_factory=list)

    def calibration_csv(self):
        lines = ["noise_level,mean_w,count"]
        lines += [f"{lvl!r},{w!r},{cnt}" for lvl, w, cnt in self.calibration]
        return "\n".join(lines) + "\n"


CALIBRATION_LEVELS = (0.0, 0.1, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0)


def fit_moderator(state, F_b, F_p, target, steps, lr, batch_size, update_weight, rng):
    """Minibatch Adam on the fusion objective; mutates ``state`` in place."""
    opt = Adam(state.to_vector().size, lr=lr)
    n = F_b.shape[0]
    history = []
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        loss, grads = training_loss(state, F_b[idx], F_p[idx], target[idx], update_weight)
        history.append(loss)
        state.set_vector(opt.step(state.to_vector(), grads.to_vector()))
    return history


def evaluate_toy(state, task, rng, n):
    c = task.config
    F_b, F_p, z, corrupted = task.sample(rng, n, corruption_rate=0.5)
    out, _ = forward(state, F_b, F_p)
    w = np.atleast_1d(out.w)
    table = []
    for level in CALIBRATION_LEVELS:
        fb, fp, _, _ = task.sample(rng, max(n // 4, 1), part_noise=level)
        wl = np.atleast_1d(forward(state, fb, fp)[0].w)
        table.append((float(level), float(wl.mean()), int(wl.size)))
    fused = np.atleast_2d(out.fused)
    loss = float(np.sum((fused - z) ** 2)) / n
    return ToyReport(
        mean_w_clean=float(w[~corrupted].mean()),
        mean_w_corrupted=float(w[corrupted].mean()),
        auc=roc_auc(w, corrupted),
        final_loss=loss,
        calibration=table,
    )


def train_toy(config=None):
    """Train a moderator on the synthetic corruption task.

    Training data use ``config.corruption_rate``; the report is computed on a
    held-out set with half the part inputs corrupted so that both groups are
    always present, plus a w-versus-part-noise calibration table.
    """
    config = ToyConfig() if config is None else config
    rng = np.random.default_rng(config.seed)
    state = init_moderator(config.n_features, config.hidden, rng)
    task = ToyTask(config, rng)
    n_train = max(config.batch_size * 64, 4096)
    F_b, F_p, z, _ = task.sample(rng, n_train)
    history = fit_moderator(
        state, F_b, F_p, z, config.steps, config.lr, config.batch_size, config.update_weight, rng
    )
    report = evaluate_toy(state, task, np.random.default_rng(config.seed + 1), config.eval_samples)
    report.loss_history = history
    return state, report


def confident(w, threshold=0.5):
    """Whether the part expert is trusted (body weight below ``threshold``)."""
    return np.asarray(w) < threshold
