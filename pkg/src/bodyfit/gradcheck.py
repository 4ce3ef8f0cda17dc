"""Central finite-difference checks of every hand-written gradient.

Each suite draws random inputs from a seed, evaluates a scalar that exercises
the backward pass with random upstream gradients, and compares the analytic
gradient with central differences. L1 terms are checked at points whose
residuals stay well away from zero.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import camera as cam_mod
from . import fitter
from . import losses as L
from . import moderator as mod
from . import rotations as rot
from .body_model import N_LANDMARKS, Parameters, pose_model, pose_model_backward
from .exceptions import ConfigInvalid, GradientCheckFailed
from .synthetic import CLOSURE_PAIRS, sample_parameters, synth_model

SUITES = ("rotations", "body_model", "camera", "losses", "moderator", "objective")
TOLERANCE = 1e-4
STEP = 1e-6
KINK_MARGIN = 1e-3
CHECK_DIMS = dict(n_vertices=120, n_joints=11, n_betas=4, n_psi=4)


def numeric_gradient(f, x, h=STEP):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


@dataclass
class CheckResult:
    suite: str
    name: str
    seed: int
    error: float

    @property
    def passed(self):
        return self.error < TOLERANCE


@dataclass
class GradcheckReport:
    results: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def max_error(self):
        return max((r.error for r in self.results), default=0.0)

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    def worst(self):
        """Largest error per ``suite/name``."""
        out = {}
        for r in self.results:
            key = f"{r.suite}/{r.name}"
            out[key] = max(out.get(key, 0.0), r.error)
        return out


def _away(rng, shape, lo=0.05, hi=1.0):
    """Random values with magnitude in [lo, hi] and random sign."""
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _check(f, x, analytic):
    return relative_error(analytic, numeric_gradient(f, x))


def suite_rotations(rng):
    out = []
    r = rng.standard_normal((4, 6))
    G = rng.standard_normal((4, 3, 3))
    out.append(("rot6d", _check(lambda x: np.sum(G * rot.rot6d_to_matrix(x)), r, rot.rot6d_to_matrix_backward(r, G))))
    e = rng.uniform(-1.5, 1.5, size=3)
    G = rng.standard_normal((3, 3))
    out.append(("euler", _check(lambda x: np.sum(G * rot.euler_to_matrix(x)), e, rot.euler_to_matrix_backward(e, G))))
    R = rot.random_rotations(rng, 3)
    g = rng.standard_normal(3)
    out.append(("yaw", _check(lambda x: np.sum(g * rot.yaw_from_matrix(x)), R, rot.yaw_from_matrix_backward(R, g))))
    return out


_MODELS = {}


def _check_model(seed):
    key = seed % 4
    if key not in _MODELS:
        _MODELS[key] = synth_model(seed=key, **CHECK_DIMS)
    return _MODELS[key]


def suite_body_model(rng, model):
    params = sample_parameters(model, rng, pose_scale=0.5, leaf_pose=True)
    params.jaw = rng.uniform(-0.5, 0.5, size=3)
    res = pose_model(model, params)
    GV = rng.standard_normal(res.vertices.shape)
    GX = rng.standard_normal(res.joints_posed.shape)
    GR = rng.standard_normal(res.world_rotations.shape)

    def f(vec):
        r = pose_model(model, Parameters.from_vector(model, vec))
        return np.sum(GV * r.vertices) + np.sum(GX * r.joints_posed) + np.sum(GR * r.world_rotations)

    g = pose_model_backward(model, params, res, GV, GX, GR)
    return [("pose_model", _check(f, params.to_vector(), g.to_vector()))]


def suite_camera(rng):
    pts = rng.standard_normal((6, 3))
    s, t = rng.uniform(0.5, 3.0), rng.standard_normal(2)
    G = rng.standard_normal((6, 2))
    x0 = np.concatenate([pts.ravel(), [s], t])

    def f(x):
        c = cam_mod.WeakPerspectiveCamera(x[18], x[19:21])
        return np.sum(G * cam_mod.project(x[:18].reshape(6, 3), c))

    gp, gs, gt = cam_mod.project_backward(pts, cam_mod.WeakPerspectiveCamera(s, t), G)
    return [("project", _check(f, x0, np.concatenate([gp.ravel(), [gs], gt])))]


def _closure_gt(rng, pred):
    i, j = CLOSURE_PAIRS[:, 0], CLOSURE_PAIRS[:, 1]
    while True:
        gt = pred + _away(rng, pred.shape)
        r = (pred[i] - pred[j]) - (gt[i] - gt[j])
        if np.abs(r).min() > KINK_MARGIN:
            return gt


def suite_losses(rng):
    out = []
    for dim, fn, gfn in ((2, L.joint_loss_2d, L.joint_loss_2d_grad), (3, L.joint_loss_3d, L.joint_loss_3d_grad)):
        pred = rng.standard_normal((7, dim))
        gt = pred + _away(rng, pred.shape)
        vis = rng.random(7) < 0.7
        for delta in (0.0, 0.1):
            err = _check(lambda x: fn(x, gt, vis, delta), pred, gfn(pred, gt, vis, delta))
            out.append((f"joint_{dim}d_delta{delta:g}", err))

    lm = rng.standard_normal((N_LANDMARKS, 2))
    gt = lm + _away(rng, lm.shape)
    out.append(("landmarks", _check(lambda x: L.landmark_loss(x, gt), lm, L.landmark_loss_grad(lm, gt))))
    gt = _closure_gt(rng, lm)
    for delta in (0.0, 0.1):
        err = _check(
            lambda x: L.closure_loss(x, gt, CLOSURE_PAIRS, delta), lm, L.closure_loss_grad(lm, gt, CLOSURE_PAIRS, delta)
        )
        out.append((f"closure_delta{delta:g}", err))

    blocks = [rng.standard_normal((3, 6)), rng.standard_normal(4)]
    target = [rng.standard_normal((3, 6)), rng.standard_normal(4)]
    x0 = np.concatenate([b.ravel() for b in blocks])

    def split(x):
        return [x[:18].reshape(3, 6), x[18:]]

    g = np.concatenate([b.ravel() for b in L.param_loss_grad(blocks, target)])
    out.append(("param", _check(lambda x: L.param_loss(split(x), target), x0, g)))

    image = rng.random((4, 5, 3))
    rendered = image + _away(rng, image.shape)
    mask = (rng.random((4, 5)) < 0.6).astype(float)
    out.append((
        "photometric",
        _check(lambda x: L.photometric_loss(image, x, mask), rendered, L.photometric_loss_grad(image, rendered, mask)),
    ))

    a, b = rng.standard_normal(8), rng.standard_normal(8)
    ga, gb = L.identity_loss_grad(a, b)
    out.append(("identity_a", _check(lambda x: L.identity_loss(x, b), a, ga)))
    out.append(("identity_b", _check(lambda x: L.identity_loss(a, x), b, gb)))

    psi = rng.standard_normal(5)
    out.append(("expression", _check(L.expression_prior, psi, L.expression_prior_grad(psi))))
    jaw = np.concatenate([rng.standard_normal(2), _away(rng, 1, 0.1, 0.5)])
    out.append(("jaw", _check(L.jaw_prior, jaw, L.jaw_prior_grad(jaw))))
    # away from the hinge at +-90 degrees
    yaw = rng.choice([-1.0, 1.0]) * rng.choice([rng.uniform(0, 85), rng.uniform(95, 180)])
    out.append(("face_yaw", _check(lambda x: L.face_yaw_prior(x[0]), np.array([yaw]), [L.face_yaw_prior_grad(yaw)])))

    prior = L.GenderPrior({"female": L.fit_gender_prior(rng.standard_normal((20, 4)), "female")})
    beta = rng.standard_normal(4)
    out.append((
        "shape",
        _check(
            lambda x: L.gendered_shape_loss(x, "female", prior), beta, L.gendered_shape_loss_grad(beta, "female", prior)
        ),
    ))

    fbp = rng.standard_normal((3, 4))
    fused = fbp + _away(rng, fbp.shape)
    g1, g2 = L.update_loss_grad(fbp, fused)
    out.append(("update_fbp", _check(lambda x: L.update_loss(x, fused), fbp, g1)))
    out.append(("update_fused", _check(lambda x: L.update_loss(fbp, x), fused, g2)))
    return out


def suite_moderator(rng):
    d, h, n = 5, 4, 3
    state = mod.init_moderator(d, h, rng)
    state.temperature = float(rng.uniform(0.5, 2.0))
    F_b, F_p = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    Gf, Gb, Gw = rng.standard_normal((n, d)), rng.standard_normal((n, d)), rng.standard_normal(n)

    def scalar(st, fb, fp):
        o, c = mod.forward(st, fb, fp)
        return np.sum(Gf * o.fused) + np.sum(Gb * c.fbp) + np.sum(Gw * o.w)

    def f_params(vec):
        st = state.copy()
        st.set_vector(vec)
        return scalar(st, F_b, F_p)

    _, cache = mod.forward(state, F_b, F_p)
    g = mod.backward(state, cache, Gf, Gb, Gw)
    out = [("params", _check(f_params, state.to_vector(), g.to_vector()))]
    out.append(("F_b", _check(lambda x: scalar(state, x, F_p), F_b, g.F_b)))
    out.append(("F_p", _check(lambda x: scalar(state, F_b, x), F_p, g.F_p)))

    target = rng.standard_normal((n, d))
    _, tg = mod.training_loss(state, F_b, F_p, target, update_weight=0.3)

    def f_train(vec):
        st = state.copy()
        st.set_vector(vec)
        return mod.training_loss(st, F_b, F_p, target, update_weight=0.3)[0]

    out.append(("training_loss", _check(f_train, state.to_vector(), tg.to_vector())))
    return out


def _linear_map(rng, n_out, model):
    A = rng.standard_normal((n_out, 3 * model.n_vertices)) / model.n_vertices
    return A


def _objective_problem(rng, model):
    params = sample_parameters(model, rng, pose_scale=0.4, leaf_pose=True)
    params.pose[0] = rot.matrix_to_rot6d(rot.random_rotations(rng, 1)[0])
    params.jaw = np.concatenate([rng.normal(0, 0.1, 2), _away(rng, 1, 0.05, 0.3)])
    cams = {
        "body": cam_mod.WeakPerspectiveCamera(rng.uniform(40, 80), rng.uniform(80, 140, 2)),
        "face": cam_mod.WeakPerspectiveCamera(rng.uniform(200, 400), rng.uniform(-50, 50, 2)),
        "hand": cam_mod.WeakPerspectiveCamera(rng.uniform(80, 120), rng.uniform(0, 100, 2)),
    }
    res = pose_model(model, params)
    X, hands = res.joints_posed, model.hand_joints()
    lm_pred = cam_mod.project(res.vertices[model.landmark_indices], cams["face"])

    A = _linear_map(rng, 12, model)
    B = _linear_map(rng, 6, model)
    shape_img = (2, 2, 3)
    rendered = (A @ res.vertices.ravel()).reshape(shape_img)

    def renderer(V):
        return (A @ V.ravel()).reshape(shape_img), lambda g: (A.T @ g.ravel()).reshape(-1, 3)

    def embedder(V):
        return B @ V.ravel() + 1.0, lambda g: (B.T @ g).reshape(-1, 3)

    targets = sample_parameters(model, rng, pose_scale=0.3)
    obs = fitter.Observations(
        body_2d=cam_mod.project(X, cams["body"]) + 5 * _away(rng, (model.n_joints, 2)),
        body_2d_vis=rng.random(model.n_joints) < 0.8,
        body_3d=X + 0.1 * _away(rng, X.shape),
        hand_2d=cam_mod.project(X[hands], cams["hand"]) + 5 * _away(rng, (len(hands), 2)),
        hand_3d=X[hands] + 0.1 * _away(rng, (len(hands), 3)),
        landmarks=_closure_gt(rng, lm_pred),
        photometric=fitter.Photometric(
            image=rendered + _away(rng, shape_img), mask=np.ones(shape_img[:2]), renderer=renderer
        ),
        identity=fitter.Identity(target=rng.standard_normal(6), embedder=embedder),
        param_targets=targets,
    )
    prior = L.GenderPrior({"male": L.fit_gender_prior(rng.standard_normal((30, model.n_betas)), "male")})
    weights = L.LossWeights(**{k: float(v) for k, v in zip(L.LossWeights().to_dict(), rng.uniform(0.5, 2.0, 16))})
    problem = fitter.FitProblem(model, obs, gender="male", prior=prior, weights=weights)
    return problem, params, cams


def suite_objective(rng, model):
    problem, params, cams = _objective_problem(rng, model)
    packer = fitter._Packer(model, fitter.FREE_GROUPS)
    x0 = packer.pack(params, cams)

    def f(x):
        p, c = packer.unpack(x, params, cams)
        return fitter.objective(problem, p, c, need_grad=False).total

    value = fitter.objective(problem, params, cams)
    out = [("total", _check(f, x0, packer.grad(value, cams)))]

    def f_smooth(x):
        p, c = packer.unpack(x, params, cams)
        return fitter.objective(problem, p, c, need_grad=False, smoothing=0.5).total

    value = fitter.objective(problem, params, cams, smoothing=0.5)
    out.append(("total_smoothed", _check(f_smooth, x0, packer.grad(value, cams))))
    return out


def run(modules="all", seeds=range(100)):
    """Run the selected suites for every seed; returns a :class:`GradcheckReport`."""
    if modules in (None, "all"):
        modules = SUITES
    elif isinstance(modules, str):
        modules = (modules,)
    unknown = set(modules) - set(SUITES)
    if unknown:
        raise ConfigInvalid(f"unknown gradcheck module(s): {sorted(unknown)}; choose from {SUITES}")
    report = GradcheckReport()
    t0 = time.perf_counter()
    for seed in seeds:
        model = _check_model(seed) if {"body_model", "objective"} & set(modules) else None
        for suite in modules:
            rng = np.random.default_rng([seed, SUITES.index(suite)])
            if suite == "rotations":
                rows = suite_rotations(rng)
            elif suite == "body_model":
                rows = suite_body_model(rng, model)
            elif suite == "camera":
                rows = suite_camera(rng)
            elif suite == "losses":
                rows = suite_losses(rng)
            elif suite == "moderator":
                rows = suite_moderator(rng)
            else:
                rows = suite_objective(rng, model)
            report.results += [CheckResult(suite, name, int(seed), err) for name, err in rows]
    report.seconds = time.perf_counter() - t0
    return report


def assert_gradients(modules="all", seeds=range(100)):
    report = run(modules, seeds)
    if not report.passed:
        bad = {k: v for k, v in report.worst().items() if v >= TOLERANCE}
        raise GradientCheckFailed(f"gradient check failed: {bad}")
    return report
