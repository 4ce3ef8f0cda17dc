"""Recover shape, pose, expression and cameras from 2D keypoints and landmarks.

The objective sums every data term and prior that applies to the given
observations. Gradients are propagated by hand through projection, the body
model and the rotation decoders. Optimization runs in stages, each freeing
a subset of parameter groups, with either L-BFGS or Adam plus backtracking;
every pass is monotone in its own objective.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import losses as L
from . import rotations as rot
from ._validation import as_float_array, as_visibility
from .body_model import N_LANDMARKS, Parameters, pose_model, pose_model_backward
from .camera import WeakPerspectiveCamera, project, project_backward
from .exceptions import ConfigInvalid, DimensionMismatch, Diverged, NonFiniteLoss, TooFewKeypoints, ValidationError
from .optim import Adam

CAMERAS = ("body", "face", "hand")
POSE_GROUPS = ("global_orient", "body_pose", "hand_pose", "head_pose")
FREE_GROUPS = ("camera_body", "camera_face", "camera_hand") + POSE_GROUPS + ("jaw", "expression", "shape")
FTOL_WINDOW = 20  # accepted steps over which relative progress is measured
STALL_LIMIT = 10  # consecutive rejected Adam steps before a pass gives up
LBFGS_MEMORY = 20
OPTIMIZERS = ("adam", "lbfgs")


@dataclass
class Photometric:
    """Face image term. ``renderer(vertices)`` returns ``(image, vjp)`` where
    ``vjp(grad_image)`` maps an image gradient to a vertex gradient. With only
    a fixed ``rendered`` image the term is a constant."""

    image: np.ndarray
    mask: np.ndarray
    rendered: np.ndarray = None
    renderer: object = None


@dataclass
class Identity:
    """Face-recognition term between a target embedding and the embedding of
    the current mesh, ``embedder(vertices) -> (embedding, vjp)``; or a fixed
    ``(a, b)`` pair that only contributes a constant."""

    target: np.ndarray = None
    embedder: object = None
    pair: tuple = None


@dataclass
class Observations:
    body_2d: np.ndarray = None  # (J, 2) all model joints, body camera
    body_2d_vis: np.ndarray = None
    body_3d: np.ndarray = None  # (J, 3) posed joints in model space
    body_3d_vis: np.ndarray = None
    hand_2d: np.ndarray = None  # (H, 2) hand joints (model.hand_joints()), hand camera
    hand_2d_vis: np.ndarray = None
    hand_3d: np.ndarray = None
    landmarks: np.ndarray = None  # (68, 2) face camera
    landmarks_vis: np.ndarray = None
    photometric: Photometric = None
    identity: Identity = None
    param_targets: Parameters = None  # regressed parameters to agree with

    def any_present(self):
        return any(
            x is not None
            for x in (self.body_2d, self.body_3d, self.hand_2d, self.hand_3d, self.landmarks, self.param_targets)
        )


@dataclass
class FitProblem:
    model: object
    observations: Observations
    gender: str = None
    prior: L.GenderPrior = None
    weights: L.LossWeights = field(default_factory=L.LossWeights)

    def __post_init__(self):
        if self.prior is None:
            self.prior = L.GenderPrior.isotropic(self.model.n_betas)
        self.check()

    def check(self):
        m, o = self.model, self.observations
        if not o.any_present():
            raise ValidationError("a fit needs at least one observation set")
        J, H = m.n_joints, len(m.hand_joints())

        def arr(name, shape):
            x = getattr(o, name)
            if x is not None:
                setattr(o, name, as_float_array(x, name, shape=shape))

        arr("body_2d", (J, 2))
        arr("body_3d", (J, 3))
        arr("hand_2d", (H, 2))
        arr("hand_3d", (H, 3))
        arr("landmarks", (N_LANDMARKS, 2))
        for name, n in (("body_2d_vis", J), ("body_3d_vis", J), ("hand_2d_vis", H), ("landmarks_vis", N_LANDMARKS)):
            if getattr(o, name) is not None:
                setattr(o, name, as_visibility(getattr(o, name), n, name))
        if o.param_targets is not None:
            o.param_targets = o.param_targets.copy().check(m)
        if self.prior.n_betas != m.n_betas:
            raise DimensionMismatch("shape prior and model disagree on n_betas")
        self.prior.entry(self.gender)
        return self


@dataclass
class Stage:
    free: tuple
    iterations: int = 200
    lr: float = 1e-2
    smoothing: tuple = (1e-3,)  # one pass per width
    optimizer: str = "adam"

    def __post_init__(self):
        self.free = tuple(self.free)
        if self.optimizer not in OPTIMIZERS:
            raise ConfigInvalid(f"optimizer must be one of {OPTIMIZERS}")
        widths = np.atleast_1d(np.asarray(self.smoothing, dtype=np.float64))
        if widths.ndim != 1 or widths.size == 0 or not np.all(np.isfinite(widths)) or np.any(widths < 0):
            raise ConfigInvalid("stage smoothing must be one or more nonnegative widths")
        self.smoothing = tuple(float(w) for w in widths)
        unknown = set(self.free) - set(FREE_GROUPS)
        if unknown:
            raise ConfigInvalid(f"unknown free parameter group(s): {sorted(unknown)}")
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ConfigInvalid("stage iterations must be a nonnegative integer")
        self.iterations = int(self.iterations)
        if not self.lr > 0 or not math.isfinite(self.lr):
            raise ConfigInvalid("stage learning rate must be positive")


def default_stages(iterations=(300, 400)):
    """Joint L-BFGS over every group: a wide smoothing pass, then continuation
    towards the exact L1 terms. Freezing shape or pose in early stages tends
    to settle in worse basins on synthetic round trips."""
    return [
        Stage(FREE_GROUPS, iterations[0], smoothing=(1.0,), optimizer="lbfgs"),
        Stage(FREE_GROUPS, iterations[1], smoothing=(0.1, 0.01, 0.001), optimizer="lbfgs"),
    ]


@dataclass
class FitConfig:
    stages: list = field(default_factory=default_stages)
    gtol: float = 1e-8
    ftol: float = 1e-10
    seed: int = 0
    line_search_steps: int = 12
    lr_floor: float = 1e-2  # final fraction of the stage lr under cosine decay

    def __post_init__(self):
        self.stages = [s if isinstance(s, Stage) else Stage(**s) for s in self.stages]
        if not self.stages:
            raise ConfigInvalid("at least one stage is required")
        if self.gtol < 0 or self.ftol < 0:
            raise ConfigInvalid("tolerances must be nonnegative")
        if not 0 < self.lr_floor <= 1:
            raise ConfigInvalid("lr_floor must lie in (0, 1]")

    def to_dict(self):
        return {
            "stages": [
                {
                    "free": list(s.free),
                    "iterations": s.iterations,
                    "lr": s.lr,
                    "smoothing": list(s.smoothing),
                    "optimizer": s.optimizer,
                }
                for s in self.stages
            ],
            "gtol": self.gtol,
            "ftol": self.ftol,
            "seed": self.seed,
            "line_search_steps": self.line_search_steps,
            "lr_floor": self.lr_floor,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc


@dataclass
class FitResult:
    params: Parameters
    cameras: dict
    trace: list
    converged: bool


@dataclass
class ObjectiveValue:
    total: float
    breakdown: dict
    grad_params: Parameters = None
    grad_cameras: dict = None  # name -> (dL/ds, dL/dt)


def _zero_cam_grads():
    return {c: [0.0, np.zeros(2)] for c in CAMERAS}


def objective(problem, params, cameras, need_grad=True, smoothing=0.0):
    """Weighted total loss, its breakdown and analytic gradients.

    ``cameras`` maps ``body``, ``face`` and ``hand`` to cameras. Gradients are
    returned for every parameter; callers mask out the frozen ones.
    ``smoothing > 0`` replaces the keypoint L1 terms by their smooth
    surrogate with that width.
    """
    m, o, w = problem.model, problem.observations, problem.weights
    params = params.copy().check(m)
    res = pose_model(m, params)
    X = res.joints_posed
    comps = {}
    gV = np.zeros((m.n_vertices, 3))
    gX = np.zeros((m.n_joints, 3))
    gRw = np.zeros((m.n_joints, 3, 3))
    gcam = _zero_cam_grads()
    hands = m.hand_joints()

    def add_2d(name, pts3, obs, vis, cam_name, scatter):
        cam = cameras[cam_name]
        pred = project(pts3, cam)
        comps[name] = L.joint_loss_2d(pred, obs, vis, smoothing)
        if need_grad and getattr(w, name):
            g = getattr(w, name) * L.joint_loss_2d_grad(pred, obs, vis, smoothing)
            gp, gs, gt = project_backward(pts3, cam, g)
            scatter(gp)
            gcam[cam_name][0] += gs
            gcam[cam_name][1] += gt

    def scatter_joints(idx):
        def f(gp):
            np.add.at(gX, idx, gp)

        return f

    if o.body_2d is not None:
        add_2d("body_2d", X, o.body_2d, o.body_2d_vis, "body", scatter_joints(np.arange(m.n_joints)))
    if o.body_3d is not None:
        comps["body_3d"] = L.joint_loss_3d(X, o.body_3d, o.body_3d_vis, smoothing)
        if need_grad:
            gX += w.body_3d * L.joint_loss_3d_grad(X, o.body_3d, o.body_3d_vis, smoothing)
    if o.hand_2d is not None:
        add_2d("hand_2d", X[hands], o.hand_2d, o.hand_2d_vis, "hand", scatter_joints(np.asarray(hands)))
    if o.hand_3d is not None:
        comps["hand_3d"] = L.joint_loss_3d(X[hands], o.hand_3d, None, smoothing)
        if need_grad:
            np.add.at(gX, hands, w.hand_3d * L.joint_loss_3d_grad(X[hands], o.hand_3d, None, smoothing))

    if o.landmarks is not None:
        lm = m.landmark_indices

        def scatter_lm(gp):
            np.add.at(gV, lm, gp)

        add_2d("landmarks", res.vertices[lm], o.landmarks, o.landmarks_vis, "face", scatter_lm)
        if m.closure_pairs.size:
            cam = cameras["face"]
            pts = res.vertices[lm]
            pred = project(pts, cam)
            comps["closure"] = L.closure_loss(pred, o.landmarks, m.closure_pairs, smoothing)
            if need_grad and w.closure:
                g = w.closure * L.closure_loss_grad(pred, o.landmarks, m.closure_pairs, smoothing)
                gp, gs, gt = project_backward(pts, cam, g)
                scatter_lm(gp)
                gcam["face"][0] += gs
                gcam["face"][1] += gt

    g_params = Parameters.zeros(m)
    for arr in (g_params.beta, g_params.pose, g_params.jaw, g_params.psi):
        arr[...] = 0.0

    if o.param_targets is not None:
        _param_terms(problem, params, o.param_targets, comps, g_params if need_grad else None)

    ph = o.photometric
    if ph is not None:
        if ph.renderer is not None:
            rendered, vjp = ph.renderer(res.vertices)
            comps["photometric"] = L.photometric_loss(ph.image, rendered, ph.mask)
            if need_grad and w.photometric:
                gV += vjp(w.photometric * L.photometric_loss_grad(ph.image, rendered, ph.mask))
        elif ph.rendered is not None:
            comps["photometric"] = L.photometric_loss(ph.image, ph.rendered, ph.mask)

    idn = o.identity
    if idn is not None:
        if idn.embedder is not None:
            emb, vjp = idn.embedder(res.vertices)
            comps["identity"] = L.identity_loss(idn.target, emb)
            if need_grad and w.identity:
                _, gb = L.identity_loss_grad(idn.target, emb)
                gV += vjp(w.identity * gb)
        elif idn.pair is not None:
            comps["identity"] = L.identity_loss(*idn.pair)

    comps["expression"] = L.expression_prior(params.psi)
    comps["jaw"] = L.jaw_prior(params.jaw)
    comps["shape"] = L.gendered_shape_loss(params.beta, problem.gender, problem.prior)
    head = m.roles.get("head")
    if head is not None:
        Rh = res.world_rotations[head]
        yaw_deg = math.degrees(float(rot.yaw_from_matrix(Rh)))
        comps["face_yaw"] = L.face_yaw_prior(yaw_deg)

    total, breakdown = _total(comps, w)
    if not need_grad:
        return ObjectiveValue(total, breakdown)

    g_params.psi += w.expression * L.expression_prior_grad(params.psi)
    g_params.jaw += w.jaw * L.jaw_prior_grad(params.jaw)
    g_params.beta += w.shape * L.gendered_shape_loss_grad(params.beta, problem.gender, problem.prior)
    if head is not None and w.face_yaw:
        gy = w.face_yaw * L.face_yaw_prior_grad(yaw_deg) * (180.0 / math.pi)
        if gy:
            gRw[head] += rot.yaw_from_matrix_backward(Rh, gy)

    g_model = pose_model_backward(m, params, res, gV, gX, gRw)
    g_params.beta += g_model.beta
    g_params.pose += g_model.pose
    g_params.jaw += g_model.jaw
    g_params.psi += g_model.psi
    cams = {c: (float(v[0]), v[1]) for c, v in gcam.items()}
    return ObjectiveValue(total, breakdown, g_params, cams)


def _total(comps, weights):
    for name, v in comps.items():
        if not math.isfinite(v):
            raise NonFiniteLoss(f"loss term {name} is not finite")
    return L.total_loss(comps, weights)


def _param_terms(problem, params, target, comps, grads):
    """Agreement with regressed parameters, split as body / hand / face terms."""
    m, w = problem.model, problem.weights
    groups = m.joint_groups()
    body = groups["global_orient"] + groups["body_pose"]
    hands = groups["hand_pose"]
    head = groups["head_pose"]
    blocks = {
        "body_params": ([params.pose[body], params.beta], [target.pose[body], target.beta]),
        "hand_params": ([params.pose[hands]], [target.pose[hands]]),
        "face_params": ([params.pose[head], params.jaw, params.psi], [target.pose[head], target.jaw, target.psi]),
    }
    for name, (pred, gt) in blocks.items():
        comps[name] = L.param_loss(pred, gt)
        if grads is None:
            continue
        g = [getattr(w, name) * x for x in L.param_loss_grad(pred, gt)]
        if name == "body_params":
            grads.pose[body] += g[0]
            grads.beta += g[1]
        elif name == "hand_params":
            grads.pose[hands] += g[0]
        else:
            grads.pose[head] += g[0]
            grads.jaw += g[1]
            grads.psi += g[2]


def init_camera(points_2d, reference_points, visibility=None):
    """Camera mapping the reference points' (x, y) onto observed 2D points.

    Scale is the ratio of bounding-box diagonals, translation matches the
    centroids.
    """
    obs = as_float_array(points_2d, "points_2d", shape=(None, 2))
    ref = as_float_array(reference_points, "reference_points")
    if ref.ndim != 2 or ref.shape[0] != obs.shape[0] or ref.shape[1] not in (2, 3):
        raise DimensionMismatch("reference points must pair with the observations")
    vis = as_visibility(visibility, obs.shape[0])
    obs, ref = obs[vis], ref[vis, :2]
    if obs.shape[0] < 2:
        raise TooFewKeypoints("camera initialization needs at least 2 visible keypoints")
    d_obs = np.linalg.norm(obs.max(0) - obs.min(0))
    d_ref = np.linalg.norm(ref.max(0) - ref.min(0))
    if d_obs <= 0 or d_ref <= 0:
        raise TooFewKeypoints("visible keypoints are coincident")
    s = d_obs / d_ref
    t = obs.mean(0) - s * ref.mean(0)
    return WeakPerspectiveCamera(s, t)


def initial_cameras(problem, params=None):
    m, o = problem.model, problem.observations
    params = Parameters.zeros(m) if params is None else params
    res = pose_model(m, params)
    cams = {}
    if o.body_2d is not None:
        cams["body"] = init_camera(o.body_2d, res.joints_posed, o.body_2d_vis)
    if o.landmarks is not None:
        cams["face"] = init_camera(o.landmarks, res.vertices[m.landmark_indices], o.landmarks_vis)
    if o.hand_2d is not None:
        cams["hand"] = init_camera(o.hand_2d, res.joints_posed[m.hand_joints()], o.hand_2d_vis)
    fallback = cams.get("body") or cams.get("face") or cams.get("hand") or WeakPerspectiveCamera(1.0, (0.0, 0.0))
    for c in CAMERAS:
        cams.setdefault(c, fallback)
    return cams


class _Packer:
    """Flat vector view of the free parameter groups.

    A camera is stored as ``(log s, t / s)`` so that its translation moves in
    model units, at the same pace as the pose and shape coordinates.
    """

    def __init__(self, model, free):
        self.model = model
        self.free = set(free)
        groups = model.joint_groups()
        rows = []
        for g in POSE_GROUPS:
            if g in self.free:
                rows += groups[g]
        jaw = model.jaw_joint
        self.rows = sorted(j for j in set(rows) if j != jaw)

    def size(self, params, cams):
        return self.pack(params, cams).size

    def pack(self, params, cams):
        parts = []
        for c in CAMERAS:
            if f"camera_{c}" in self.free:
                s = cams[c].s
                parts.append([math.log(s), cams[c].t[0] / s, cams[c].t[1] / s])
        parts.append(params.pose[self.rows].ravel())
        if "jaw" in self.free:
            parts.append(params.jaw)
        if "expression" in self.free:
            parts.append(params.psi)
        if "shape" in self.free:
            parts.append(params.beta)
        return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])

    def unpack(self, x, params, cams):
        params = params.copy()
        cams = dict(cams)
        i = 0
        for c in CAMERAS:
            if f"camera_{c}" in self.free:
                s = math.exp(x[i])
                cams[c] = WeakPerspectiveCamera(s, s * x[i + 1 : i + 3])
                i += 3
        n = 6 * len(self.rows)
        params.pose[self.rows] = x[i : i + n].reshape(-1, 6)
        i += n
        for flag, name in (("jaw", "jaw"), ("expression", "psi"), ("shape", "beta")):
            if flag in self.free:
                k = getattr(params, name).shape[0]
                setattr(params, name, x[i : i + k].copy())
                i += k
        return params, cams

    def grad(self, value, cams):
        gp, gc = value.grad_params, value.grad_cameras
        parts = []
        for c in CAMERAS:
            if f"camera_{c}" in self.free:
                gs, gt = gc[c]
                s, t = cams[c].s, np.asarray(cams[c].t)
                parts.append([s * gs + gt @ t, *(s * gt)])
        parts.append(gp.pose[self.rows].ravel())
        if "jaw" in self.free:
            parts.append(gp.jaw)
        if "expression" in self.free:
            parts.append(gp.psi)
        if "shape" in self.free:
            parts.append(gp.beta)
        return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])


def _evaluate(problem, packer, x, base_params, base_cams, need_grad, smoothing=0.0):
    try:
        params, cams = packer.unpack(x, base_params, base_cams)
        value = objective(problem, params, cams, need_grad, smoothing)
    except (NonFiniteLoss, ValidationError, FloatingPointError, OverflowError):
        return None, None, None
    return value, params, cams


def _adam_pass(problem, packer, params, cams, stage, smoothing, config, tag, trace):
    """Adam steps with backtracking; returns (params, cams, converged)."""
    x = packer.pack(params, cams)
    value = objective(problem, params, cams, smoothing=smoothing)
    adam = Adam(x.size, lr=stage.lr)
    history = [value.total]
    stalled = 0
    for it in range(stage.iterations):
        g = packer.grad(value, cams)
        if not np.all(np.isfinite(g)):
            raise Diverged(f"non-finite gradient in stage {tag['stage']}")
        if np.linalg.norm(g) <= config.gtol:
            return params, cams, True
        frac = it / max(stage.iterations - 1, 1)
        lr = stage.lr * (config.lr_floor + (1 - config.lr_floor) * 0.5 * (1 + math.cos(math.pi * frac)))
        step = adam.direction(g, lr)
        accepted = None
        for _ in range(config.line_search_steps):
            cand, p_new, c_new = _evaluate(problem, packer, x + step, params, cams, True, smoothing)
            if cand is not None and cand.total <= value.total:
                accepted = cand
                break
            step = 0.5 * step
        if accepted is None:
            stalled += 1
            if stalled >= STALL_LIMIT:
                return params, cams, True
            continue
        stalled = 0
        x = x + step
        params, cams, value = p_new, c_new, accepted
        history.append(value.total)
        trace.append({**tag, "iteration": it, "total": value.total, **value.breakdown})
        if len(history) > FTOL_WINDOW:
            if history[-FTOL_WINDOW - 1] - value.total <= config.ftol * max(1.0, abs(value.total)):
                return params, cams, True
    return params, cams, False


def _lbfgs_pass(problem, packer, params, cams, stage, smoothing, config, tag, trace):
    """Limited-memory BFGS; its Wolfe line search only accepts decreasing steps."""
    x0 = packer.pack(params, cams)
    cache = {}

    def fun(x):
        value, p, c = _evaluate(problem, packer, x, params, cams, True, smoothing)
        if value is None:
            # outside the valid domain: reject the trial point
            return np.inf, np.zeros_like(x)
        cache[x.tobytes()] = (value, p, c)
        g = packer.grad(value, c)
        if not np.all(np.isfinite(g)):
            raise Diverged(f"non-finite gradient in stage {tag['stage']}")
        return value.total, g

    start = objective(problem, params, cams, need_grad=False, smoothing=smoothing).total
    best = [start, params, cams]
    it = [0]

    def callback(xk):
        hit = cache.get(xk.tobytes())
        if hit is None:
            return
        value, p, c = hit
        if value.total <= best[0]:
            best[:] = [value.total, p, c]
            trace.append({**tag, "iteration": it[0], "total": value.total, **value.breakdown})
        it[0] += 1
        cache.clear()
        cache[xk.tobytes()] = hit

    out = minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        callback=callback,
        options={"maxiter": stage.iterations, "maxcor": LBFGS_MEMORY, "gtol": config.gtol, "ftol": config.ftol},
    )
    return best[1], best[2], bool(out.success)


def fit(problem, config=None, params=None, cameras=None):
    """Staged fit.

    Each stage frees a subset of parameter groups. Adam stages take steps
    under a cosine learning-rate decay, halving a step until the stage
    objective does not increase; L-BFGS stages rely on its Wolfe line search.
    A stage runs one pass per smoothing width, from wide to narrow, and every
    pass is monotone in its own objective.
    """
    config = FitConfig() if config is None else config
    if not isinstance(config, FitConfig):
        raise ConfigInvalid("config must be a FitConfig")
    m = problem.model
    params = Parameters.zeros(m) if params is None else params.copy().check(m)
    cams = initial_cameras(problem, params) if cameras is None else dict(cameras)
    start = objective(problem, params, cams, need_grad=False)
    if not math.isfinite(start.total):
        raise Diverged("initial objective is not finite")

    trace = []
    converged = False
    runners = {"adam": _adam_pass, "lbfgs": _lbfgs_pass}
    for si, stage in enumerate(config.stages):
        packer = _Packer(m, stage.free)
        if packer.size(params, cams) == 0 or stage.iterations == 0:
            continue
        for pi, width in enumerate(stage.smoothing):
            tag = {"stage": si, "pass": pi, "smoothing": width}
            params, cams, converged = runners[stage.optimizer](
                problem, packer, params, cams, stage, width, config, tag, trace
            )
    return FitResult(params=params, cameras=cams, trace=trace, converged=converged)
