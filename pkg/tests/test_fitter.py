import numpy as np
import pytest

from bodyfit import fitter as F
from bodyfit import losses as L
from bodyfit.body_model import Parameters, pose_model
from bodyfit.camera import WeakPerspectiveCamera
from bodyfit.exceptions import (
    ConfigInvalid,
    DimensionMismatch,
    TooFewKeypoints,
    UnknownLabelClassMissing,
    ValidationError,
)
from bodyfit.synthetic import sample_parameters

from conftest import synthetic_observations, true_cameras

DATA_TERMS = ("body_2d", "body_3d", "hand_2d", "landmarks", "closure")


def short_config(iters=30, optimizer="lbfgs"):
    return F.FitConfig(
        stages=[
            F.Stage(F.FREE_GROUPS, iters, smoothing=(1.0,), optimizer=optimizer),
            F.Stage(F.FREE_GROUPS, iters, smoothing=(0.1, 0.01), optimizer=optimizer),
        ]
    )


@pytest.fixture(scope="module")
def truth(small_model):
    p = sample_parameters(small_model, np.random.default_rng(0))
    return p, synthetic_observations(small_model, p)


def test_data_terms_vanish_at_truth(small_model, truth):
    p, obs = truth
    v = F.objective(F.FitProblem(small_model, obs), p, true_cameras(), need_grad=False)
    for k in DATA_TERMS:
        assert v.breakdown[k] == pytest.approx(0, abs=1e-9)
    assert v.total == pytest.approx(sum(v.breakdown.values()))


def test_doubling_a_weight_doubles_its_entry(small_model, truth):
    p, obs = truth
    q = sample_parameters(small_model, np.random.default_rng(5))
    base = F.objective(F.FitProblem(small_model, obs), q, true_cameras(), need_grad=False).breakdown
    for name in ("body_2d", "landmarks", "shape"):
        w = L.LossWeights(**{name: 2 * getattr(L.LossWeights(), name)})
        b = F.objective(F.FitProblem(small_model, obs, weights=w), q, true_cameras(), need_grad=False).breakdown
        assert b[name] == pytest.approx(2 * base[name], rel=1e-12)


def test_objective_gradient_matches_finite_differences(small_model, truth):
    _, obs = truth
    q = sample_parameters(small_model, np.random.default_rng(9))
    problem = F.FitProblem(small_model, obs)
    cams = true_cameras()
    v = F.objective(problem, q, cams, smoothing=0.5)

    def f(beta):
        r = q.copy()
        r.beta = beta
        return F.objective(problem, r, cams, need_grad=False, smoothing=0.5).total

    h = 1e-6
    num = np.array([(f(q.beta + h * e) - f(q.beta - h * e)) / (2 * h) for e in np.eye(q.beta.size)])
    assert np.linalg.norm(v.grad_params.beta - num) / np.linalg.norm(num) < 1e-6


def test_init_camera_recovers_similarity():
    ref = np.array([[0.0, 0.0, 3.0], [1.0, 0.0, -1.0], [0.0, 2.0, 0.5], [1.0, 1.0, 0.0]])
    obs = 2 * ref[:, :2] + 5
    cam = F.init_camera(obs, ref)
    assert cam.s == pytest.approx(2.0, rel=1e-12)
    assert np.allclose(cam.t, (5.0, 5.0), atol=1e-12)


def test_init_camera_errors():
    ref = np.zeros((3, 3))
    with pytest.raises(TooFewKeypoints):
        F.init_camera(np.ones((3, 2)), np.arange(9.0).reshape(3, 3), [1, 0, 0])
    with pytest.raises(TooFewKeypoints):
        F.init_camera(np.ones((3, 2)), ref)
    with pytest.raises(DimensionMismatch):
        F.init_camera(np.ones((3, 2)), np.ones((4, 3)))


def test_zero_iterations_returns_initialization(small_model, truth):
    _, obs = truth
    problem = F.FitProblem(small_model, obs)
    r = F.fit(problem, F.FitConfig(stages=[F.Stage(F.FREE_GROUPS, 0)]))
    assert r.trace == []
    zero = Parameters.zeros(small_model)
    assert np.array_equal(r.params.to_vector(), zero.to_vector())
    assert r.cameras == F.initial_cameras(problem)


@pytest.mark.parametrize("optimizer", ["lbfgs", "adam"])
def test_trace_is_monotone_per_pass(small_model, truth, optimizer):
    _, obs = truth
    r = F.fit(F.FitProblem(small_model, obs), short_config(40, optimizer))
    assert r.trace
    passes = {}
    for row in r.trace:
        passes.setdefault((row["stage"], row["pass"]), []).append(row["total"])
    for totals in passes.values():
        assert np.all(np.diff(totals) <= 1e-9)
    first = F.objective(F.FitProblem(small_model, obs), Parameters.zeros(small_model),
                        F.initial_cameras(F.FitProblem(small_model, obs)), need_grad=False).total
    assert r.trace[-1]["total"] < first


def test_fit_is_deterministic(small_model, truth):
    _, obs = truth
    a = F.fit(F.FitProblem(small_model, obs), short_config(20))
    b = F.fit(F.FitProblem(small_model, obs), short_config(20))
    assert np.array_equal(a.params.to_vector(), b.params.to_vector())
    assert a.cameras == b.cameras
    assert [r["total"] for r in a.trace] == [r["total"] for r in b.trace]


def test_frozen_groups_stay_put(small_model, truth):
    _, obs = truth
    init = sample_parameters(small_model, np.random.default_rng(3))
    cfg = F.FitConfig(stages=[F.Stage(("camera_body", "body_pose"), 20, optimizer="lbfgs")])
    r = F.fit(F.FitProblem(small_model, obs), cfg, params=init)
    assert np.array_equal(r.params.beta, init.beta)
    assert np.array_equal(r.params.psi, init.psi)
    assert r.cameras["face"] == F.initial_cameras(F.FitProblem(small_model, obs), init)["face"]


def test_gender_label_changes_the_fit(small_model, truth):
    _, obs = truth
    n = small_model.n_betas
    eye = np.eye(n)
    prior = L.GenderPrior(
        {
            "female": L.GaussianClass(np.full(n, 2.0), 0.01 * eye, 100 * eye),
            "male": L.GaussianClass(np.full(n, -2.0), 0.01 * eye, 100 * eye),
        }
    )
    obs = F.Observations(body_2d=obs.body_2d)
    fits = {g: F.fit(F.FitProblem(small_model, obs, gender=g, prior=prior), short_config(20)) for g in ("female", "male")}
    assert fits["female"].params.beta.mean() > 1.0
    assert fits["male"].params.beta.mean() < -1.0


def test_landmarks_only_fit_moves_shape(small_model):
    p = sample_parameters(small_model, np.random.default_rng(4), pose_scale=0.1)
    obs = synthetic_observations(small_model, p, parts=("landmarks",))
    r = F.fit(F.FitProblem(small_model, obs), short_config(30))
    assert np.linalg.norm(r.params.beta) > 0.1


def test_problem_validation(small_model, truth):
    _, obs = truth
    with pytest.raises(ValidationError):
        F.FitProblem(small_model, F.Observations())
    with pytest.raises(DimensionMismatch):
        F.FitProblem(small_model, F.Observations(body_2d=np.zeros((3, 2))))
    with pytest.raises(DimensionMismatch):
        F.FitProblem(small_model, obs, prior=L.GenderPrior.isotropic(small_model.n_betas + 1))
    with pytest.raises(UnknownLabelClassMissing):
        F.FitProblem(small_model, obs, gender="male", prior=L.GenderPrior({"female": L.GaussianClass(
            np.zeros(small_model.n_betas), np.eye(small_model.n_betas), np.eye(small_model.n_betas))}))


@pytest.mark.parametrize(
    "kw",
    [
        dict(free=("nope",)),
        dict(free=F.FREE_GROUPS, iterations=-1),
        dict(free=F.FREE_GROUPS, lr=0.0),
        dict(free=F.FREE_GROUPS, optimizer="sgd"),
        dict(free=F.FREE_GROUPS, smoothing=()),
        dict(free=F.FREE_GROUPS, smoothing=(-1.0,)),
    ],
)
def test_bad_stage(kw):
    with pytest.raises(ConfigInvalid):
        F.Stage(**kw)


def test_bad_config():
    with pytest.raises(ConfigInvalid):
        F.FitConfig(stages=[])
    with pytest.raises(ConfigInvalid):
        F.FitConfig(gtol=-1)
    with pytest.raises(ConfigInvalid):
        F.FitConfig.from_dict({"bogus": 1})


def test_config_dict_round_trip():
    cfg = short_config(7, "adam")
    again = F.FitConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert F.FitConfig().stages[0].free == F.FREE_GROUPS


def test_explicit_cameras_are_used(small_model, truth):
    p, obs = truth
    cams = true_cameras()
    r = F.fit(F.FitProblem(small_model, obs), F.FitConfig(stages=[F.Stage(("shape",), 0)]), params=p, cameras=cams)
    assert r.cameras == cams
    assert isinstance(r.cameras["body"], WeakPerspectiveCamera)
    assert np.array_equal(pose_model(small_model, r.params).vertices, pose_model(small_model, p).vertices)
