import numpy as np
import pytest

from bodyfit.synthetic import synth_model


@pytest.fixture(scope="session")
def model():
    return synth_model(seed=0, n_vertices=300, n_joints=17)


@pytest.fixture(scope="session")
def small_model():
    return synth_model(seed=1, n_vertices=120, n_joints=11, n_betas=4, n_psi=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def true_cameras():
    from bodyfit.camera import WeakPerspectiveCamera

    return {
        "body": WeakPerspectiveCamera(60.0, (112.0, 112.0)),
        "face": WeakPerspectiveCamera(300.0, (112.0, -300.0)),
        "hand": WeakPerspectiveCamera(100.0, (112.0, 50.0)),
    }


def synthetic_observations(model, params, rng=None, noise=0.0, parts=("body_2d", "body_3d", "hand_2d", "landmarks")):
    """Keypoints of ``params`` seen through :func:`true_cameras`, with Gaussian
    noise of ``noise`` times the crop size (3D noise converted at the body scale)."""
    from bodyfit.body_model import pose_model
    from bodyfit.camera import CROP_SIZE, project
    from bodyfit.fitter import Observations

    cams = true_cameras()
    res = pose_model(model, params)
    X = res.joints_posed
    sd = noise * CROP_SIZE

    def nz(a, scale=sd):
        return a if scale == 0 else a + scale * rng.standard_normal(a.shape)

    full = {
        "body_2d": lambda: nz(project(X, cams["body"])),
        "body_3d": lambda: nz(X, sd / cams["body"].s),
        "hand_2d": lambda: nz(project(X[model.hand_joints()], cams["hand"])),
        "landmarks": lambda: nz(project(res.vertices[model.landmark_indices], cams["face"])),
    }
    return Observations(**{k: full[k]() for k in parts})


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
