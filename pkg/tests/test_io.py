import json

import numpy as np
import pytest

from bodyfit import fitter as F
from bodyfit import io as bio
from bodyfit import losses as L
from bodyfit import moderator as mod
from bodyfit.camera import WeakPerspectiveCamera
from bodyfit.exceptions import ConfigInvalid, IoError, ParseError, ValidationError
from bodyfit.synthetic import sample_parameters

from conftest import synthetic_observations

TETRA_V = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
TETRA_F = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])


def same_arrays(a, b):
    return a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)


def test_obj_tetrahedron_round_trip(tmp_path):
    path = tmp_path / "t.obj"
    bio.write_obj(path, TETRA_V, TETRA_F)
    text = path.read_text()
    assert text.splitlines()[0] == "v 0 0 0"
    assert text.splitlines()[4] == "f 1 3 2"
    V, Fc = bio.read_obj(path)
    assert np.array_equal(V, TETRA_V) and np.array_equal(Fc, TETRA_F)


def test_obj_writer_precision(tmp_path):
    path = tmp_path / "p.obj"
    V = np.array([[1 / 3, -2e-7, 123456.789]])
    bio.write_obj(path, V, np.zeros((0, 3), int))
    assert path.read_text() == "v 0.333333333 -2e-07 123456.789\n"


def test_obj_reader_variants(tmp_path):
    path = tmp_path / "q.obj"
    path.write_text(
        "# comment\nv 0 0 0\nv 1 0 0  # trailing\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nvt 0 0\n\n"
        "f 1/1/1 2/2/1 3/3/1 4/4/1\nf -4//1 -3//1 -1//1\n"
    )
    V, Fc = bio.read_obj(path)
    assert V.shape == (4, 3)
    assert Fc.tolist() == [[0, 1, 2], [0, 2, 3], [0, 1, 3]]


@pytest.mark.parametrize(
    "text,line",
    [("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n", 4), ("v 0 0\n", 1), ("v 0 0 0\nf 1 2 3\n", 2), ("v a b c\n", 1)],
)
def test_obj_parse_errors(tmp_path, text, line):
    path = tmp_path / "bad.obj"
    path.write_text(text)
    with pytest.raises(ParseError) as info:
        bio.read_obj(path)
    assert info.value.line == line


def test_obj_missing_file(tmp_path):
    with pytest.raises(IoError):
        bio.read_obj(tmp_path / "none.obj")


def test_obj_writer_rejects_bad_faces(tmp_path):
    with pytest.raises(ValidationError):
        bio.write_obj(tmp_path / "x.obj", TETRA_V, [[0, 1, 4]])
    with pytest.raises(ValidationError):
        bio.write_obj(tmp_path / "x.obj", TETRA_V, [[0, 1, 1]])


def test_array_encoding_is_exact(rng):
    for a in (rng.standard_normal((3, 4)), np.arange(6).reshape(2, 3), np.array([True, False]), np.zeros((0, 3))):
        b = bio.decode_array(json.loads(json.dumps(bio.encode_array(a))))
        assert np.array_equal(a, b) and a.shape == b.shape
    with pytest.raises(ValidationError):
        bio.decode_array({"data": [1, 2, 3], "dtype": "float64", "shape": [2, 2]})


def test_model_round_trip(tmp_path, model):
    path = tmp_path / "m.json"
    bio.save_model(path, model)
    m2 = bio.load_model(path)
    for name in bio._MODEL_ARRAYS:
        assert same_arrays(getattr(model, name), getattr(m2, name)), name
    assert m2.joint_names == model.joint_names and m2.roles == model.roles
    assert all(np.array_equal(model.part_masks[k], m2.part_masks[k]) for k in model.part_masks)
    assert np.array_equal(model.eval_regressor, m2.eval_regressor)
    bio.save_model(tmp_path / "m2.json", m2)
    assert (tmp_path / "m2.json").read_bytes() == path.read_bytes()


def test_params_round_trip(tmp_path, model, rng):
    p = sample_parameters(model, rng)
    bio.save_params(tmp_path / "p.json", p)
    q = bio.load_params(tmp_path / "p.json")
    assert np.array_equal(p.to_vector(), q.to_vector())


def test_prior_round_trip(tmp_path, rng):
    prior = L.GenderPrior({"female": L.fit_gender_prior(rng.standard_normal((20, 4))),
                           "male": L.fit_gender_prior(rng.standard_normal((20, 4)))})
    bio.save_prior(tmp_path / "g.json", prior)
    back = bio.load_prior(tmp_path / "g.json")
    for k, c in prior.classes.items():
        d = back.classes[k]
        assert same_arrays(c.mu, d.mu) and same_arrays(c.cov, d.cov) and same_arrays(c.precision, d.precision)


def test_moderator_round_trip(tmp_path, rng):
    s = mod.init_moderator(6, None, rng)
    s.temperature = 1.0 / 3.0
    bio.save_moderator(tmp_path / "s.json", s)
    t = bio.load_moderator(tmp_path / "s.json")
    assert np.array_equal(s.to_vector(), t.to_vector())


def test_fit_result_round_trip(tmp_path, small_model):
    p = sample_parameters(small_model, np.random.default_rng(2))
    obs = synthetic_observations(small_model, p, parts=("body_2d",))
    cfg = F.FitConfig(stages=[F.Stage(F.FREE_GROUPS, 5, optimizer="lbfgs")])
    res = F.fit(F.FitProblem(small_model, obs), cfg)
    bio.save_fit_result(tmp_path / "r.json", res)
    back = bio.load_fit_result(tmp_path / "r.json")
    assert np.array_equal(back.params.to_vector(), res.params.to_vector())
    assert back.cameras == res.cameras and back.trace == res.trace and back.converged == res.converged


def test_fit_config_round_trip(tmp_path):
    cfg = F.FitConfig(stages=[F.Stage(("shape", "camera_body"), 17, lr=0.3, smoothing=(0.5, 0.1))], seed=4)
    w = L.LossWeights(jaw=3.5)
    bio.save_fit_config(tmp_path / "c.json", cfg, w, "female")
    cfg2, w2, g = bio.load_fit_config(tmp_path / "c.json")
    assert cfg2.to_dict() == cfg.to_dict() and w2 == w and g == "female"


def test_fit_config_errors(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"schema": "bodyfit-fit-config/1", "stages": [{"free": ["bogus"]}]}))
    with pytest.raises(ConfigInvalid):
        bio.load_fit_config(path)
    path.write_text(json.dumps({"schema": "bodyfit-fit-config/1", "what": 1}))
    with pytest.raises(ConfigInvalid):
        bio.load_fit_config(path)
    path.write_text(json.dumps({"schema": "bodyfit-model/1"}))
    with pytest.raises(ValidationError):
        bio.load_fit_config(path)
    path.write_text("{not json")
    with pytest.raises(ParseError):
        bio.load_fit_config(path)


def test_toy_config_round_trip(tmp_path):
    cfg = mod.ToyConfig(seed=3, steps=10, lr=0.1 + 0.2)
    bio.save_toy_config(tmp_path / "t.json", cfg)
    assert bio.load_toy_config(tmp_path / "t.json") == cfg


def test_keypoints_round_trip(tmp_path, small_model, rng):
    p = sample_parameters(small_model, rng)
    obs = synthetic_observations(small_model, p, rng, noise=0.01)
    obs.body_2d_vis = rng.random(small_model.n_joints) > 0.3
    bio.save_keypoints(tmp_path / "k.json", obs, "male", small_model.n_joints)
    back, g = bio.load_keypoints(tmp_path / "k.json", small_model)
    assert g == "male"
    for name in bio._OBS_FIELDS:
        a, b = getattr(obs, name), getattr(back, name)
        assert (a is None and b is None) or np.array_equal(a, b), name


@pytest.mark.parametrize(
    "doc",
    [
        {"body_2d": [[0, "x"]]},
        {"landmarks": [[0, 0]] * 67},
        {"gender": "other"},
        {"extra": 1},
        {"n_joints": 0},
    ],
)
def test_keypoint_schema_violations(tmp_path, doc):
    path = tmp_path / "k.json"
    path.write_text(json.dumps({"schema": "bodyfit-keypoints/1", **doc}))
    with pytest.raises(ValidationError):
        bio.load_keypoints(path)


def test_keypoint_joint_count_mismatch(tmp_path, small_model):
    path = tmp_path / "k.json"
    path.write_text(json.dumps({"schema": "bodyfit-keypoints/1", "n_joints": 99, "body_2d": [[0, 0]]}))
    with pytest.raises(ValidationError):
        bio.load_keypoints(path, small_model)


@pytest.mark.parametrize("suffix", [".npy", ".json"])
def test_array_files(tmp_path, rng, suffix):
    img = rng.random((4, 5, 3))
    path = tmp_path / f"img{suffix}"
    bio.save_array(path, img)
    assert same_arrays(bio.load_array(path), img)


def test_array_file_errors(tmp_path):
    with pytest.raises(IoError):
        bio.load_array(tmp_path / "missing.npy")
    (tmp_path / "bad.npy").write_bytes(b"nope")
    with pytest.raises(IoError):
        bio.load_array(tmp_path / "bad.npy")


def test_eval_outputs(tmp_path, model):
    from bodyfit.metrics import evaluate

    rep = evaluate(model.template + 0.01, model.template, model.faces, masks=model.part_masks)
    bio.save_eval_csv(tmp_path / "e.csv", [rep, rep])
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0].split(",") == list(rep.row())
    assert len(lines) == 3 and lines[1] == lines[2]
    bio.save_eval_json(tmp_path / "e.json", [rep])
    doc = bio.load_json(tmp_path / "e.json", "eval")
    assert doc["reports"][0]["pa_v2v"] == rep.pa_v2v
    assert set(doc["reports"][0]["f_score"]) == {"0.005", "0.01"}


def test_camera_dict_round_trip():
    cam = WeakPerspectiveCamera(1 / 7, (0.1, -2.5))
    assert WeakPerspectiveCamera.from_dict(json.loads(json.dumps(cam.to_dict()))) == cam
