"""OBJ meshes and versioned JSON artifacts.

Every JSON document carries a ``schema`` field such as ``"bodyfit-model/1"``.
Arrays are stored as ``{"dtype", "shape", "data"}`` with flat lists; Python
writes floats with their shortest round-tripping repr, so reading a written
artifact gives back bit-identical arrays.
"""

import json
import os

import jsonschema
import numpy as np

from .body_model import BodyModel, Parameters
from .camera import WeakPerspectiveCamera
from .exceptions import ConfigInvalid, IoError, ParseError, ValidationError
from .fitter import FitConfig, FitResult, Observations, Stage
from .losses import GaussianClass, GenderPrior, LossWeights
from .moderator import ModeratorState, ToyConfig

PREFIX = "bodyfit-"
VERSION = 1


# ---------------------------------------------------------------- OBJ


def write_obj(path, vertices, faces):
    """Write ``v`` and 1-based ``f`` records with 9 significant digits."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise ValidationError("vertices must be V x 3")
    if faces.size and (faces.min() < 0 or faces.max() >= vertices.shape[0]):
        raise ValidationError("face index out of range")
    if faces.size and np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])):
        raise ValidationError("faces must not repeat a vertex index")
    lines = ["v %.9g %.9g %.9g" % tuple(v) for v in vertices]
    lines += ["f %d %d %d" % tuple(f + 1) for f in faces]
    write_text(path, "\n".join(lines) + "\n")


def read_obj(path):
    """Parse ``v`` and ``f`` records; other records are ignored.

    Face corners may be ``i``, ``i/t``, ``i//n`` or ``i/t/n``; polygons are
    fan-triangulated and negative indices count from the end.
    """
    text = _read_text(path)
    verts, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "v":
            if len(tok) < 4:
                raise ParseError("vertex needs 3 coordinates", lineno)
            try:
                verts.append([float(x) for x in tok[1:4]])
            except ValueError:
                raise ParseError(f"bad vertex coordinate in {raw!r}", lineno) from None
        elif tok[0] == "f":
            if len(tok) < 4:
                raise ParseError("face needs at least 3 corners", lineno)
            idx = []
            for corner in tok[1:]:
                try:
                    i = int(corner.split("/")[0])
                except ValueError:
                    raise ParseError(f"bad face index {corner!r}", lineno) from None
                if i == 0:
                    raise ParseError("face indices are 1-based; 0 is invalid", lineno)
                i = i - 1 if i > 0 else len(verts) + i
                if not 0 <= i < len(verts):
                    raise ParseError(f"face index {corner} refers to a missing vertex", lineno)
                idx.append(i)
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _read_text(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def write_text(path, text):
    try:
        d = os.path.dirname(os.fspath(path))
        if d:
            os.makedirs(d, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------- JSON


def encode_array(a):
    a = np.asarray(a)
    kind = "int64" if np.issubdtype(a.dtype, np.integer) else "bool" if a.dtype == bool else "float64"
    flat = a.astype(kind).ravel().tolist()
    return {"dtype": kind, "shape": list(a.shape), "data": flat}


def decode_array(d):
    try:
        return np.array(d["data"], dtype=d["dtype"]).reshape(d["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed array record: {exc}") from exc


def _schema(kind):
    return f"{PREFIX}{kind}/{VERSION}"


def dump_json(path, kind, payload):
    doc = {"schema": _schema(kind), **payload}
    write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_json(path, kind=None):
    try:
        doc = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", exc.lineno) from exc
    if not isinstance(doc, dict) or "schema" not in doc:
        raise ValidationError(f"{path}: missing schema field")
    if kind is not None and doc["schema"] != _schema(kind):
        raise ValidationError(f"{path}: expected schema {_schema(kind)}, found {doc['schema']}")
    return doc


def _arrays(d, names):
    return {n: decode_array(d[n]) for n in names}


# model

_MODEL_ARRAYS = (
    "template",
    "faces",
    "shape_basis",
    "expr_basis",
    "joint_regressor",
    "skin_weights",
    "parents",
    "landmark_indices",
    "closure_pairs",
)


def model_to_dict(model):
    out = {n: encode_array(getattr(model, n)) for n in _MODEL_ARRAYS}
    out["joint_names"] = list(model.joint_names)
    out["roles"] = {k: int(v) for k, v in model.roles.items()}
    out["part_masks"] = {k: encode_array(v) for k, v in model.part_masks.items()}
    out["eval_regressor"] = None if model.eval_regressor is None else encode_array(model.eval_regressor)
    return out


def model_from_dict(d):
    try:
        arrays = _arrays(d, _MODEL_ARRAYS)
        ev = d.get("eval_regressor")
        return BodyModel(
            joint_names=tuple(d["joint_names"]),
            roles=dict(d["roles"]),
            part_masks={k: decode_array(v) for k, v in d["part_masks"].items()},
            eval_regressor=None if ev is None else decode_array(ev),
            **arrays,
        )
    except KeyError as exc:
        raise ValidationError(f"model record is missing {exc}") from exc


def save_model(path, model):
    dump_json(path, "model", model_to_dict(model))


def load_model(path):
    return model_from_dict(load_json(path, "model"))


# parameters


def params_to_dict(p):
    return {"beta": encode_array(p.beta), "pose": encode_array(p.pose), "jaw": encode_array(p.jaw), "psi": encode_array(p.psi)}


def params_from_dict(d):
    try:
        return Parameters(**_arrays(d, ("beta", "pose", "jaw", "psi")))
    except KeyError as exc:
        raise ValidationError(f"parameter record is missing {exc}") from exc


def save_params(path, params):
    dump_json(path, "params", params_to_dict(params))


def load_params(path):
    return params_from_dict(load_json(path, "params"))


# shape prior


def prior_to_dict(prior):
    return {
        "classes": {
            k: {"mu": encode_array(c.mu), "cov": encode_array(c.cov), "precision": encode_array(c.precision)}
            for k, c in sorted(prior.classes.items())
        }
    }


def prior_from_dict(d):
    try:
        return GenderPrior({k: GaussianClass(**_arrays(c, ("mu", "cov", "precision"))) for k, c in d["classes"].items()})
    except KeyError as exc:
        raise ValidationError(f"prior record is missing {exc}") from exc


def save_prior(path, prior):
    dump_json(path, "prior", prior_to_dict(prior))


def load_prior(path):
    return prior_from_dict(load_json(path, "prior"))


# moderator


def moderator_to_dict(state):
    return {
        "W_ext": encode_array(state.W_ext),
        "b_ext": encode_array(state.b_ext),
        "W1": encode_array(state.W1),
        "b1": encode_array(state.b1),
        "w2": encode_array(state.w2),
        "b2": state.b2,
        "temperature": state.temperature,
    }


def moderator_from_dict(d):
    try:
        arrays = _arrays(d, ("W_ext", "b_ext", "W1", "b1", "w2"))
        return ModeratorState(b2=float(d["b2"]), temperature=float(d["temperature"]), **arrays)
    except KeyError as exc:
        raise ValidationError(f"moderator record is missing {exc}") from exc


def save_moderator(path, state):
    dump_json(path, "moderator", moderator_to_dict(state))


def load_moderator(path):
    return moderator_from_dict(load_json(path, "moderator"))


# fit result


def fit_result_to_dict(result):
    return {
        "params": params_to_dict(result.params),
        "cameras": {k: v.to_dict() for k, v in sorted(result.cameras.items())},
        "trace": result.trace,
        "converged": bool(result.converged),
    }


def fit_result_from_dict(d):
    try:
        return FitResult(
            params=params_from_dict(d["params"]),
            cameras={k: WeakPerspectiveCamera.from_dict(v) for k, v in d["cameras"].items()},
            trace=list(d["trace"]),
            converged=bool(d["converged"]),
        )
    except KeyError as exc:
        raise ValidationError(f"fit result is missing {exc}") from exc


def save_fit_result(path, result):
    dump_json(path, "fit-result", fit_result_to_dict(result))


def load_fit_result(path):
    return fit_result_from_dict(load_json(path, "fit-result"))


# fit configuration (stages plus loss weights)


def fit_config_to_dict(config, weights=None, gender=None):
    out = config.to_dict()
    out["weights"] = (weights or LossWeights()).to_dict()
    out["gender"] = gender
    return out


def load_fit_config(path):
    """Returns ``(FitConfig, LossWeights, gender)``."""
    d = dict(load_json(path, "fit-config"))
    d.pop("schema")
    weights = LossWeights.from_dict(d.pop("weights", {}))
    gender = d.pop("gender", None)
    d["stages"] = [Stage(**s) for s in d.get("stages", [])] or FitConfig().stages
    try:
        return FitConfig(**d), weights, gender
    except TypeError as exc:
        raise ConfigInvalid(str(exc)) from exc


def save_fit_config(path, config, weights=None, gender=None):
    dump_json(path, "fit-config", fit_config_to_dict(config, weights, gender))


# moderator toy configuration


def load_toy_config(path):
    d = dict(load_json(path, "toy-config"))
    d.pop("schema")
    try:
        return ToyConfig(**d)
    except TypeError as exc:
        raise ConfigInvalid(str(exc)) from exc


def save_toy_config(path, config):
    from dataclasses import asdict

    dump_json(path, "toy-config", asdict(config))


# keypoints

_POINTS = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}
_VIS = {"type": "array", "items": {"type": ["boolean", "integer"]}}

KEYPOINT_SCHEMA = {
    "type": "object",
    "required": ["schema"],
    "properties": {
        "schema": {"const": _schema("keypoints")},
        "n_joints": {"type": "integer", "minimum": 1},
        "body_2d": _POINTS,
        "body_2d_vis": _VIS,
        "body_3d": _POINTS,
        "body_3d_vis": _VIS,
        "hand_2d": _POINTS,
        "hand_2d_vis": _VIS,
        "hand_3d": _POINTS,
        "landmarks": {**_POINTS, "minItems": 68, "maxItems": 68},
        "landmarks_vis": {**_VIS, "minItems": 68, "maxItems": 68},
        "gender": {"enum": ["female", "male", "unknown", "neutral", None]},
    },
    "additionalProperties": False,
}

_OBS_FIELDS = ("body_2d", "body_2d_vis", "body_3d", "body_3d_vis", "hand_2d", "hand_2d_vis", "hand_3d", "landmarks", "landmarks_vis")


def keypoints_to_dict(obs, gender=None, n_joints=None):
    out = {}
    for name in _OBS_FIELDS:
        v = getattr(obs, name)
        if v is not None:
            out[name] = np.asarray(v).tolist()
    if gender is not None:
        out["gender"] = gender
    if n_joints is not None:
        out["n_joints"] = int(n_joints)
    return out


def save_keypoints(path, obs, gender=None, n_joints=None):
    dump_json(path, "keypoints", keypoints_to_dict(obs, gender, n_joints))


def load_keypoints(path, model=None):
    """Returns ``(Observations, gender)``; with a model, counts are checked."""
    doc = load_json(path, "keypoints")
    try:
        jsonschema.validate(doc, KEYPOINT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ValidationError(f"{path}: {exc.message}") from exc
    if model is not None and "n_joints" in doc and doc["n_joints"] != model.n_joints:
        raise ValidationError(f"{path}: keypoints declare {doc['n_joints']} joints, model has {model.n_joints}")
    kw = {}
    for name in _OBS_FIELDS:
        if name in doc:
            kw[name] = np.asarray(doc[name], dtype=bool if name.endswith("_vis") else np.float64)
    return Observations(**kw), doc.get("gender")


# evaluation report


def eval_report_to_dict(report):
    d = report.to_dict()
    d["f_score"] = {repr(float(k)): v for k, v in report.f_score.items()}
    return d


def save_eval_json(path, reports):
    dump_json(path, "eval", {"reports": [eval_report_to_dict(r) for r in reports]})


def save_eval_csv(path, reports):
    """One row per report; header is the flattened report field names."""
    rows = [r.row() for r in reports]
    header = list(rows[0]) if rows else []
    lines = [",".join(header)]
    lines += [",".join(repr(float(row[h])) for h in header) for row in rows]
    write_text(path, "\n".join(lines) + "\n")


def load_array(path):
    """Raw float image or tensor from ``.npy`` or a ``bodyfit-tensor`` JSON."""
    p = os.fspath(path)
    if p.endswith(".npy"):
        try:
            return np.load(p, allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise IoError(f"cannot read {p}: {exc}") from exc
    return decode_array(load_json(p, "tensor")["array"])


def save_array(path, array):
    p = os.fspath(path)
    if p.endswith(".npy"):
        try:
            np.save(p, np.asarray(array), allow_pickle=False)
        except OSError as exc:
            raise IoError(f"cannot write {p}: {exc}") from exc
        return
    dump_json(p, "tensor", {"array": encode_array(array)})
