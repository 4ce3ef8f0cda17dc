"""Mesh and joint evaluation: PA/TR alignment, MPJPE, V2V, P2S and F-score.

Metrics accept an :class:`Alignment`, or the strings ``"pa"`` / ``"tr"`` to
compute one from the very points being compared, or ``None`` for raw error.
Part variants with a string alignment re-align on the masked subset.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ._validation import as_points
from .exceptions import DegenerateConfiguration, DimensionMismatch, TopologyMismatch, ValidationError
from .surface import accelerated_distances, brute_force_distances

PARTS = ("all", "body", "lhand", "rhand", "face")
_MASK_KEYS = {"body": "body", "lhand": "left_hand", "rhand": "right_hand", "face": "face"}


@dataclass(frozen=True, eq=False)
class Alignment:
    kind: str
    s: float
    R: np.ndarray
    t: np.ndarray

    def apply(self, points):
        return self.s * np.asarray(points, dtype=np.float64) @ self.R.T + self.t


def procrustes_align(source, target):
    """Similarity transform minimizing ``|s R source + t - target|^2`` (Umeyama)."""
    src = as_points(source, name="source")
    tgt = as_points(target, name="target")
    if src.shape != tgt.shape:
        raise DimensionMismatch("source and target must have the same shape")
    n = src.shape[0]
    if n < 3:
        raise DegenerateConfiguration("Procrustes alignment needs at least 3 points")
    mu_s, mu_t = src.mean(axis=0), tgt.mean(axis=0)
    xs, xt = src - mu_s, tgt - mu_t
    var_s = np.sum(xs * xs) / n
    sv_src = np.linalg.svd(xs, compute_uv=False)
    if var_s <= 0 or sv_src[1] <= 1e-12 * max(sv_src[0], 1e-300):
        raise DegenerateConfiguration("source points are coincident or collinear")
    cov = xt.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    s = float(np.sum(D * S) / var_s)
    if not s > 0:
        raise DegenerateConfiguration("target points collapse; no positive scale")
    t = mu_t - s * R @ mu_s
    return Alignment("PA", s, R, t)


def translation_align(source, target):
    src = as_points(source, name="source")
    tgt = as_points(target, name="target")
    if src.shape[0] < 1 or tgt.shape[0] < 1:
        raise DegenerateConfiguration("translation alignment needs at least one point")
    return Alignment("TR", 1.0, np.eye(3), tgt.mean(axis=0) - src.mean(axis=0))


def identity_alignment():
    return Alignment("NONE", 1.0, np.eye(3), np.zeros(3))


def _resolve(alignment, pred, gt):
    if alignment is None:
        return identity_alignment()
    if isinstance(alignment, Alignment):
        return alignment
    kind = str(alignment).lower()
    if kind == "pa":
        return procrustes_align(pred, gt)
    if kind == "tr":
        return translation_align(pred, gt)
    raise ValidationError(f"unknown alignment {alignment!r}")


def residual(source, target, alignment):
    """Sum of squared distances after alignment."""
    d = alignment.apply(source) - np.asarray(target, dtype=np.float64)
    return float(np.sum(d * d))


def mpjpe(pred_joints, gt_joints, alignment="pa"):
    """Mean Euclidean joint error after alignment."""
    pred = as_points(pred_joints, name="pred_joints")
    gt = as_points(gt_joints, name="gt_joints")
    if pred.shape != gt.shape:
        raise DimensionMismatch("joint sets differ in shape")
    al = _resolve(alignment, pred, gt)
    return float(np.linalg.norm(al.apply(pred) - gt, axis=1).mean())


def regress_eval_joints(vertices, regressor):
    vertices = as_points(vertices, name="vertices")
    regressor = np.asarray(regressor, dtype=np.float64)
    if regressor.ndim != 2 or regressor.shape[1] != vertices.shape[0]:
        raise DimensionMismatch("regressor columns must match the vertex count")
    return regressor @ vertices


def v2v(pred_vertices, gt_vertices, alignment="pa", mask=None):
    """Mean per-vertex error; with a mask and a string alignment the part is
    aligned on its own before measuring."""
    pred = as_points(pred_vertices, name="pred_vertices")
    gt = as_points(gt_vertices, name="gt_vertices")
    if pred.shape != gt.shape:
        raise TopologyMismatch("pred and gt meshes must share topology")
    if mask is not None:
        mask = np.asarray(mask)
        pred, gt = pred[mask], gt[mask]
    al = _resolve(alignment, pred, gt)
    return float(np.linalg.norm(al.apply(pred) - gt, axis=1).mean())


def lower_median(values):
    values = np.sort(np.asarray(values, dtype=np.float64))
    return float(values[(values.size - 1) // 2])


def p2s(gt_points, pred_vertices, faces, alignment=None, accelerated=True):
    """Distance from ground-truth points to the predicted surface.

    ``alignment`` (an :class:`Alignment`) is applied to the predicted mesh.
    Returns ``{"mean": ..., "median": ...}`` with the lower median.
    """
    gt_points = as_points(gt_points, name="gt_points")
    verts = as_points(pred_vertices, name="pred_vertices")
    if alignment is not None:
        verts = alignment.apply(verts)
    fn = accelerated_distances if accelerated else brute_force_distances
    d = fn(gt_points, verts, faces)
    return {"mean": float(d.mean()), "median": lower_median(d)}


def f_score(pred_points, gt_points, tau):
    """Harmonic mean of precision and recall at distance threshold ``tau``."""
    if not tau > 0:
        raise ValidationError("tau must be positive")
    pred = as_points(pred_points, name="pred_points")
    gt = as_points(gt_points, name="gt_points")
    d_pred, _ = cKDTree(gt).query(pred)
    d_gt, _ = cKDTree(pred).query(gt)
    precision = float(np.mean(d_pred <= tau))
    recall = float(np.mean(d_gt <= tau))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class EvalReport:
    pa_v2v: dict
    tr_v2v: dict
    pa_mpjpe: float
    pa_p2s: dict
    f_score: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def row(self):
        """Flat ``column -> value`` mapping used for CSV output."""
        out = {}
        for part in PARTS:
            if part in self.pa_v2v:
                out[f"pa_v2v_{part}"] = self.pa_v2v[part]
        for part in PARTS:
            if part in self.tr_v2v:
                out[f"tr_v2v_{part}"] = self.tr_v2v[part]
        out["pa_mpjpe"] = self.pa_mpjpe
        out["pa_p2s_mean"] = self.pa_p2s["mean"]
        out["pa_p2s_median"] = self.pa_p2s["median"]
        for tau, value in self.f_score.items():
            out[f"pa_f@{tau:g}"] = value
        return out


def scale_report(report, factor):
    """Report with every distance multiplied by ``factor`` (F-scores unchanged)."""
    f = float(factor)
    if not f > 0:
        raise ValidationError("scale factor must be positive")
    return EvalReport(
        pa_v2v={k: v * f for k, v in report.pa_v2v.items()},
        tr_v2v={k: v * f for k, v in report.tr_v2v.items()},
        pa_mpjpe=report.pa_mpjpe * f,
        pa_p2s={k: v * f for k, v in report.pa_p2s.items()},
        f_score=dict(report.f_score),
    )


def evaluate(
    pred_vertices,
    gt_vertices,
    faces,
    masks=None,
    pred_joints=None,
    gt_joints=None,
    eval_regressor=None,
    taus=(0.005, 0.01),
):
    """Fill an :class:`EvalReport` for one predicted / ground-truth pair.

    ``masks`` maps ``body``, ``left_hand``, ``right_hand`` and ``face`` to
    vertex indices; part fields use per-part alignment. Joints come either
    directly or from ``eval_regressor`` applied to both meshes.
    """
    pred = as_points(pred_vertices, name="pred_vertices")
    gt = as_points(gt_vertices, name="gt_vertices")
    if pred.shape != gt.shape:
        raise TopologyMismatch("pred and gt meshes must share topology")
    masks = masks or {}
    pa_all = procrustes_align(pred, gt)
    pa = {"all": v2v(pred, gt, pa_all)}
    tr = {"all": v2v(pred, gt, "tr")}
    for short, key in _MASK_KEYS.items():
        idx = masks.get(key)
        if idx is None or len(idx) == 0:
            continue
        idx = np.asarray(idx)
        tr[short] = v2v(pred, gt, "tr", mask=idx)
        pa[short] = v2v(pred, gt, "pa", mask=idx) if len(idx) >= 3 else tr[short]

    if pred_joints is None and eval_regressor is not None:
        pred_joints = regress_eval_joints(pred, eval_regressor)
        gt_joints = regress_eval_joints(gt, eval_regressor)
    joints_err = float("nan")
    if pred_joints is not None and gt_joints is not None:
        joints_err = mpjpe(pred_joints, gt_joints, "pa")

    aligned = pa_all.apply(pred)
    surf = p2s(gt, aligned, faces)
    fs = {float(t): f_score(aligned, gt, t) for t in taus}
    return EvalReport(pa_v2v=pa, tr_v2v=tr, pa_mpjpe=joints_err, pa_p2s=surf, f_score=fs)


def _workers():
    try:
        return max(1, int(os.environ.get("BODYFIT_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_many(pairs, **kwargs):
    """Evaluate a list of ``(pred_vertices, gt_vertices, faces)`` triples.

    Worker count comes from ``BODYFIT_THREADS``; results keep input order so
    aggregation is deterministic.
    """
    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        return list(pool.map(lambda p: evaluate(*p, **kwargs), pairs))
