"""Command line: ``bodyfit <subcommand> ...``.

Exit codes: 0 success, 1 validation failure (including usage errors),
2 numeric failure (divergence, failed gradient check), 3 I/O failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import gradcheck
from . import io as bio
from . import losses as L
from .body_model import Parameters, pose_model
from .exceptions import BodyFitError, GradientCheckFailed, InvalidDims, ValidationError
from .fitter import FitConfig, FitProblem, fit
from .metrics import evaluate_many, scale_report
from .moderator import ToyConfig, train_toy
from .synthetic import synth_model


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _dims(text):
    try:
        vals = [int(x) for x in text.split(",")]
    except ValueError:
        raise InvalidDims(f"--dims expects V,J[,n_betas[,n_psi]], got {text!r}") from None
    if not 2 <= len(vals) <= 4:
        raise InvalidDims(f"--dims expects 2 to 4 integers, got {text!r}")
    keys = ("n_vertices", "n_joints", "n_betas", "n_psi")
    return dict(zip(keys, vals))


def _stem(path, suffix):
    root, _ = os.path.splitext(path)
    return root + suffix


def cmd_synth_model(args):
    model = synth_model(seed=args.seed, **_dims(args.dims))
    bio.save_model(args.out, model)
    if args.out_obj:
        bio.write_obj(args.out_obj, model.template, model.faces)


def cmd_pose(args):
    model = bio.load_model(args.model)
    params = Parameters.zeros(model) if args.params is None else bio.load_params(args.params)
    res = pose_model(model, params)
    bio.write_obj(args.out_obj, res.vertices, model.faces)


def cmd_fit(args):
    model = bio.load_model(args.model)
    obs, label = bio.load_keypoints(args.keypoints, model)
    if args.config:
        config, weights, cfg_gender = bio.load_fit_config(args.config)
    else:
        config, weights, cfg_gender = FitConfig(), L.LossWeights(), None
    prior = bio.load_prior(args.prior) if args.prior else None
    gender = label if label is not None else cfg_gender
    problem = FitProblem(model, obs, gender=gender, prior=prior, weights=weights)
    result = fit(problem, config)
    bio.save_fit_result(args.out, result)
    verts = pose_model(model, result.params).vertices
    bio.write_obj(args.out_obj or _stem(args.out, ".obj"), verts, model.faces)
    last = result.trace[-1]["total"] if result.trace else float("nan")
    print(json.dumps({"final_loss": last, "converged": result.converged}))


def _load_masks(args):
    masks, regressor = None, None
    if args.model:
        model = bio.load_model(args.model)
        masks, regressor = model.part_masks, model.eval_regressor
    if args.masks:
        doc = bio.load_json(args.masks, "masks")
        try:
            masks = {k: np.asarray(v, dtype=np.int64) for k, v in doc["masks"].items()}
        except (KeyError, AttributeError, TypeError, ValueError) as exc:
            raise ValidationError(f"{args.masks}: malformed masks document") from exc
        if doc.get("eval_regressor") is not None:
            regressor = bio.decode_array(doc["eval_regressor"])
    return masks, regressor


def cmd_eval(args):
    if len(args.pred) != len(args.gt):
        raise ValidationError("--pred and --gt need the same number of meshes")
    masks, regressor = _load_masks(args)
    pairs = []
    for p, g in zip(args.pred, args.gt):
        pv, pf = bio.read_obj(p)
        gv, _ = bio.read_obj(g)
        pairs.append((pv, gv, pf))
    taus = tuple(float(t) for t in args.taus.split(","))
    reports = evaluate_many(pairs, masks=masks, eval_regressor=regressor, taus=taus)
    reports = [scale_report(r, args.scale) for r in reports]
    bio.save_eval_csv(args.out_csv, reports)
    if args.out_json:
        bio.save_eval_json(args.out_json, reports)


def cmd_moderator_train(args):
    config = bio.load_toy_config(args.config) if args.config else ToyConfig()
    if args.seed is not None:
        config.seed = args.seed
    state, report = train_toy(config)
    bio.save_moderator(args.out, state)
    bio.write_text(args.out_csv or _stem(args.out, "_calibration.csv"), report.calibration_csv())
    print(
        json.dumps(
            {
                "auc": report.auc,
                "mean_w_clean": report.mean_w_clean,
                "mean_w_corrupted": report.mean_w_corrupted,
                "final_loss": report.final_loss,
            }
        )
    )


def cmd_gradcheck(args):
    report = gradcheck.run(args.module, range(args.seeds))
    for key, err in sorted(report.worst().items()):
        status = "ok" if err < gradcheck.TOLERANCE else "FAIL"
        print(f"{status} {key} max_rel_err={err:.3e}")
    print(f"{len(report.results)} checks in {report.seconds:.1f}s")
    if not report.passed:
        raise GradientCheckFailed(f"max relative error {report.max_error:.3e}")


def cmd_prior_fit(args):
    samples = bio.load_array(args.samples)
    entry = L.fit_gender_prior(samples, args.label)
    classes = {}
    if os.path.exists(args.out):
        classes = dict(bio.load_prior(args.out).classes)
        if classes and next(iter(classes.values())).mu.shape != entry.mu.shape:
            raise ValidationError(f"{args.out} holds priors over a different number of shape coefficients")
    classes[args.label] = entry
    bio.save_prior(args.out, L.GenderPrior(classes))


def build_parser():
    p = _Parser(prog="bodyfit", description="Parametric body fitting toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-model", help="generate a synthetic body model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dims", default="300,17,10,10", help="V,J[,n_betas[,n_psi]]")
    s.add_argument("--out", required=True)
    s.add_argument("--out-obj", help="also write the template mesh")
    s.set_defaults(func=cmd_synth_model)

    s = sub.add_parser("pose", help="pose a model and export the mesh")
    s.add_argument("--model", required=True)
    s.add_argument("--params", help="parameter JSON; zero parameters if omitted")
    s.add_argument("--out-obj", required=True)
    s.set_defaults(func=cmd_pose)

    s = sub.add_parser("fit", help="fit the model to keypoints")
    s.add_argument("--model", required=True)
    s.add_argument("--keypoints", required=True)
    s.add_argument("--config")
    s.add_argument("--prior")
    s.add_argument("--out", required=True)
    s.add_argument("--out-obj", help="defaults to the --out path with an .obj suffix")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("eval", help="compare predicted and ground-truth meshes")
    s.add_argument("--pred", nargs="+", required=True)
    s.add_argument("--gt", nargs="+", required=True)
    s.add_argument("--masks", help="masks JSON with part vertex indices and an optional eval_regressor")
    s.add_argument("--model", help="take part masks and eval regressor from a model file")
    s.add_argument("--out-csv", required=True)
    s.add_argument("--out-json")
    s.add_argument("--scale", type=float, default=1.0, help="multiply distances, e.g. 1000 for metres to mm")
    s.add_argument("--taus", default="0.005,0.01", help="F-score thresholds in model units")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("moderator-train", help="train the fusion gate on the toy task")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--out-csv", help="calibration table; defaults next to --out")
    s.set_defaults(func=cmd_moderator_train)

    s = sub.add_parser("gradcheck", help="finite-difference checks of all gradients")
    s.add_argument("--module", default="all", choices=("all",) + gradcheck.SUITES)
    s.add_argument("--seeds", type=int, default=10)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("prior-fit", help="fit one class of the gendered shape prior")
    s.add_argument("--samples", required=True, help=".npy or tensor JSON, n x n_betas")
    s.add_argument("--label", required=True, choices=L.GENDER_LABELS + (L.NEUTRAL,))
    s.add_argument("--out", required=True, help="prior JSON; an existing file is extended")
    s.set_defaults(func=cmd_prior_fit)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        args.func(args)
    except BodyFitError as exc:
        print(f"bodyfit {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"bodyfit {args.command}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
