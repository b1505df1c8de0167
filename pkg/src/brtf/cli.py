"""Command-line interface: simulate, fit, predict, eval.

Exit codes: 0 on success (fit: converged), 2 when fit hits the iteration
budget without converging, 1 on any error (with a diagnostic on stderr).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import io
from .inference import FitConfig, NumericalBreakdownError, fit
from .predict import impute
from .state import HyperPriors
from .synthetic import ExperimentRow, SyntheticSpec, fme, generate_synthetic, rrse
from .tensor_ops import cp_reconstruct


def _parse_shape(text: str):
    try:
        shape = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; expected e.g. 30,30,30")
    if any(s < 1 for s in shape):
        raise argparse.ArgumentTypeError("extents must be positive")
    return shape


def _magnitude(text: str):
    if text in ("10std", "max"):
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"bad outlier magnitude {text!r}; expected 10std, max, or a number")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="brtf",
        description="Bayesian robust CP tensor factorization of incomplete multiway data")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic problem instance")
    sim.add_argument("--output-dir", required=True)
    sim.add_argument("--shape", type=_parse_shape, default=(30, 30, 30))
    sim.add_argument("--rank", type=int, default=3)
    sim.add_argument("--outlier-fraction", type=float, default=0.1)
    sim.add_argument("--outlier-magnitude", type=_magnitude, default="10std")
    sim.add_argument("--noise-variance", type=float, default=0.01)
    sim.add_argument("--missing-fraction", type=float, default=0.0)
    sim.add_argument("--seed", type=int, default=0)

    fit_p = sub.add_parser("fit", help="fit the model to an observed tensor")
    fit_p.add_argument("--input", required=True, help="tensor file")
    fit_p.add_argument("--mask", help="mask file (omit for NaN-encoded or complete input)")
    fit_p.add_argument("--output-dir", required=True)
    fit_p.add_argument("--init-rank", type=int, default=None)
    fit_p.add_argument("--max-iters", type=int, default=200)
    fit_p.add_argument("--tol", type=float, default=1e-6)
    fit_p.add_argument("--seed", type=int, default=0)
    fit_p.add_argument("--init", choices=("random", "svd"), default="random")
    fit_p.add_argument("--prune-threshold", type=float, default=1e-8)
    fit_p.add_argument("--force-general-path", action="store_true",
                       help="skip the complete-tensor fast path")
    fit_p.add_argument("--no-hyperprior-opt", action="store_true",
                       help="keep the outlier hyperpriors fixed")
    fit_p.add_argument("--hyperprior", type=float, default=1e-6,
                       help="value for all six top-level hyperparameters")

    pred = sub.add_parser("predict", help="impute entries from a fitted checkpoint")
    pred.add_argument("--checkpoint", required=True)
    pred.add_argument("--output-dir", required=True)
    pred.add_argument("--all-entries", action="store_true",
                      help="evaluate every entry, not just the missing ones")

    ev = sub.add_parser("eval", help="score an estimate against a ground truth")
    ev.add_argument("--truth", required=True, help="ground-truth tensor file")
    ev.add_argument("--estimate", help="estimated tensor file")
    ev.add_argument("--checkpoint", help="checkpoint; reconstruction used as estimate")
    ev.add_argument("--truth-factors", nargs="+",
                    help="ground-truth factor matrix files, one per mode")
    ev.add_argument("--mask", help="observation mask; adds missing-entry error")
    ev.add_argument("--label", default="eval")
    ev.add_argument("--output", required=True, help="metrics csv path")
    return parser


def _cmd_simulate(args) -> int:
    spec = SyntheticSpec(
        shape=args.shape, true_rank=args.rank,
        outlier_fraction=args.outlier_fraction,
        outlier_magnitude=args.outlier_magnitude,
        noise_variance=args.noise_variance,
        missing_fraction=args.missing_fraction,
        seed=args.seed)
    data = generate_synthetic(spec)
    out = args.output_dir
    os.makedirs(out, exist_ok=True)
    io.write_tensor(os.path.join(out, "y.bt"), data.y)
    io.write_mask(os.path.join(out, "mask.bm"), data.mask)
    io.write_tensor(os.path.join(out, "x_true.bt"), data.x_true)
    for n, factor in enumerate(data.factors):
        io.write_tensor(os.path.join(out, f"factor_{n}.bt"), factor)
    io.write_tensor(os.path.join(out, "outliers.bt"), data.outliers)
    io.write_mask(os.path.join(out, "outlier_mask.bm"), data.outlier_mask)
    return 0


def _cmd_fit(args) -> int:
    y, mask = io.read_tensor(args.input)
    if args.mask:
        if mask is not None:
            raise ValueError("input already encodes missingness; drop --mask")
        mask = io.read_mask(args.mask)
    if mask is None:
        mask = np.ones(y.shape, dtype=bool)
    priors = HyperPriors(*([args.hyperprior] * 6))
    config = FitConfig(
        max_iters=args.max_iters, tol=args.tol,
        prune_threshold=args.prune_threshold,
        optimize_gamma_priors=not args.no_hyperprior_opt,
        seed=args.seed)
    out = args.output_dir
    os.makedirs(out, exist_ok=True)
    try:
        state, report = fit(y, mask, config=config, priors=priors,
                            init_rank=args.init_rank, init_scheme=args.init,
                            force_general_path=args.force_general_path)
    except NumericalBreakdownError as err:
        if err.report is not None:
            io.write_report(os.path.join(out, "report.json"), err.report.to_dict())
        raise
    io.save_checkpoint(os.path.join(out, "checkpoint.brtc"), state, mask)
    io.write_report(os.path.join(out, "report.json"), report.to_dict())
    io.write_tensor(os.path.join(out, "x_hat.bt"), cp_reconstruct(state.factor_means()))
    io.write_tensor(os.path.join(out, "s_hat.bt"), state.sparse.mean)
    return 0 if report.converged else 2


def _cmd_predict(args) -> int:
    state, mask = io.load_checkpoint(args.checkpoint)
    missing_only = not args.all_entries
    means, variances, evaluated = impute(state, mask, missing_only=missing_only)
    out = args.output_dir
    os.makedirs(out, exist_ok=True)
    io.write_tensor(os.path.join(out, "pred_mean.bt"), means,
                    mask=evaluated, encoding=io.ENC_NAN_MISSING)
    io.write_tensor(os.path.join(out, "pred_var.bt"), variances,
                    mask=evaluated, encoding=io.ENC_NAN_MISSING)
    lines = ["index,mean,variance"]
    for index in np.argwhere(evaluated):
        key = ";".join(str(i) for i in index)
        lines.append(f"{key},{means[tuple(index)]:.10g},{variances[tuple(index)]:.10g}")
    with open(os.path.join(out, "entries.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if not evaluated.any():
        print("warning: no missing entries to predict", file=sys.stderr)
    return 0


def _cmd_eval(args) -> int:
    truth, _ = io.read_tensor(args.truth)
    if args.estimate:
        estimate, _ = io.read_tensor(args.estimate)
        inferred_rank = -1
        est_factors = None
    elif args.checkpoint:
        state, _ = io.load_checkpoint(args.checkpoint)
        estimate = cp_reconstruct(state.factor_means())
        inferred_rank = state.rank
        est_factors = state.factor_means()
    else:
        raise ValueError("eval needs --estimate or --checkpoint")
    row = ExperimentRow(label=args.label, seed=-1, outlier_fraction=float("nan"),
                        outlier_magnitude="", missing_fraction=float("nan"))
    row.rrse = rrse(estimate, truth)
    row.inferred_rank = inferred_rank
    if args.mask:
        mask = io.read_mask(args.mask)
        if not mask.all():
            row.rrse_missing = rrse(estimate, truth, mask=~mask)
    if args.truth_factors:
        if est_factors is None:
            raise ValueError("factor match error needs --checkpoint")
        true_factors = [io.read_tensor(p)[0] for p in args.truth_factors]
        row.fme = fme(est_factors, true_factors)
    io.write_metrics_csv(args.output, [row])
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "predict": _cmd_predict,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        # argparse exits 2 on usage errors; keep 2 for "did not converge" only
        return 1 if err.code else 0
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, NumericalBreakdownError, np.linalg.LinAlgError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
