"""Command line entry point: ``aggregate-hmm {run,validate,infer,fit}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiments import InvariantViolation, RunConfig, ValidationError, run_experiment
from .inference import cfb_continuous, cfb_discrete
from .learning import EmOptions, EStepError, em_fit_ensemble, em_fit_gaussian
from .model import (HmmParams, load_sequences, load_trajectories, validate,
                    validate_sequence)
from .tree import ConvergenceError

EXIT_OK, EXIT_INVALID, EXIT_NO_CONVERGENCE = 0, 2, 3

log = logging.getLogger("aggregate_hmm")


class UsageError(ValueError):
    pass


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from exc


def _load_model(path) -> HmmParams:
    try:
        params = HmmParams.from_dict(_read_json(path))
    except (KeyError, TypeError) as exc:
        raise UsageError(f"{path}: malformed model ({exc})") from exc
    problems = validate(params)
    if problems:
        raise UsageError(f"{path}: " + "; ".join(f"{p.field}: {p.message}" for p in problems))
    return params


def _load_observations(params: HmmParams, path):
    """Histogram sequences for discrete models, a trajectory file otherwise."""
    if params.is_discrete:
        seqs = load_sequences(path)
        for seq in seqs:
            problems = validate_sequence(seq)
            if problems:
                raise UsageError(f"{path}: " + "; ".join(f"{p.field}: {p.message}" for p in problems))
            if seq.num_symbols != params.emission.num_symbols:
                raise UsageError(f"{path}: histograms have {seq.num_symbols} symbols, "
                                 f"model emits {params.emission.num_symbols}")
        return seqs
    traj = load_trajectories(path)
    if traj.discrete:
        raise UsageError(f"{path}: Gaussian model needs real-valued observations")
    o = traj.o if traj.o.ndim == 3 else traj.o[..., None]
    if o.shape[-1] != params.emission.dim:
        raise UsageError(f"{path}: observations have dimension {o.shape[-1]}, "
                         f"model expects {params.emission.dim}")
    return o


def cmd_run(args) -> int:
    config = RunConfig.from_dict(_read_json(args.config))
    return run_experiment(config, out=args.out, jobs=args.jobs, seed_offset=args.seed_offset)


def cmd_validate(args) -> int:
    try:
        params = HmmParams.from_dict(_read_json(args.model))
    except (KeyError, TypeError, ValueError) as exc:
        print(f"invalid: {exc}")
        return EXIT_INVALID
    problems = validate(params)
    for p in problems:
        print(f"{p.field}: {p.message}")
    if problems:
        return EXIT_INVALID
    print("ok")
    return EXIT_OK


def cmd_infer(args) -> int:
    params = _load_model(args.model)
    obs = _load_observations(params, args.obs)
    if params.is_discrete:
        out = [cfb_discrete(params, seq, args.tol, args.max_passes).to_dict() for seq in obs]
        payload = out[0] if len(out) == 1 else out
    else:
        payload = cfb_continuous(params, obs, args.tol, args.max_passes).to_dict()
    json.dump(payload, sys.stdout)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_fit(args) -> int:
    params = _load_model(args.model)
    obs = _load_observations(params, args.obs)
    opts = EmOptions.from_dict(_read_json(args.opts)) if args.opts else EmOptions()
    if params.is_discrete:
        learned, trace = em_fit_ensemble(obs, params, opts)
    else:
        learned, trace = em_fit_gaussian(obs, params, opts)
    log.info("%d iterations, converged=%s, final -F_Bethe=%.10g",
             len(trace), trace.converged, trace.neg_bethe[-1])
    text = json.dumps(learned.to_dict()) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aggregate-hmm",
                                     description="Learn HMMs from aggregate population counts.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a grid of synthetic experiments")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="output directory (overrides the config)")
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--seed-offset", type=int, default=0)
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="check a model file")
    val.add_argument("model")
    val.set_defaults(func=cmd_validate)

    infer = sub.add_parser("infer", help="print marginals for observed aggregates")
    infer.add_argument("--model", required=True)
    infer.add_argument("--obs", required=True)
    infer.add_argument("--tol", type=float, default=1e-9)
    infer.add_argument("--max-passes", type=int, default=2000)
    infer.set_defaults(func=cmd_infer)

    fit = sub.add_parser("fit", help="learn parameters from aggregates")
    fit.add_argument("--model", required=True, help="initial parameters")
    fit.add_argument("--obs", required=True)
    fit.add_argument("--opts", help="EM options JSON")
    fit.add_argument("--out", help="write learned parameters here instead of stdout")
    fit.set_defaults(func=cmd_fit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (EStepError, ConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except (UsageError, ValidationError, InvariantViolation, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
