"""Command-line front end.

Three subcommands: simulate-expert writes an expert-statistics file for a
model at known hyperparameters, fit learns hyperparameters against such a
file, and study runs the scripted experiments. Machine-readable output goes
to files under --out; progress lines go to standard error.

Exit codes: 0 success, 2 configuration or input error, 3 numerical abort.
"""

from dataclasses import replace

import argparse
import json
import os
import sys

from . import elicitation, models, studies, training
from .elicitation import ElicitationError, ExpertFileError
from .losses import KernelSpec
from .models import ModelSpecError
from .training import ConfigError, TrainingAbort, TrainingConfig


def _parse_set(pairs):
    """--set key=value pairs into an override dict.

    Values go through JSON first, so numbers, booleans, and lists work;
    anything unparseable stays a string. Dotted keys address the kernel,
    e.g. kernel.kind=energy or kernel.sigmas=[0.5,1.0,2.0].
    """
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError("--set expects key=value, got %r" % (pair,))
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _fold_kernel(overrides):
    """Collapse kernel.* keys into a single KernelSpec override."""
    plain = {k: v for k, v in overrides.items() if not k.startswith("kernel.")}
    dotted = {k[len("kernel."):]: v for k, v in overrides.items() if k.startswith("kernel.")}
    if dotted:
        base = plain.get("kernel", KernelSpec())
        bad = set(dotted) - {"kind", "sigmas"}
        if bad:
            raise ConfigError("unknown kernel option(s): %s" % ", ".join(sorted(bad)))
        if "sigmas" in dotted:
            dotted["sigmas"] = tuple(float(s) for s in dotted["sigmas"])
        plain["kernel"] = replace(base, **dotted)
    return plain


def _resolve_model(args):
    if (args.model is None) == (args.model_file is None):
        raise ConfigError("provide exactly one of --model or --model-file")
    if args.model is not None:
        _, model = studies.resolve_study(args.model)
        return model, True
    if not os.path.exists(args.model_file):
        raise ConfigError("model file not found: %s" % args.model_file)
    return models.read_model_file(args.model_file), False


def _load_lambda(arg):
    """Hyperparameter values from inline JSON or a JSON file path."""
    if arg.lstrip().startswith("{"):
        doc = json.loads(arg)
    else:
        if not os.path.exists(arg):
            raise ConfigError("hyperparameter file not found: %s" % arg)
        with open(arg) as fh:
            doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigError("hyperparameter JSON must be an object")
    return {str(k): float(v) for k, v in doc.items()}


def _progress_printer(total):
    def progress(epoch, row):
        if (epoch + 1) % 50 == 0 or epoch + 1 == total:
            print(
                "epoch %d/%d  loss %.6g" % (epoch + 1, total, row["total_loss"]),
                file=sys.stderr,
            )
    return progress


def cmd_simulate_expert(args):
    model, builtin = _resolve_model(args)
    if args.lambda_star is not None:
        lam = _load_lambda(args.lambda_star)
    elif model.lambda_star is not None:
        lam = model.lambda_star
    else:
        raise ConfigError(
            "model %s carries no true hyperparameters; pass --lambda-star" % model.name
        )
    s_e = args.s_e
    if s_e is None:
        if builtin:
            s_e = studies.CASE_CONFIGS[studies.MODEL_TO_STUDY[model.name]]["expert_samples"]
        else:
            s_e = 300
    seed = args.seed if args.seed is not None else 2023
    stats = elicitation.simulate_ideal_expert(model, lam, s_e, seed)
    elicitation.write_expert_file(args.out, stats, model.name, seed)
    for s in stats:
        print("%s  %s  values %s" % (s.id, s.technique.tag, "x".join(map(str, s.values.shape))))
    return 0


def cmd_fit(args):
    model, builtin = _resolve_model(args)
    overrides = _fold_kernel(_parse_set(args.set))
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if builtin:
        cfg = studies.build_config(studies.MODEL_TO_STUDY[model.name], overrides)
    else:
        if "epochs" not in overrides:
            raise ConfigError("custom models need --epochs or --set epochs=N")
        valid = set(TrainingConfig.__dataclass_fields__)
        bad = set(overrides) - valid
        if bad:
            raise ConfigError("unknown training option(s): %s" % ", ".join(sorted(bad)))
        cfg = TrainingConfig(**overrides)

    expert_name, expert_seed, stats = elicitation.read_expert_file(args.expert)
    if expert_name != model.name:
        print(
            "note: expert file was simulated for %s, fitting %s" % (expert_name, model.name),
            file=sys.stderr,
        )
    result = training.fit(model, stats, cfg, progress=_progress_printer(cfg.epochs))

    os.makedirs(args.out, exist_ok=True)
    result.trace.to_csv(os.path.join(args.out, "trace.csv"))
    doc = {
        "model": model.name,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "expert_file": args.expert,
        "expert_seed": expert_seed,
        "lambda_init": result.lambda_init,
        "lambda_final": result.lambda_final,
        "recovery_error": (
            None if model.lambda_star is None
            else training.recovery_error(result.lambda_final, model.lambda_star)
        ),
        "seconds_total": result.seconds_total,
    }
    with open(os.path.join(args.out, "result.json"), "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    for name, value in result.lambda_final.items():
        print("%s = %.6g" % (name, value))
    return 0


def cmd_study(args):
    overrides = _fold_kernel(_parse_set(args.set))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    progress = _progress_printer_from_overrides(args.name, overrides)

    if args.name == "threshold":
        if args.t_u:
            thresholds = tuple(int(t) for t in args.t_u.split(","))
        else:
            thresholds = studies.THRESHOLD_DEFAULTS
        reports, summary = studies.run_threshold_study(
            thresholds, overrides or None, args.out, progress
        )
        for t, e_mu, e_sig, spe in zip(
            summary["thresholds"], summary["error_mu"],
            summary["error_sigma"], summary["seconds_per_epoch"],
        ):
            print(
                "t_u=%d  error mu %.4f  sigma %.4f  %.3f s/epoch" % (t, e_mu, e_sig, spe)
            )
    elif args.name == "inconsistency":
        report = studies.run_inconsistency_study(
            args.scenario, overrides or None, args.out, progress
        )
        for name, h in report.hyperparameters.items():
            print(
                "%s  true %.6g  learned %.6g  %s"
                % (name, h["true"], h["learned"], report.direction[name])
            )
    else:
        report = studies.run_case_study(args.name, overrides or None, args.out, progress)
        for name, h in report.hyperparameters.items():
            print("%s  true %.6g  learned %.6g" % (name, h["true"], h["learned"]))
    return 0


def _progress_printer_from_overrides(name, overrides):
    if name == "threshold" or name == "inconsistency":
        base = "case3" if name == "threshold" else "case4_normal"
    else:
        base = name
    try:
        epochs = overrides.get("epochs") or studies.CASE_CONFIGS[studies.resolve_study(base)[0]]["epochs"]
    except ConfigError:
        return None
    return _progress_printer(int(epochs))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="priorfit",
        description="Learn prior hyperparameters from expert-elicited statistics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_model_flags(p):
        p.add_argument("--model", help="built-in model or case-study name")
        p.add_argument("--model-file", help="model specification JSON")
        p.add_argument("--seed", type=int, help="override the run seed")

    p_sim = sub.add_parser(
        "simulate-expert", help="write an ideal-expert statistics file"
    )
    add_model_flags(p_sim)
    p_sim.add_argument(
        "--lambda-star",
        help="true hyperparameters as inline JSON or a JSON file "
             "(defaults to the model's own, when it has them)",
    )
    p_sim.add_argument(
        "--s-e", type=int,
        help="expert replications (default: the model's study setting, else 300)",
    )
    p_sim.add_argument("--out", default="expert.json", help="output file path")
    p_sim.set_defaults(func=cmd_simulate_expert)

    p_fit = sub.add_parser("fit", help="fit hyperparameters to an expert file")
    add_model_flags(p_fit)
    p_fit.add_argument("--expert", required=True, help="expert statistics JSON")
    p_fit.add_argument("--epochs", type=int, help="shorthand for --set epochs=N")
    p_fit.add_argument("--jobs", type=int, help="worker threads for batch simulation")
    p_fit.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="training option override, repeatable (e.g. --set lr_initial=0.05)",
    )
    p_fit.add_argument("--out", default=".", help="output directory")
    p_fit.set_defaults(func=cmd_fit)

    p_study = sub.add_parser("study", help="run a scripted experiment")
    p_study.add_argument(
        "name",
        help="one of %s, threshold, inconsistency" % ", ".join(studies.STUDY_NAMES),
    )
    p_study.add_argument("--t-u", help="comma-separated truncation thresholds")
    p_study.add_argument(
        "--scenario", default="benchmark",
        choices=studies.INCONSISTENCY_SCENARIOS,
        help="misreporting scenario for the inconsistency study",
    )
    p_study.add_argument("--seed", type=int, help="override the run seed")
    p_study.add_argument("--jobs", type=int, help="worker threads for batch simulation")
    p_study.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_study.add_argument("--out", default=".", help="output directory")
    p_study.set_defaults(func=cmd_study)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingAbort as e:
        print("error: %s" % e, file=sys.stderr)
        return 3
    except (ConfigError, ModelSpecError, ElicitationError, ExpertFileError) as e:
        print("error: %s" % e, file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        print("error: %s: %s" % (type(e).__name__, e), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
