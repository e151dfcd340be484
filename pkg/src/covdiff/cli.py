"""Batch front-end: synth | calibrate | train | estimate | compare.

Exit codes: 0 success, 2 validation problem, 3 missing artifact,
4 numerical failure.
"""

import argparse
import sys

from .config import load_config
from .errors import (
    CalibrationError,
    ConfigurationError,
    CovdiffError,
    DataError,
    DefinitenessError,
    DimensionError,
    FormatError,
    MissingArtifactError,
    NumericalError,
    TrainingError,
    ValidationError,
)
from .pipeline import cmd_calibrate, cmd_compare, cmd_estimate, cmd_synth, cmd_train

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4


def _add_common(sub):
    sub.add_argument("--config", default=None, help="JSON configuration file")
    sub.add_argument("--seed", type=int, default=None, help="master seed override")
    sub.add_argument("--out", default=None, help="output directory override")
    sub.add_argument(
        "--threads", type=int, default=None, help="cap BLAS worker threads"
    )
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a dotted configuration path (repeatable)",
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="covdiff",
        description="Compressive covariance estimation with diffusion-denoised gradients",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("synth", "write a synthetic hyperspectral cube and its true covariance"),
        ("calibrate", "measure gradient-noise statistics and write the schedule"),
        ("train", "train the gradient denoiser and save its weights"),
        ("estimate", "run one covariance estimation"),
        ("compare", "run the paired preconditioner comparison"),
    ):
        s = sub.add_parser(name, help=help_text)
        _add_common(s)
        if name == "estimate":
            s.add_argument(
                "--method",
                choices=("identity", "gaussian", "diffusion"),
                default=None,
                help="preconditioner (defaults to solver.preconditioner)",
            )
    return parser


def _limit_threads(n):
    if n is None:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=int(n))
    except ImportError:  # pragma: no cover - present in the supported env
        pass


def main(argv=None):
    args = build_parser().parse_args(argv)
    _limit_threads(args.threads)
    try:
        cfg = load_config(args.config, args.overrides, args.seed, args.out)
        if args.command == "synth":
            out = cmd_synth(cfg)
            print(f"wrote {out['cube']} and {out['sigma_true']}")
        elif args.command == "calibrate":
            out = cmd_calibrate(cfg)
            stats = out["stats"]
            print(
                f"wrote {out['schedule']} "
                f"(levels {list(stats.partitions)}, clean scale {stats.clean_scale:.4g})"
            )
        elif args.command == "train":
            out = cmd_train(cfg)
            print(
                f"wrote {out['weights']} (validation loss {out['val_loss']:.4f}, "
                f"zero-predictor {out['zero_loss']:.4f})"
            )
        elif args.command == "estimate":
            out = cmd_estimate(cfg, method=args.method)
            print(f"wrote {out['estimate']} and {out['trace']}")
        elif args.command == "compare":
            out = cmd_compare(cfg)
            report = out["report_obj"]
            line = f"wrote {out['files']['report']}"
            methods = report.methods()
            if "identity" in methods:
                for m in methods:
                    if m == "identity":
                        continue
                    ratio = report.median_mse_ratio(m, "identity")
                    line += f"; median mse {m}/identity = {ratio:.3f}"
            print(line)
            for note in report.notes:
                print(f"note: {note}")
    except (MissingArtifactError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, TrainingError, DefinitenessError, CalibrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (
        ConfigurationError,
        ValidationError,
        FormatError,
        DataError,
        DimensionError,
        CovdiffError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
