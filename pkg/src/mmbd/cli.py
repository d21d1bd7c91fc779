"""Command-line entry point: ``mmbd <stage> --config cfg.yaml --out DIR``.

Exit codes
    0  success
    1  any other error
    2  configuration error (bad file, unknown key, inconsistent values, bad flag)
    3  mitigation found no feasible bound set
    4  detection inconclusive (degenerate null)
    5  training diverged
    6  stage input missing (earlier stage not run)
"""

from __future__ import annotations

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_INCONCLUSIVE, EXIT_TRAINING, EXIT_INPUT = range(7)
OUT_ENV = "MMBD_OUT"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    from .harness.stages import STAGES

    p = _Parser(prog="mmbd", description="Maximum-margin backdoor detection and mitigation experiments.")
    p.add_argument("stage", choices=STAGES + ("all",), help="stage to run ('all' runs gen-data through report)")
    p.add_argument("--config", help="YAML or JSON experiment config")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./mmbd-out)")
    p.add_argument("--jobs", type=int, default=1, help="worker slots for detection restarts and ensembles")
    p.add_argument("--theta", type=float, help="detection significance level (overrides the config)")
    p.add_argument("--model", default="model", choices=("model", "mitigated", "adaptive"),
                   help="which model under models/ the detect stage reads")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # bad flag (code 2) or --help (code 0)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from .engine import InvalidInputError, ModelFormatError
    from .harness.config import ConfigError, load_config
    from .harness.io import DatasetFormatError
    from .harness.stages import InconclusiveDetection, StageInputError, run_stage
    from .mitigator import InfeasibleMitigationError
    from .training import TrainingError

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.theta is not None:
        overrides["theta"] = args.theta
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or os.environ.get(OUT_ENV) or "mmbd-out"

    stages = ("gen-data", "attack", "train", "detect", "report") if args.stage == "all" else (args.stage,)
    try:
        for name in stages:
            _, summary = run_stage(name, cfg, out, theta=args.theta, jobs=args.jobs, model=args.model)
            print(f"{name}: {json.dumps(summary, sort_keys=True)}")
    except InfeasibleMitigationError as exc:
        print(f"mitigation infeasible: {exc} (log in reports/mitigation_log.csv)", file=sys.stderr)
        return EXIT_INFEASIBLE
    except InconclusiveDetection as exc:
        print(f"detection inconclusive: {exc}", file=sys.stderr)
        return EXIT_INCONCLUSIVE
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except StageInputError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, (InvalidInputError, ModelFormatError, DatasetFormatError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_OTHER
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
