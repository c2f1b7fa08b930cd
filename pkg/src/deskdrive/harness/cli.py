"""Command-line entry point: ``python -m deskdrive <command> [options]``.

Commands share ``--config``, ``--seed``, ``--out`` and ``--module``; results
accumulate in the output directory, so ``train-*`` commands followed by
``report`` give the same table as ``run``. Errors print one JSON object on
stderr and exit with a nonzero status.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipelines as P
from .checkpoint import CheckpointError
from .config import MODULES, ConfigError, ExperimentConfig, load_config, with_overrides
from .report import build_report, emit_table, read_metrics, read_timing

EXIT_USAGE, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_IO = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int, **extra):
        super().__init__(message)
        self.kind, self.code, self.extra = kind, code, extra

    def payload(self) -> dict:
        return {"error": self.kind, **self.extra, "message": str(self)}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


def _train(fn):
    def cmd(cfg: ExperimentConfig, out: Path) -> str:
        return P.write_outputs(cfg, out, fn(cfg, out)[0])
    return cmd


def _simulate(cfg, out):
    return P.write_outputs(cfg, out, P.run_simulate(cfg, out))


def _benchmark(cfg, out):
    return P.write_outputs(cfg, out, P.run_benchmark(cfg, out, P.modules_of(cfg.module)))


def _report(cfg, out):
    metrics_path = out / "metrics.csv"
    if not metrics_path.exists():
        raise CliError("io", f"no metrics in {out}; run a train command first", EXIT_IO, path=str(metrics_path))
    timing = read_timing(out / "timing.csv") if (out / "timing.csv").exists() else {}
    text, _ = emit_table(build_report(read_metrics(metrics_path), timing), out / "report.txt", out / "report.csv")
    return text


def _run(cfg, out):
    P.run_all(cfg, out)
    return (out / "report.txt").read_text()


COMMANDS = {
    "train-perception": (_train(P.run_perception), "train and evaluate the detectors and the tracker"),
    "train-decision": (_train(P.run_decision), "train and evaluate the driving agent"),
    "train-planner": (_train(P.run_planner), "train and evaluate the learned A* heuristic"),
    "simulate": (_simulate, "drive one end-to-end episode with a mid-route road closure"),
    "benchmark": (_benchmark, "time per-call latency of each module"),
    "report": (_report, "rebuild the performance table from saved metrics and timings"),
    "run": (_run, "train, evaluate and benchmark the selected modules, then write the report"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deskdrive", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", type=Path, help="output directory (overrides the config)")
        p.add_argument("--module", choices=MODULES, help="modules for run and benchmark (default all)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config is not None else ExperimentConfig()
    return with_overrides(cfg, seed=args.seed, out=None if args.out is None else str(args.out), module=args.module)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        text = COMMANDS[args.command][0](cfg, out)
    except CliError as exc:
        err = exc
    except ConfigError as exc:
        err = CliError("config", exc.reason, EXIT_CONFIG, key=exc.key)
    except CheckpointError as exc:
        err = CliError("checkpoint", str(exc), EXIT_CHECKPOINT, reason=exc.kind)
    except OSError as exc:
        err = CliError("io", exc.strerror or str(exc), EXIT_IO, path=str(exc.filename))
    else:
        sys.stdout.write(text)
        return 0
    sys.stderr.write(json.dumps(err.payload()) + "\n")
    return err.code


if __name__ == "__main__":
    sys.exit(main())
