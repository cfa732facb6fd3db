from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from zdalab.errors import LabError, UsageError
from zdalab.reproduce import ALIASES, SCENARIOS, reproduce
from zdalab.scenario import Scenario, emit_plot_script, load_config, run_experiment
from zdalab.settings import get_settings

logger = logging.getLogger("zdalab")

EXIT_OK = 0
EXIT_INTERNAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="zdalab", description="Zero-dynamics attacks on switching multi-agent consensus")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = commands.add_parser("run", help="simulate scenarios and write artifacts")
    run.add_argument("configs", nargs="+", type=Path)
    run.add_argument("--output-dir", type=Path, default=None)
    run.add_argument("--plot", action="store_true", help="also emit a matplotlib script per run")
    run.add_argument("--jobs", type=int, default=1, help="run independent scenarios in parallel")

    defense = commands.add_parser("check-defense", help="evaluate both defense strategies")
    defense.add_argument("config", type=Path)
    defense.add_argument("--json", action="store_true")

    synth = commands.add_parser("synthesize-attack", help="list stealthy modes on one topology")
    synth.add_argument("config", type=Path)
    synth.add_argument("--topology", type=int, required=True)
    synth.add_argument("--policy", choices=("intermittent", "classic"), default=None)

    certify = commands.add_parser("certify", help="matrix-measure certificates for the schedule")
    certify.add_argument("config", type=Path)

    repro = commands.add_parser("reproduce", help="run one of the 16-agent reference experiments")
    repro.add_argument("experiment", choices=[*sorted(SCENARIOS), *sorted(ALIASES)])
    repro.add_argument("--output-dir", type=Path, default=None)

    serve = commands.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=None)
    return parser


def _run_one(config_path: Path, output_dir: Path | None, plot: bool) -> str:
    config = load_config(config_path)
    target = output_dir / config.name if output_dir is not None else None
    artifacts = run_experiment(config, target)
    if plot:
        emit_plot_script(artifacts, artifacts.output_dir / "plot.py")
    return f"{config.name}: {artifacts.detection} -> {artifacts.output_dir}"


def _cmd_run(args: argparse.Namespace) -> int:
    if args.jobs <= 1 or len(args.configs) == 1:
        for path in args.configs:
            print(_run_one(path, args.output_dir, args.plot))
        return EXIT_OK
    with ProcessPoolExecutor(max_workers=args.jobs) as pool:
        futures = [pool.submit(_run_one, path, args.output_dir, args.plot) for path in args.configs]
        for future in futures:
            print(future.result())
    return EXIT_OK


def _cmd_check_defense(args: argparse.Namespace) -> int:
    scenario = Scenario.from_config(load_config(args.config))
    report = scenario.defense_report()
    if args.json:
        print(json.dumps(report.as_dict(), indent=2))
    else:
        print(report.render_table())
        print()
        print(report.render_key_values())
    return EXIT_OK


def _cmd_synthesize(args: argparse.Namespace) -> int:
    scenario = Scenario.from_config(load_config(args.config))
    candidates = scenario.candidates(args.topology, args.policy)
    if not candidates:
        print(f"topology {args.topology}: no stealthy attack (trivial solutions only)")
        return EXIT_OK
    print(json.dumps([c.as_dict() for c in candidates], indent=2))
    return EXIT_OK


def _cmd_certify(args: argparse.Namespace) -> int:
    scenario = Scenario.from_config(load_config(args.config))
    certificates = scenario.certificates()
    print(json.dumps({name: cert.as_dict() for name, cert in certificates.items()}, indent=2))
    return EXIT_OK


def _cmd_reproduce(args: argparse.Namespace) -> int:
    artifacts = reproduce(args.experiment, args.output_dir)
    print(f"{args.experiment}: {artifacts.detection} (max residual {artifacts.summary['max_residual']:.3e})")
    print(f"artifacts in {artifacts.output_dir}")
    return EXIT_OK


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    port = args.port if args.port is not None else get_settings().port
    uvicorn.run("zdalab.main:app", host=args.host, port=port)
    return EXIT_OK


HANDLERS = {
    "run": _cmd_run,
    "check-defense": _cmd_check_defense,
    "synthesize-attack": _cmd_synthesize,
    "certify": _cmd_certify,
    "reproduce": _cmd_reproduce,
    "serve": _cmd_serve,
}


def main(argv: Sequence[str] | None = None) -> int:
    settings = get_settings()
    logging.basicConfig(level=settings.log_level, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
        return HANDLERS[args.command](args)
    except LabError as exc:
        print(f"error: {exc.message}", file=sys.stderr)
        if exc.detail and not isinstance(exc, UsageError):
            logger.debug(exc.detail)
        return exc.exit_code
    except Exception:
        logger.exception("cli_failed", extra={"argv": list(argv) if argv is not None else sys.argv[1:]})
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
