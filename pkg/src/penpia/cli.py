"""Command-line front end: JSON experiment configs in, report tables out.

The interface is batch-oriented -- every experiment is a structured config
file rather than a pile of flags, because a run is a multi-field object
(problem, mode, schedule, sizes, seed) that should be reproducible from a
single artifact.  The only flags are ``--config``, ``--seed``, ``--out``
and ``--format``, which override the corresponding config fields for quick
sweeps.

Exit codes are fixed for scripting:

===  ==========================================================
0    success (for ``crosscheck``: the two estimators agree)
2    validation failure -- bad file, bad schema, bad invariant
3    numerical abort -- instability, positivity loss, oracle
     disagreement, a partial ladder, or a failed cross-check
===  ==========================================================

All diagnostics go to standard error; standard output carries only the
one-line result summaries.  Report files are written atomically.
"""

from __future__ import annotations

import argparse
import dataclasses
import inspect
import json
import logging
import sys
from dataclasses import dataclass, field
from typing import Mapping

from .bench import BenchmarkSpec, benchmark, benchmark_names
from .driver import SchemeConfig, entropic_crosscheck, run_experiment
from .errors import PenpiaError, ValidationError
from .problems import PenaltySchedule
from .report import (
    ConvergenceReport,
    atomic_write_text,
    converge_runs_to_csv,
    write_report,
)

__all__ = [
    "ExperimentConfig",
    "cmd_converge",
    "cmd_crosscheck",
    "cmd_list_benchmarks",
    "cmd_solve",
    "main",
]

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

FORMATS = ("csv", "json", "both")

#: Config keys handled at the experiment level; everything else is passed
#: through to the scheme-config parser, which rejects unknown keys.
_EXPERIMENT_KEYS = ("problem", "params", "out", "format")


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: a benchmark, a scheme configuration, and output routing.

    ``params`` are keyword overrides forwarded to the benchmark factory
    (for example ``{"kappa": 0.25}`` for the controlled-volatility
    problem).  ``out`` is an output path stem; the format extension is
    appended unless already present.
    """

    problem: str
    scheme: SchemeConfig
    params: Mapping[str, object] = field(default_factory=dict)
    out: str = "report"
    format: str = "csv"

    def __post_init__(self) -> None:
        if not isinstance(self.problem, str) or not self.problem:
            raise ValidationError("'problem' must be a non-empty benchmark name")
        if not isinstance(self.params, Mapping) or not all(
            isinstance(k, str) for k in self.params
        ):
            raise ValidationError("'params' must be an object with string keys")
        object.__setattr__(self, "params", dict(self.params))
        if not isinstance(self.out, str) or not self.out:
            raise ValidationError("'out' must be a non-empty path stem")
        if self.format not in FORMATS:
            raise ValidationError(
                f"unknown report format {self.format!r}; expected one of {', '.join(FORMATS)}"
            )

    def to_dict(self) -> dict:
        """JSON-ready dictionary; inverse of :meth:`from_dict`."""
        return {
            "problem": self.problem,
            "params": dict(self.params),
            **self.scheme.to_dict(),
            "out": self.out,
            "format": self.format,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ValidationError("experiment config must be an object")
        remainder = dict(d)
        if "problem" not in remainder:
            raise ValidationError("experiment config requires 'problem'")
        problem = remainder.pop("problem")
        params = remainder.pop("params", {})
        out = remainder.pop("out", "report")
        fmt = remainder.pop("format", "csv")
        scheme = SchemeConfig.from_dict(remainder)
        return cls(problem=problem, scheme=scheme, params=params, out=out, format=fmt)


def _read_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except OSError as exc:
        raise ValidationError(f"cannot read config file {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"config file {path!r} must contain a JSON object")
    return raw


def _apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(
            config, scheme=dataclasses.replace(config.scheme, seed=args.seed)
        )
    if getattr(args, "out", None) is not None:
        config = dataclasses.replace(config, out=args.out)
    if getattr(args, "format", None) is not None:
        config = dataclasses.replace(config, format=args.format)
    return config


def _out_path(stem: str, fmt: str) -> str:
    return stem if stem.endswith("." + fmt) else stem + "." + fmt


def _run(config: ExperimentConfig) -> tuple[BenchmarkSpec, ConvergenceReport]:
    """Resolve the benchmark, run the scheme, stamp the full config envelope."""
    spec = benchmark(config.problem, **config.params)
    report = run_experiment(
        spec.problem, config.scheme, smallness_constants=spec.smallness_constants
    )
    # The driver stamps only its own fields; widen the envelope to the whole
    # experiment so the report re-parses to the config that produced it.
    return spec, dataclasses.replace(report, config=config.to_dict())


def _summary_line(name: str, report: ConvergenceReport) -> str:
    last = report.records[-1] if report.records else None
    value = "n/a" if last is None else f"{last.value:.6f}"
    if report.reference.value is None:
        ref = "ref=n/a"
    else:
        ref = f"ref={report.reference.value:.6f} ({report.reference.provenance})"
    err = "err=n/a" if last is None or last.err is None else f"err={last.err:+.6f}"
    rate = "rate=n/a" if report.fitted_rate is None else f"rate={report.fitted_rate:+.4f}"
    n = "n=?" if last is None else f"n={last.n}"
    return f"{name} {n} value={value} {ref} {err} {rate}"


def _write_outputs(config: ExperimentConfig, report: ConvergenceReport) -> list[str]:
    formats = ("csv", "json") if config.format == "both" else (config.format,)
    paths = []
    for fmt in formats:
        path = _out_path(config.out, fmt)
        write_report(report, path, fmt)
        paths.append(path)
    return paths


def cmd_solve(args: argparse.Namespace) -> int:
    """Run one configured experiment and write its report."""
    config = _apply_overrides(ExperimentConfig.from_dict(_read_json(args.config)), args)
    _, report = _run(config)
    paths = _write_outputs(config, report)
    logger.info("wrote %s", ", ".join(paths))
    print(_summary_line(config.problem, report))
    if report.partial:
        print("ladder aborted early; report marked partial", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_converge(args: argparse.Namespace) -> int:
    """Run the same experiment under several penalty schedules.

    The config file carries a ``schedules`` list in place of the single
    ``schedule`` field; every run shares the seed (hence, in Monte Carlo
    modes, the same driving noise), so schedule curves are directly
    comparable.  The output is one long-format CSV with a leading
    ``schedule`` label column.
    """
    raw = _read_json(args.config)
    if "schedule" in raw:
        raise ValidationError("converge configs use 'schedules' (a list), not 'schedule'")
    entries = raw.pop("schedules", None)
    if not isinstance(entries, list) or not entries:
        raise ValidationError("converge requires 'schedules': a non-empty list")
    schedules = [PenaltySchedule.from_dict(entry) for entry in entries]
    base = _apply_overrides(
        ExperimentConfig.from_dict({**raw, "schedule": schedules[0].to_dict()}), args
    )

    runs = []
    partial = False
    for schedule in schedules:
        config = dataclasses.replace(
            base, scheme=dataclasses.replace(base.scheme, schedule=schedule)
        )
        _, report = _run(config)
        runs.append((schedule.label, report))
        partial = partial or report.partial
        print(_summary_line(f"{config.problem} [{schedule.label}]", report))

    path = _out_path(base.out, "csv")
    atomic_write_text(path, converge_runs_to_csv(runs))
    logger.info("wrote %s", path)
    if partial:
        print("at least one ladder aborted early", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_crosscheck(args: argparse.Namespace) -> int:
    """Compare the ladder estimator against the direct simulation at rung n."""
    config = _apply_overrides(ExperimentConfig.from_dict(_read_json(args.config)), args)
    spec = benchmark(config.problem, **config.params)
    check = entropic_crosscheck(spec.problem, config.scheme, args.n)
    verdict = "PASS" if check.passed else "FAIL"
    print(
        f"{config.problem} n={check.n}: ladder={check.v_n:.6f} "
        f"direct={check.v_tilde:.6f} gap={check.gap:.3e} "
        f"combined_stderr={check.combined_stderr:.3e} -> {verdict}"
    )
    return EXIT_OK if check.passed else EXIT_NUMERICAL


def cmd_list_benchmarks(args: argparse.Namespace) -> int:
    """Print every registered benchmark with its parameters and references."""
    from .bench import _BENCHMARKS  # factory signatures drive the listing

    for name in benchmark_names():
        factory = _BENCHMARKS[name]
        spec = factory()
        problem = spec.problem
        references = []
        if spec.analytic_value is not None:
            references.append("analytic")
        if spec.oracle_recipe is not None:
            references.append(spec.oracle_recipe.kind)
        params = [
            f"{p.name} (default {p.default!r})"
            for p in inspect.signature(factory).parameters.values()
            if p.default is not inspect.Parameter.empty
        ]
        print(
            f"{name}: state_dim={problem.state_dim} horizon={problem.horizon:g} "
            f"actions={problem.action_set.size} "
            f"reference={'+'.join(references)} "
            f"params={', '.join(params) if params else 'none'}"
        )
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="penpia",
        description="Penalized policy iteration for stochastic control: "
        "run benchmark ladders and emit convergence reports.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def add_common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", required=True, help="JSON experiment config file")
        sub.add_argument("--seed", type=int, default=None, help="override the config seed")
        sub.add_argument("--out", default=None, help="override the output path stem")
        sub.add_argument(
            "--format", choices=FORMATS, default=None, help="override the report format"
        )

    solve = commands.add_parser("solve", help="run one experiment and write its report")
    add_common(solve)
    solve.set_defaults(handler=cmd_solve)

    converge = commands.add_parser(
        "converge", help="run one experiment under several penalty schedules"
    )
    add_common(converge)
    converge.set_defaults(handler=cmd_converge)

    crosscheck = commands.add_parser(
        "crosscheck", help="compare the ladder and direct estimators at rung n"
    )
    add_common(crosscheck)
    crosscheck.add_argument("n", type=int, help="iteration index to check")
    crosscheck.set_defaults(handler=cmd_crosscheck)

    listing = commands.add_parser("list-benchmarks", help="print the benchmark registry")
    listing.set_defaults(handler=cmd_list_benchmarks)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage, 0 on --help
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except PenpiaError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
