"""Command-line harness around the experiment suites.

Verbs:
  train      run training per (map, seed); logs, checkpoints, eval report
  eval       run an evaluation suite (mode eval-static or eval-dynamic)
  ablate     run the architecture/exploration ablation grid
  sweep      run the obstacle-density sweep
  plot-data  derive per-figure CSVs from an existing report directory

Exit codes: 0 success, 2 configuration error, 3 runtime failure,
4 training divergence (non-finite loss or Q values).
"""
from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .experiments import emit_plot_data, run_suite
from .trainer import TrainingDiverged

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_DIVERGED = 4

_VERB_MODES = {
    "train": ("train",),
    "eval": ("eval-static", "eval-dynamic"),
    "ablate": ("ablation",),
    "sweep": ("density-sweep",),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridplan",
        description="Config-driven grid navigation experiments.")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, modes in _VERB_MODES.items():
        p = sub.add_parser(verb, help=f"run a config with mode "
                                      f"{' or '.join(modes)}")
        p.add_argument("-c", "--config", required=True,
                       help="path to the experiment INI file")
        p.add_argument("--seeds", default=None,
                       help="comma-separated seed override")
        p.add_argument("--output-dir", default=None,
                       help="report directory override")
        p.add_argument("--episodes", default=None, type=int,
                       help="episodes-per-cell override")
        p.add_argument("--workers", default=None, type=int,
                       help="parallel worker override")
        p.add_argument("--quiet", action="store_true",
                       help="suppress the resolved-config echo")
    plot = sub.add_parser("plot-data",
                          help="emit per-figure CSVs from a report")
    plot.add_argument("--report", required=True,
                      help="report directory holding episodes.csv")
    return parser


def _overrides(args) -> dict[str, str]:
    out = {}
    if args.seeds is not None:
        out["experiment.seeds"] = args.seeds
    if args.output_dir is not None:
        out["experiment.output_dir"] = args.output_dir
    if args.episodes is not None:
        out["experiment.episodes"] = str(args.episodes)
    if args.workers is not None:
        out["experiment.workers"] = str(args.workers)
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verb == "plot-data":
        try:
            for path in emit_plot_data(args.report):
                print(path)
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        return EXIT_OK

    try:
        cfg = load_config(args.config, overrides=_overrides(args))
        allowed = _VERB_MODES[args.verb]
        if cfg.mode not in allowed:
            raise ConfigError(
                f"[experiment] mode: {cfg.mode!r} cannot run under "
                f"'{args.verb}' (expects {' or '.join(allowed)})")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if not args.quiet:
        from .config import resolved_text
        print(f"# resolved configuration ({args.config})")
        print(resolved_text(cfg), end="")

    try:
        report = run_suite(cfg)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - boundary turns failures into codes
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    print(f"report written to {cfg.output_dir}")
    for label in sorted(report["summaries"]):
        mean_sr = report["summaries"][label]["mean_sr"]
        print(f"  {label}: mean SR {mean_sr:.3f}")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
