"""Command-line entry point: ``dtemod gen | select | bench``.

Exit codes: 0 success, 1 runtime failure, 2 usage or malformed input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .bench import DEFAULT_GRID, BenchConfig, run_bench
from .crt import PVALUE_METHODS
from .dataset import SCENARIOS, DatasetError, Scenario, load_csv, read_manifest, save_csv, simulate, write_manifest
from .selection import SelectionConfig, config_dict, select
from .wcmmd import MODES

log = logging.getLogger("dtemod")


class UsageError(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(choices):
    def parse(text: str) -> tuple[str, ...]:
        items = tuple(v.strip() for v in text.split(",") if v.strip())
        bad = [v for v in items if v not in choices]
        if bad or not items:
            raise argparse.ArgumentTypeError(f"invalid choice(s) {bad}; pick from {list(choices)}")
        return items
    return parse


def _add_selection_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, default=0.05, help="BH significance level (default 0.05)")
    p.add_argument("--B", type=int, default=100, help="CRT resamples per feature (default 100)")
    p.add_argument("--r", type=int, default=1000, help="random Fourier features (default 1000)")
    p.add_argument("--pvalue", choices=PVALUE_METHODS, default="paper",
                   help="count/B ('paper') or (1+count)/(1+B) ('plus-one')")
    p.add_argument("--weights", choices=("normalized", "raw"), default="normalized",
                   help="self-normalised or raw conditional weights (default normalized)")
    p.add_argument("--refit-propensity", action="store_true",
                   help="refit the propensity model on every CRT replicate (slow)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)


def _selection_config(args, **overrides) -> SelectionConfig:
    if args.alpha <= 0 or args.alpha >= 1:
        raise UsageError("--alpha must lie in (0, 1)")
    if args.B < 1 or args.r < 1 or args.threads < 1:
        raise UsageError("--B, --r and --threads must be positive")
    fields = dict(alpha=args.alpha, B=args.B, r=args.r, pvalue=args.pvalue, seed=args.seed,
                  threads=args.threads, normalize=args.weights == "normalized",
                  refit_propensity=args.refit_propensity)
    fields.update(overrides)
    return SelectionConfig(**fields)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtemod", description="Distributional treatment effect modifier selection")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write a synthetic benchmark dataset")
    gen.add_argument("--scenario", required=True, choices=SCENARIOS)
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--d", type=int, default=30)
    gen.add_argument("--out", required=True, help="CSV path; a .manifest.json is written next to it")

    sel = sub.add_parser("select", help="run the selection pipeline on a CSV dataset")
    sel.add_argument("data", help="CSV with name:kind header tags")
    sel.add_argument("--treatment", help="treatment column (overrides header tags)")
    sel.add_argument("--outcome", help="outcome column (overrides header tags)")
    sel.add_argument("--discrete", default="", help="comma-separated discrete feature names")
    sel.add_argument("--mode", choices=MODES, default="rff")
    sel.add_argument("--sampler", choices=("conditional", "naive"), default="conditional")
    sel.add_argument("--out", help="output prefix (default: <data stem>.selection)")
    sel.add_argument("--nulls", action="store_true", help="include every CRT null draw in the JSON")
    _add_selection_flags(sel)

    bench = sub.add_parser("bench", help="TPR/FPR and runtime sweeps over synthetic scenarios")
    bench.add_argument("--scenarios", type=_str_list(SCENARIOS), default=("LinMean", "NonlinMean", "LinVar", "NonlinVar"))
    bench.add_argument("--n-grid", type=_int_list, default=DEFAULT_GRID)
    bench.add_argument("--reps", type=int, default=10)
    bench.add_argument("--paper-scale", action="store_true", help="50 repetitions per cell")
    bench.add_argument("--modes", type=_str_list(MODES), default=("rff",))
    bench.add_argument("--sampler", type=_str_list(("conditional", "naive")), default=("conditional",))
    bench.add_argument("--d", type=int, default=30)
    bench.add_argument("--importance-only", action="store_true",
                       help="time the propensity fit and importance only (no CRT, no TPR/FPR)")
    bench.add_argument("--resume", action="store_true", help="skip repetitions already in the raw CSV")
    bench.add_argument("--out-dir", default=".", help="directory for bench_raw.csv and bench_summary.csv")
    _add_selection_flags(bench)
    return parser


def cmd_gen(args) -> int:
    if args.n < 2:
        raise UsageError("--n must be >= 2")
    scenario = Scenario(args.scenario, d=args.d)
    sim = simulate(scenario, args.n, args.seed)
    out = Path(args.out)
    save_csv(sim.dataset, out)
    write_manifest(
        out, scenario=scenario.name, n=args.n, d=scenario.d, seed=args.seed, mu=scenario.mu,
        sigma=scenario.sigma, true_modifiers=[sim.dataset.names[m] for m in scenario.true_set],
        treatment=sim.dataset.treatment_name, outcome=sim.dataset.outcome_name,
    )
    print(out)
    return 0


def cmd_select(args) -> int:
    discrete = tuple(v.strip() for v in args.discrete.split(",") if v.strip())
    manifest = read_manifest(args.data) or {}
    treatment = args.treatment or None
    outcome = args.outcome or None
    dataset = load_csv(args.data, treatment=treatment, outcome=outcome, discrete=discrete)
    config = _selection_config(args, mode=args.mode, sampler=args.sampler)
    result = select(dataset, config)
    prefix = Path(args.out) if args.out else Path(args.data).with_suffix("").with_name(Path(args.data).stem + ".selection")
    payload = result.to_dict(include_null=args.nulls)
    payload["config"] = config_dict(config)
    if manifest:
        payload["manifest"] = manifest
    Path(f"{prefix}.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    result.to_csv(f"{prefix}.csv")
    for name in result.selected_names:
        print(name)
    for m, message in result.errors.items():
        print(f"warning: {dataset.names[m]} untested ({message})", file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    reps = 50 if args.paper_scale else args.reps
    if reps < 1:
        raise UsageError("--reps must be >= 1")
    grid = tuple(args.n_grid)
    if list(grid) != sorted(set(grid)) or not grid:
        raise UsageError("--n-grid must be strictly ascending")
    base = _selection_config(args)
    config = BenchConfig(
        scenarios=tuple(args.scenarios), n_grid=grid, reps=reps, modes=tuple(args.modes),
        samplers=tuple(args.sampler), d=args.d, seed=args.seed,
        importance_only=args.importance_only, selection=base,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    agg = run_bench(config, out / "bench_raw.csv", out / "bench_summary.csv", resume=args.resume)
    for row in agg:
        print(
            f"{row['scenario']:>12} n={row['n']:<5} {row['mode']}/{row['sampler']}: "
            f"TPR {row['tpr_mean']:.2f}±{row['tpr_std']:.2f}  FPR {row['fpr_mean']:.3f}±{row['fpr_std']:.3f}  "
            f"importance {row['seconds_importance']:.2f}s  failures {row['failures']}"
        )
    return 0


COMMANDS = {"gen": cmd_gen, "select": cmd_select, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, DatasetError) as exc:
        parser.print_usage(sys.stderr)
        print(f"dtemod {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"dtemod {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"dtemod {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
