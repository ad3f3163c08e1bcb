"""``eedit`` command line: plan | verify | run | report | dump-bonus.

Exit codes: 0 success, 1 usage/config error, 2 runtime error, 3 verification
divergence. Results go to stdout, diagnostics to stderr. Relative paths inside
a config file are resolved against the config file's directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bonus import build_bonus
from .config import CliConfig, load_config, resolve_mask
from .errors import ConfigError, EEditError, InvalidArgument
from .pipeline import load_input, run_edit, similarity_csv
from .tensorfile import write_tensor
from .tip import plan, read_plan, verify_equivalence, write_plan

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load(args) -> tuple[CliConfig, Path]:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "diagnostic", False):
        cfg = cfg.replace(diagnostic=True)
    return cfg, Path(args.config).resolve().parent


def _config_path(base: Path, value):
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def cmd_plan(args) -> int:
    cfg, base = _load(args)
    out = args.out or _config_path(base, cfg.plan_path)
    if out is None:
        raise ConfigError("plan needs --out or plan_path in the config")
    p = plan(cfg, resolve_mask(cfg, base))
    write_plan(p, out)
    print(f"wrote {len(p.entries)} entries to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg, base = _load(args)
    report = verify_equivalence(cfg, resolve_mask(cfg, base))
    if report.equal:
        print(report.describe())
        return EXIT_OK
    print(report.describe(), file=sys.stderr)
    return EXIT_DIVERGED


def cmd_run(args) -> int:
    cfg, base = _load(args)
    z0 = load_input(cfg, _config_path(base, cfg.input_path))
    index_plan = None
    plan_path = args.plan or (_config_path(base, cfg.plan_path) if cfg.use_tip else None)
    if plan_path is not None:
        try:
            index_plan = read_plan(plan_path)
        except FileNotFoundError:
            raise ConfigError(f"plan file not found: {plan_path}") from None
    result = run_edit(cfg, z0=z0, plan=index_plan, reference=cfg.reference_run,
                      diagnostic=cfg.diagnostic, base_dir=base)
    out = args.out or _config_path(base, cfg.output_path)
    if out is not None:
        write_tensor(result.final, out)
    text = json.dumps(result.report, indent=2)
    report_path = _config_path(base, cfg.report_path)
    if report_path is not None:
        Path(report_path).write_text(text + "\n")
        print(f"speedup_flops={result.report['speedup_flops']:.4f} report={report_path}")
    else:
        print(text)
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        rep = json.loads(Path(args.report).read_text())
    except FileNotFoundError:
        raise ConfigError(f"report file not found: {args.report}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.report}: invalid JSON: {e}") from None
    full, actual = rep["flops_full_equivalent"], rep["flops_actual"]
    print(f"FLOPs full-equivalent : {full:,}")
    print(f"FLOPs actual          : {actual:,}")
    print(f"speedup (FLOPs)       : {full / actual:.4f}x")
    print(f"inversion evaluations : {rep['velocity_evals_inversion']} of {rep['config']['steps']}")
    print(f"refresh steps         : {rep['refresh_steps']}")
    print(f"background exact      : {rep['per_step_bg_exact']}")
    if rep.get("fg_error_vs_reference") is not None:
        print(f"fg error vs reference : {rep['fg_error_vs_reference']:.6g}")
    if args.csv:
        if "similarity" not in rep:
            raise ConfigError("report has no similarity table; rerun with --diagnostic")
        Path(args.csv).write_text(similarity_csv(rep["similarity"]))
        print(f"similarity table written to {args.csv}")
    return EXIT_OK


def cmd_dump_bonus(args) -> int:
    cfg, base = _load(args)
    bonus = build_bonus(resolve_mask(cfg, base), cfg.bonus.params())
    write_tensor(bonus.grid, args.out)
    print(f"wrote {bonus.height}x{bonus.width} bonus map to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eedit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        return p

    p = with_config(sub.add_parser("plan", help="precompute the token index plan"))
    p.add_argument("--out", help="plan file to write")
    p.set_defaults(func=cmd_plan)

    p = with_config(sub.add_parser("verify", help="check offline plan == online selection"))
    p.set_defaults(func=cmd_verify)

    p = with_config(sub.add_parser("run", help="run the editing pipeline"))
    p.add_argument("--out", help="final latent tensor file")
    p.add_argument("--plan", help="consume a precomputed plan file")
    p.add_argument("--diagnostic", action="store_true", help="record module outputs, emit similarity table")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="summarise a run report")
    p.add_argument("report", help="report JSON written by 'run'")
    p.add_argument("--csv", help="write the similarity table as CSV")
    p.set_defaults(func=cmd_report)

    p = with_config(sub.add_parser("dump-bonus", help="write the score bonus map as a tensor file"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_bonus)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, InvalidArgument) as e:
        print(f"eedit: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (EEditError, OSError) as e:
        print(f"eedit: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
