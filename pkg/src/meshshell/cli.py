"""Command line entry point: ``meshshell run|verify|convergence|inspect``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ConfigurationError, MeshShellError
from .verify import SUITES, _jsonable, convergence_study, run_config
from .config import parse_config
from .output import inspect_state

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3


def _emit(summary: dict, json_path: str | None):
    text = json.dumps({k: v for k, v in summary.items() if not k.startswith("_")},
                      indent=2, default=_jsonable)
    if json_path:
        with open(json_path, "w") as fh:
            fh.write(text + "\n")
    print(text)


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    if args.steps is not None:
        cfg = cfg.with_steps(args.steps)
    res = run_config(cfg, out_dir=args.out, weak=args.weak_residual)
    rep = res["report"]
    print(f"steps {res['steps']}  max E {rep['max_E']:.6e}  K {rep['K']:.6e}  "
          f"violations {rep['violations']}  runtime {res['runtime_s']:.1f}s", file=sys.stderr)
    if res["aborted"]:
        print(f"aborted: {res['aborted']}", file=sys.stderr)
    _emit(res, args.json)
    if res["aborted"]:
        return EXIT_ABORT
    return EXIT_OK if res["ok"] else EXIT_FAIL


def _cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    results = {}
    for name in names:
        results[name] = SUITES[name](args.config)
        print(f"{name}: {'PASS' if results[name]['ok'] else 'FAIL'}", file=sys.stderr)
    ok = all(r["ok"] for r in results.values())
    _emit({"ok": ok, "suites": results}, args.json)
    return EXIT_OK if ok else EXIT_FAIL


def _cmd_convergence(args) -> int:
    res = convergence_study(args.config, args.levels, args.threads)
    print(f"{'N':>6} {'dt':>10} {'max_E':>13} {'K':>13} {'sum|v-v*|^2 dt':>16}", file=sys.stderr)
    for r in res["levels"]:
        print(f"{r['N']:>6} {r['dt']:>10.3e} {r['max_E']:>13.6e} {r['K']:>13.6e} "
              f"{r['sum_kin_mismatch_dt']:>16.6e}", file=sys.stderr)
    print(f"max-E spread {res['max_E_spread']:.3e}   mismatch slope {res['mismatch_slope']:.3f}",
          file=sys.stderr)
    _emit(res, args.json)
    return EXIT_OK if res["ok"] else EXIT_FAIL


def _cmd_inspect(args) -> int:
    _emit(inspect_state(args.state), args.json)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshshell", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a configured simulation")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides [output] dir)")
    r.add_argument("--steps", type=int, help="override [time] N")
    r.add_argument("--weak-residual", action="store_true", help="accumulate the weak-form residual")
    r.add_argument("--json", help="also write the JSON summary here")
    r.set_defaults(func=_cmd_run)

    v = sub.add_parser("verify", help="run a built-in verification suite")
    v.add_argument("suite", choices=list(SUITES) + ["all"])
    v.add_argument("--config", help="configuration used by run-based suites")
    v.add_argument("--json")
    v.set_defaults(func=_cmd_verify)

    c = sub.add_parser("convergence", help="time-step refinement study")
    c.add_argument("config")
    c.add_argument("--levels", type=int, default=3)
    c.add_argument("--threads", type=int, help="worker processes (capped by MESHSHELL_THREADS)")
    c.add_argument("--json")
    c.set_defaults(func=_cmd_convergence)

    i = sub.add_parser("inspect", help="summarise a state file")
    i.add_argument("state")
    i.add_argument("--json")
    i.set_defaults(func=_cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "levels", 1) < 1:
        parser.error("--levels must be at least 1")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MeshShellError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ABORT
