"""Command line: run, batch, sweep and validate.

Exit codes: 0 success, 1 validation failure or aborted run, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .scenario import Scenario, ScenarioError, load_benchmark, load_scenario
from .sim import CONTROLLERS, RunAborted, normalized, run_batch, run_closed_loop, scenario_metrics, sweep_horizon, write_csv

EXIT_OK, EXIT_ABORT, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load(path: str | None) -> Scenario:
    if path is None:
        return load_benchmark()
    if not Path(path).is_file():
        raise UsageError(f"scenario file not found: {path}")
    return load_scenario(path)


def _checked(path: str | None, normal: bool = False) -> Scenario:
    sc = _load(path)
    problems = sc.problems()
    if problems:
        raise ScenarioError("; ".join(problems))
    return sc.without_emergency() if normal else sc


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror}") from None
    return out


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def _table(title: str, header: list[str], rows: list[list]) -> str:
    cells = [header] + [[r[0]] + [_fmt(v) if not isinstance(v, str) else v for v in r[1:]] for r in rows]
    widths = [max(len(str(c[i])) for c in cells) for i in range(len(header))]
    lines = [title, "  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in cells[1:]]
    return "\n".join(lines)


def cmd_validate(args) -> int:
    try:
        sc = _load(args.scenario)
    except ScenarioError as exc:
        print(f"invalid: {exc}")
        return EXIT_ABORT
    problems = sc.problems()
    if problems:
        for p in problems:
            print(f"invalid: {p}")
        return EXIT_ABORT
    print(f"ok: {sc.name} ({sc.spec.n_lanes} lanes, {sc.spec.m_intersections} intersections, {len(sc.units)} units)")
    return EXIT_OK


def cmd_run(args) -> int:
    sc = _checked(args.scenario, args.normal)
    if args.steps is not None and args.steps < 0:
        raise UsageError("--steps must be nonnegative")
    out = _out_dir(args.out)
    seed = sc.seed if args.seed is None else args.seed
    stem = f"{sc.name}_{args.controller}_seed{seed}"
    log = open(out / f"{stem}_rounds.jsonl", "w") if args.controller == "decentralized" and args.round_log else None
    try:
        rec = run_closed_loop(sc, args.controller, seed=seed, steps=args.steps, log=log)
    except RunAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    finally:
        if log is not None:
            log.close()
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        write_csv(rec, fh)
    (out / f"{stem}.json").write_text(rec.to_json(timing=True))
    summary = {"scenario": sc.name, "controller": args.controller, "seed": seed, "steps": rec.steps, "digest": rec.digest()}
    if rec.steps >= sc.ssd_window - 1:
        summary.update(scenario_metrics(sc, rec).as_dict())
    (out / f"{stem}_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    text = "\n".join(f"{k}: {v}" for k, v in sorted(summary.items()))
    (out / f"{stem}_summary.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_batch(args) -> int:
    sc = _checked(args.scenario)
    out = _out_dir(args.out)
    controllers = args.controllers.split(",")
    bad = [c for c in controllers if c not in CONTROLLERS]
    if bad or args.runs < 1:
        raise UsageError(f"bad controllers {bad}" if bad else "--runs must be positive")
    progress = (lambda c, s: print(f"  {c} seed {s}", file=sys.stderr)) if args.verbose else None
    try:
        normal = run_batch(sc.without_emergency(), controllers, args.runs, args.base_seed, args.steps, progress)
        emerg = run_batch(sc, controllers, args.runs, args.base_seed, args.steps, progress) if sc.emergency else None
    except RunAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    ref = "baseline" if "baseline" in controllers else controllers[0]
    ct_ref = "centralized" if "centralized" in controllers else controllers[0]
    result = {"runs": args.runs, "base_seed": args.base_seed, "reference": ref}
    blocks = []
    ct = normal.means("ct_mean")
    result["compute_time"] = {"mean_s": ct, "normalized": normalized(ct, ct_ref)}
    blocks.append(_table(f"Mean per-step compute time (normalized to {ct_ref})", ["controller", "mean CT [s]", "norm."],
                         [[c, ct[c], normalized(ct, ct_ref)[c]] for c in controllers]))
    ssd = normal.means("ssd")
    result["normal"] = {"ssd": ssd, "ssd_norm": normalized(ssd, ref), "violations": normal.violations()}
    blocks.append(_table(f"Normal mode: mean SSD (normalized to {ref})", ["controller", "mean SSD", "SSD norm."],
                         [[c, ssd[c], normalized(ssd, ref)[c]] for c in controllers]))
    if emerg is not None:
        essd, edep = emerg.means("ssd"), emerg.means("dep")
        result["emergency"] = {"ssd": essd, "ssd_norm": normalized(essd, ref), "dep": edep,
                               "dep_norm": normalized(edep, ref), "violations": emerg.violations()}
        blocks.append(_table(f"Emergency mode: mean SSD and DEP (normalized to {ref})",
                             ["controller", "mean SSD", "SSD norm.", "mean DEP", "DEP norm."],
                             [[c, essd[c], normalized(essd, ref)[c], edep[c], normalized(edep, ref)[c]] for c in controllers]))
    text = "\n\n".join(blocks)
    (out / "summary.txt").write_text(text + "\n")
    (out / "summary.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    print(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    sc = _checked(args.scenario, normal=not args.emergency)
    if args.tf_min < 1 or args.tf_max < args.tf_min:
        raise UsageError("need 1 <= --tf-min <= --tf-max")
    if args.controller not in CONTROLLERS:
        raise UsageError(f"unknown controller {args.controller}")
    out = _out_dir(args.out)
    try:
        rows = sweep_horizon(sc, list(range(args.tf_min, args.tf_max + 1)), args.runs, args.controller, args.base_seed, args.steps)
    except RunAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    text = _table(f"Horizon sweep ({args.controller}, normalized to T_f={args.tf_min})",
                  ["T_f", "mean SSD", "SSD norm.", "mean CT [s]", "CT norm."],
                  [[str(r.horizon), r.ssd, r.ssd_norm, r.ct, r.ct_norm] for r in rows])
    (out / "sweep.txt").write_text(text + "\n")
    (out / "sweep.json").write_text(json.dumps([r.__dict__ for r in rows], indent=2))
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctm-mpc", description="Two-step MPC for signalized lane networks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    scen = {"help": "scenario TOML file (default: shipped benchmark)"}

    r = sub.add_parser("run", help="simulate one closed-loop run")
    r.add_argument("--scenario", **scen)
    r.add_argument("--controller", choices=CONTROLLERS, default="centralized")
    r.add_argument("--seed", type=int)
    r.add_argument("--steps", type=int)
    r.add_argument("--out", default="out")
    r.add_argument("--normal", action="store_true", help="ignore the scenario's emergency event")
    r.add_argument("--round-log", action="store_true", help="write the decentralized round log (JSON lines)")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("batch", help="seeded batch comparison in normal and emergency mode")
    b.add_argument("--scenario", **scen)
    b.add_argument("--runs", type=int, default=100)
    b.add_argument("--base-seed", type=int, default=0)
    b.add_argument("--steps", type=int)
    b.add_argument("--controllers", default=",".join(CONTROLLERS))
    b.add_argument("--out", default="out")
    b.set_defaults(func=cmd_batch)

    s = sub.add_parser("sweep", help="prediction-horizon sweep")
    s.add_argument("--scenario", **scen)
    s.add_argument("--tf-min", type=int, default=1)
    s.add_argument("--tf-max", type=int, default=6)
    s.add_argument("--runs", type=int, default=20)
    s.add_argument("--base-seed", type=int, default=0)
    s.add_argument("--steps", type=int)
    s.add_argument("--controller", default="decentralized")
    s.add_argument("--emergency", action="store_true", help="keep the scenario's emergency event")
    s.add_argument("--out", default="out")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("validate", help="check a scenario file")
    v.add_argument("--scenario", **scen)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ScenarioError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
