"""Command-line entry point: ``hamchain <subcommand> [options]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bounds as bnd
from .bc_baseline import MlpParams, bc_rollout_batch
from .chain_policy import (
    AssignmentSet,
    ball_decrease_violations,
    build_assignment_set,
    check_condition1,
    check_condition2,
    energy_range_on_box,
    rollout_batch,
)
from .dynamics import TargetSpec
from .errors import ConfigurationError, ExpertFailure
from .expert import demo_rng, generate_demonstration
from .harness import (
    DEMO_STREAM,
    TEST_STREAM,
    load_config,
    load_demos,
    load_policy,
    read_results_csv,
    render_figures,
    run_experiment,
    sample_initial_states,
    setup,
    stream,
    toml_reader,
)

EXIT_OK, EXIT_CONFIG, EXIT_EXPERT, EXIT_CHECK = 0, 2, 3, 4


class CheckFailed(Exception):
    pass


def _config(args):
    over = {"system": args.system, "output_dir": args.out}
    if args.seed is not None:
        over["seeds"] = {"sampling": args.seed, "expert": args.seed + 1, "bc": args.seed + 2}
    if getattr(args, "n_test", None) is not None:
        over["n_test"] = args.n_test
    return load_config(args.config, **over)


def _out_dir(cfg) -> Path:
    p = Path(cfg.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_demo_gen(args) -> int:
    cfg = _config(args)
    model, spec = setup(cfg)
    ecfg = cfg.expert_config()
    out = _out_dir(cfg) / "demos"
    out.mkdir(exist_ok=True)
    if args.x0:
        starts = np.array([args.x0], dtype=float)
    else:
        starts = sample_initial_states(model, cfg.h_bar, args.count, stream(cfg.seeds.sampling, DEMO_STREAM))
    for j, x0 in enumerate(starts):
        demo = generate_demonstration(model, spec, x0, ecfg, demo_rng(ecfg.seed, j), cfg.dt)
        path = out / f"demo_{j:02d}.json"
        path.write_text(demo.to_json())
        print(f"{path}: x0={np.round(x0, 4).tolist()} duration={demo.duration:.3f} s terminal dH={demo.terminal_dh:.4g}")
    return EXIT_OK


def cmd_build(args) -> int:
    cfg = _config(args)
    model, spec = setup(cfg)
    demos = load_demos(args.demos, model, spec)
    aset = build_assignment_set(model, spec, demos, v0=args.v0 if args.v0 is not None else cfg.v0,
                                dt=cfg.dt, default_duration=cfg.default_duration)
    path = Path(args.output) if args.output else _out_dir(cfg) / "chain_policy.json"
    path.write_text(aset.to_json())
    print(f"{path}: {len(aset)} triples, v0={aset.v0:.4g}, per demo {aset.diagnostics['per_demo']}")
    if aset.diagnostics["shallow_endpoints"]:
        print(f"warning: demos {aset.diagnostics['shallow_endpoints']} end short of the eps-band")
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = _config(args)
    model, spec = setup(cfg)
    aset = AssignmentSet.from_json(Path(args.policy).read_text())
    c1 = check_condition1(model, spec, aset, dt=cfg.dt)
    bad1 = [e.index for e in c1 if not e.ok]
    s0 = sample_initial_states(model, cfg.h_bar, cfg.n_test, stream(cfg.seeds.sampling, TEST_STREAM))
    c2 = check_condition2(model, spec, aset, s0)
    balls = ball_decrease_violations(model, spec, aset, args.per_ball, seed=cfg.seeds.sampling, dt=cfg.dt)
    report = {
        "condition1": {"triples": len(c1), "violations": bad1,
                       "min_margin": min((e.margin for e in c1), default=None)},
        "condition2": {"c": c2["c"], "gaps": c2["gaps"]},
        "ball_decrease": balls,
    }
    print(json.dumps(report, indent=2))
    if bad1 or c2["gaps"] or balls["violations"]:
        raise CheckFailed("verification violations found")
    return EXIT_OK


def _bound_inputs(args) -> bnd.BoundInputs:
    doc = {}
    if args.params:
        text = Path(args.params).read_text()
        if args.params.endswith(".json"):
            doc = json.loads(text)
        else:
            doc = toml_reader.loads(text)
    system = doc.pop("system", None) or args.system
    if system:
        cfg = load_config(None, system=system)
        model, _ = setup(cfg)
        h1, h2 = energy_range_on_box(model)
        base = {"l_h": model.l_h, "c_f": model.c_f, "lip_l": model.lip_l, "mu_h": model.mu_h,
                "d_x": model.diameter, "eps": cfg.eps_margin, "h1": h1, "h2": h2}
        if args.estimate_v and "v_lower" not in doc:
            spec = TargetSpec.from_ball(model, cfg.center, cfg.radius, cfg.eps_margin)
            xs = sample_initial_states(model, cfg.h_bar, args.estimate_v, stream(cfg.seeds.sampling, DEMO_STREAM))
            est = bnd.estimate_v_lower(model, spec, cfg.expert_config(), xs, demo_rng(cfg.seeds.expert, 0), cfg.dt)
            print(f"empirical v_lower from {est['samples']} expert rollouts: {est['v_lower']} ({est['note']})")
            if est["v_lower"] is not None:
                base["v_lower"] = est["v_lower"]
        doc = {**base, **doc}
    if "v_lower" not in doc:
        raise ConfigurationError("v_lower is required: give it in the parameter file or use --estimate-v N")
    # same rule as the assignment-set default: a thousandth of the decrease rate, floored
    doc.setdefault("v0", max(1e-3 * doc["v_lower"], 1e-4))
    try:
        return bnd.BoundInputs(**doc)
    except TypeError as exc:
        raise ConfigurationError(f"bound parameters: {exc}") from None


def cmd_bounds(args) -> int:
    rep = bnd.report(_bound_inputs(args))
    print(json.dumps(rep, indent=2))
    print(bnd.format_report(rep))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model, spec = setup(cfg)
    policy = load_policy(args.policy)
    tests = sample_initial_states(model, cfg.h_bar, cfg.n_test, stream(cfg.seeds.sampling, TEST_STREAM))
    if isinstance(policy, MlpParams):
        recs = bc_rollout_batch(model, spec, policy, tests, cfg.horizon, cfg.dt)
    else:
        recs = rollout_batch(model, spec, policy, tests, cfg.horizon, cfg.dt)
    path = _out_dir(cfg) / (args.name or "eval_detail.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["test_idx", *[f"x0_{i}" for i in range(model.n)], "reached", "reach_time"])
        for i, r in enumerate(recs):
            w.writerow([i, *[repr(float(v)) for v in r.x0], int(r.reached), repr(r.reach_time)])
    rate = np.mean([r.reached for r in recs])
    avg = np.mean([r.reach_time for r in recs])
    print(f"success rate {rate:.3f}, average reach time {avg:.3f} s over {len(recs)} states -> {path}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _config(args)
    res = run_experiment(cfg)
    print("policy  M  success  reach_time  triples")
    for r in res.records:
        print(f"{r.policy:6s} {r.m:2d}  {r.success_rate:7.3f}  {r.avg_reach_time:10.3f}  {r.n_triples or ''}")
    print(f"outputs in {cfg.output_dir} ({res.wall_time:.1f} s)")
    bad = {m: c["violations"] for m, c in res.checks.items() if c["violations"]}
    if bad:
        raise CheckFailed(f"certified-ball decrease violations: {bad}")
    return EXIT_OK


def cmd_plot(args) -> int:
    root = Path(args.results_dir or args.out or ".")
    paths = render_figures(read_results_csv(root / "results.csv"), root, title=args.system or "")
    for p in paths:
        print(p)
    return EXIT_OK


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; SUPPRESS keeps them from clobbering values given earlier
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config", **kw)
    common.add_argument("--seed", type=int, help="base seed (sampling, expert and bc streams derive from it)", **kw)
    common.add_argument("--out", help="output directory", **kw)
    common.add_argument("--system", choices=["spring_mass", "pendulum"], **kw)
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(True)
    parser = argparse.ArgumentParser(prog="hamchain", parents=[_global_flags(False)],
                                     description="Chain policies for lossless Hamiltonian systems.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo-gen", parents=[common], help="generate expert demonstrations")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--x0", type=float, nargs="+", help="explicit initial state")
    p.set_defaults(func=cmd_demo_gen)

    p = sub.add_parser("build", parents=[common], help="build an assignment set from demonstration files")
    p.add_argument("demos", nargs="+")
    p.add_argument("--v0", type=float)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("check", parents=[common], help="verify the decrease and coverage conditions")
    p.add_argument("policy")
    p.add_argument("--per-ball", type=int, default=100)
    p.add_argument("--n-test", type=int)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("bounds", parents=[common], help="print the closed-form bounds")
    p.add_argument("params", nargs="?", help="TOML or JSON file with bound inputs")
    p.add_argument("--estimate-v", type=int, default=0, metavar="N",
                   help="fill v_lower from N expert rollouts when the file omits it")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("eval", parents=[common], help="evaluate a stored policy on sampled test states")
    p.add_argument("policy")
    p.add_argument("--n-test", type=int)
    p.add_argument("--name", help="detail CSV file name")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", parents=[common], help="run the full M sweep")
    p.add_argument("--n-test", type=int)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("plot", parents=[common], help="render figures from results.csv")
    p.add_argument("results_dir", nargs="?")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExpertFailure as exc:
        print(f"expert failure: {exc}", file=sys.stderr)
        return EXIT_EXPERT
    except CheckFailed as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
