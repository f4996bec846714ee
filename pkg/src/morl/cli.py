"""Command line entry point: ``morl {gen,upstream,rfe,offline,online,sweep,verify}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as mio
from .harness import ExperimentConfig, build_context, plan_revealed_reward, run_sweep

OUTPUT_ROOT_ENV = "MORL_OUTPUT_ROOT"


def _int_list(text: str) -> list[int]:
    return [int(float(x)) for x in text.split(",") if x.strip()]


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def load_config(args) -> ExperimentConfig:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    flags = {
        "seeds": args.seeds, "family_seed": args.family_seed, "n_grid": args.n_grid, "T_grid": args.T_grid,
        "K_grid": args.K_grid, "N_off_grid": args.N_off_grid, "N_on_grid": args.N_on_grid,
        "output_dir": args.out, "tag": args.tag, "workers": args.workers,
    }
    data.update({k: v for k, v in flags.items() if v is not None})
    data.update(_parse_set(args.set))
    root = os.environ.get(OUTPUT_ROOT_ENV)
    out = data.get("output_dir", ExperimentConfig.output_dir)
    if root and not Path(out).is_absolute():
        data["output_dir"] = str(Path(root) / out)
    return ExperimentConfig.from_dict(data)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; flags below override its fields")
    p.add_argument("--seeds", type=_int_list, help="comma-separated data seeds")
    p.add_argument("--family-seed", type=int)
    p.add_argument("--n-grid", type=_int_list)
    p.add_argument("--T-grid", dest="T_grid", type=_int_list)
    p.add_argument("--K-grid", dest="K_grid", type=_int_list)
    p.add_argument("--N-off-grid", dest="N_off_grid", type=_int_list)
    p.add_argument("--N-on-grid", dest="N_on_grid", type=_int_list)
    p.add_argument("--out", help=f"output directory (relative paths go under ${OUTPUT_ROOT_ENV} when set)")
    p.add_argument("--tag", help="CSV file suffix")
    p.add_argument("--workers", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")


def cmd_gen(args) -> int:
    cfg = load_config(args)
    ctx = build_context(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    members = []
    for t, (task, pol) in enumerate(zip(ctx.family.tasks, ctx.behavior)):
        mio.save_mdp(task, out / f"task_{t}.json")
        mio.dump(mio.policy_to_dict(pol), out / f"behavior_{t}.json")
        members.append(f"task_{t}.json")
    mio.save_mdp(ctx.target, out / "target.json")
    mio.write_manifest(out / "manifest.json", cfg.family_seed, members,
                       {"target": "target.json", "config": cfg.to_dict(),
                        "target_coeffs": ctx.target_spec.coeffs.tolist(), "xi": ctx.target_spec.xi})
    print(f"wrote {len(members)} tasks and the target to {out}")
    return 0


def _run(cfg: ExperimentConfig) -> int:
    res = run_sweep(cfg)
    for exp, path in res.paths.items():
        print(f"{exp}: {len(res.rows[exp])} rows -> {path}")
        for g, v in res.medians(exp).items():
            print(f"  {g}: median {v:.6g}")
        if exp in res.slopes:
            slope, se = res.slopes[exp]
            print(f"  log-log slope {slope:.4f} (stderr {se:.4f})")
    for row in res.errors():
        print(f"error in {row['experiment']} seed={row['seed']}: {row['error']}", file=sys.stderr)
    return 0


def _single(name):
    def run(args) -> int:
        cfg = load_config(args).replace(experiments=[name])
        return _run(cfg)
    return run


def cmd_rfe(args) -> int:
    cfg = load_config(args).replace(experiments=["rfe"])
    if not args.reward_file:
        return _run(cfg)
    reward = np.array(mio.load(args.reward_file)["reward"], dtype=float)
    policy, v, v_star = plan_revealed_reward(cfg, reward)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    mio.dump(mio.policy_to_dict(policy), out / f"rfe_policy_{cfg.tag}.json")
    print(f"value {v:.6g}  optimal {v_star:.6g}  suboptimality {v_star - v:.6g}")
    return 0


def cmd_sweep(args) -> int:
    return _run(load_config(args))


def cmd_verify(args) -> int:
    from .checks import verify

    scope = "all" if args.all else "statistical" if args.statistical else "fast"
    results = verify(scope, args.mdp_file or ())
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("all checks passed" if ok else f"{sum(not r.passed for r in results)} check(s) failed")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "gen": (cmd_gen, "generate the task family, behavior policies and target as JSON"),
        "upstream": (_single("upstream"), "run the upstream representation-learning sweep"),
        "rfe": (cmd_rfe, "run downstream reward-free exploration"),
        "offline": (_single("offline"), "run downstream pessimistic value iteration"),
        "online": (_single("online"), "run downstream LSVI-UCB"),
        "sweep": (cmd_sweep, "run every experiment listed in the config"),
    }
    for name, (fn, help_text) in handlers.items():
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        p.set_defaults(func=fn)
        if name == "rfe":
            p.add_argument("--reward-file", help="JSON with a 'reward' table (H, S, K) to plan for")
    p = sub.add_parser("verify", help="run the invariant battery")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--fast", action="store_true", help="exact identities only (default)")
    group.add_argument("--statistical", action="store_true", help="seeded pessimism/optimism/scaling suites")
    group.add_argument("--all", action="store_true")
    p.add_argument("--mdp-file", action="append", help="also check the distribution invariants of this file")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
