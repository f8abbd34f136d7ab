"""Command-line entry points: simulate, estimate, test, mc, rl-ope.

Configuration comes from a JSON or TOML file (--config) whose keys mirror
StudyConfig / RlStudyConfig fields; --seed, --workers, and --reps override
the file.  Results are written to --out as JSON (plus CSV where tabular).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from .data import load_csv, write_csv
from .inference import LongRunVarianceConfig
from .mc import (
    DgpConfig,
    RlStudyConfig,
    StudyConfig,
    analyze_frame,
    build_study_frame,
    random_mdp,
    report,
    run_replications,
    run_rl_ope,
    simulate_dgp,
)


def load_config(path) -> dict:
    if path is None:
        return {}
    if str(path).endswith(".toml"):
        import tomllib

        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _pick(cfg: dict, cls):
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {k: v for k, v in cfg.items() if k in names}
    if issubclass(cls, StudyConfig) and "bandwidth" in kwargs and kwargs["bandwidth"] is not None:
        kwargs["bandwidth"] = LongRunVarianceConfig(
            bandwidth=int(kwargs["bandwidth"]), rule="fixed"
        )
    elif issubclass(cls, StudyConfig):
        kwargs.pop("bandwidth", None)
    return cls(**kwargs)


def _write_json(path, payload) -> None:
    def default(obj):
        if hasattr(obj, "to_dict"):
            return obj.to_dict()
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, (np.floating, np.integer)):
            return obj.item()
        return str(obj)

    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, default=default)
        fh.write("\n")


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    dgp = _pick({**cfg, "n": args.n or cfg.get("n", 5000), "seed": args.seed}, DgpConfig)
    ds = simulate_dgp(dgp)
    write_csv(ds, args.out)
    print(f"wrote {ds.n} rows to {args.out}")
    return 0


def _analysis_from_args(args):
    cfg = _pick(load_config(args.config), StudyConfig)
    ds = load_csv(args.data, {"y": "outcome", "z": "endogenous"})
    frame = build_study_frame(ds, L=3)
    return cfg, analyze_frame(cfg, frame, init_seed=args.seed)


def cmd_estimate(args) -> int:
    cfg, analysis = _analysis_from_args(args)
    payload = {
        "phi_hat": analysis.phi_hat,
        "phi_plugin": analysis.phi_plugin,
        "sigma2": analysis.sigma2,
        "q_n": analysis.fitted.q_n,
        "n": analysis.frame.n,
        "k_n": cfg.k_n,
        "config": cfg.to_dict(),
    }
    if args.ci:
        ci = analysis.confidence_interval()
        payload["ci"] = ci.to_dict()
    _write_json(args.out, payload)
    print(f"phi_hat = {analysis.phi_hat:.6f}" + (
        f", {int(100 * 0.95)}% CI [{payload['ci']['lo']:.6f}, {payload['ci']['hi']:.6f}]"
        if args.ci else ""
    ))
    return 0


def cmd_test(args) -> int:
    cfg, analysis = _analysis_from_args(args)
    result = analysis.test(args.phi0)
    payload = result.to_dict() | {"config": cfg.to_dict(), "phi_hat": analysis.phi_hat}
    _write_json(args.out, payload)
    print(f"S = {result.statistic:.4f}, p = {result.p_value:.4f} at phi0 = {args.phi0}")
    return 0


def cmd_mc(args) -> int:
    cfg = _pick(load_config(args.config), StudyConfig)
    summary = run_replications(cfg, R=args.reps, workers=args.workers,
                               master_seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "summary.json"), summary.to_dict())
    with open(os.path.join(args.out, "table.txt"), "w", encoding="utf-8") as fh:
        fh.write(report(summary, "text"))
    with open(os.path.join(args.out, "table.csv"), "w", encoding="utf-8") as fh:
        fh.write(report(summary, "csv"))
    ok = [r for r in summary.records if "error" not in r]
    if ok:
        with open(os.path.join(args.out, "reps.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(ok[0]))
            writer.writeheader()
            writer.writerows(ok)
    print(report(summary, "text"))
    return 0


def cmd_rl_ope(args) -> int:
    raw = load_config(args.config)
    cfg = _pick(raw, RlStudyConfig)
    n_states = raw.get("n_states", 3)
    n_actions = raw.get("n_actions", 2)
    mdp_seed = raw.get("mdp_seed", 0)
    P, r_table, target = random_mdp(n_states, n_actions, seed=mdp_seed)
    behavior = np.full((n_states, n_actions), 1.0 / n_actions)
    result = run_rl_ope(P, r_table, behavior, target, cfg, seed=args.seed)
    payload = {
        "values": result["values"],
        "oracle_values": result["oracle_values"],
        "ci_state": result.get("ci_state"),
        "ci": result["ci"].to_dict() if "ci" in result else None,
        "config": dataclasses.asdict(cfg) | {
            "n_states": n_states, "n_actions": n_actions, "mdp_seed": mdp_seed,
        },
    }
    _write_json(args.out, payload)
    for s, (v, o) in enumerate(zip(result["values"], result["oracle_values"])):
        print(f"state {s}: value = {v:.4f} (oracle {o:.4f})")
    if "ci" in result:
        ci = result["ci"]
        print(f"CI for state {result['ci_state']}: [{ci.lo:.4f}, {ci.hi:.4f}]")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sievemd",
        description="Sieve minimum-distance estimation and GN-QLR inference",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate the study DGP to CSV")
    p.add_argument("--config", default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="fit the model on a CSV and estimate the functional")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ci", action="store_true", help="invert the QLR test for a 95%% CI")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("test", help="GN-QLR test of H0: phi = phi0 on a CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--phi0", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("mc", help="replication study")
    p.add_argument("--config", default=None)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("rl-ope", help="off-policy evaluation with a QLR interval")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rl_ope)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
