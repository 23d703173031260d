"""Command-line interface.

Subcommands: simulate, fit-nhpi, train, evaluate, reference, plot-data.
A --config file (JSON) overrides RunConfig fields for train/reference.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .harness import (
    RunConfig,
    evaluate,
    export_plot_data,
    run_reference,
    run_sedrl,
    simulate_trajectories,
)
from .nhpi import NhpiConfig, NhpiModel, NhpiTrainConfig, save_checkpoint, train_nhpi
from .tpp import read_jsonl


def _load_run_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            overrides.update(json.load(fh))
    overrides.pop("kind", None)
    for key in ("value_widths", "policy_widths"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    if args.steps is not None:
        overrides["max_env_steps"] = args.steps
    return RunConfig.for_task(args.task, seed=args.seed, **overrides)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="eventrl",
        description="Event-driven model-based RL over marked temporal point processes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="ground-truth Hawkes rollouts to JSONL")
    p.add_argument("--task", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--policy", choices=("noop", "random"), default="noop")
    p.add_argument("--out", required=True, help="output JSONL file")

    p = sub.add_parser("fit-nhpi", help="fit the intensity model on a JSONL file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--attn-layers", type=int, default=2)
    p.add_argument("--key-dim", type=int, default=16)
    p.add_argument("--mc-samples", type=int, default=32)

    p = sub.add_parser("train", help="run the full training loop")
    p.add_argument("--task", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON file of RunConfig overrides")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("evaluate", help="frozen-policy evaluation of a checkpoint")
    p.add_argument("--checkpoint", default=None, help="directory with nhpi.pt/agent.pt")
    p.add_argument("--task", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--policy", choices=("noop", "random"), default=None,
                   help="evaluate a reference policy instead of a checkpoint")

    p = sub.add_parser("reference", help="roll a reference policy with full metrics")
    p.add_argument("--task", required=True)
    p.add_argument("--policy", choices=("noop", "random"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("plot-data", help="aligned smoothed curves from metrics logs")
    p.add_argument("logs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=1)

    args = parser.parse_args(argv)

    if args.command == "simulate":
        n = simulate_trajectories(args.task, args.episodes, args.seed, args.out,
                                  policy=args.policy)
        print(f"wrote {n} trajectories to {args.out}")
    elif args.command == "fit-nhpi":
        seqs, n_types = read_jsonl(args.data)
        cfg = NhpiConfig(n_types=n_types, embed_dim=args.embed_dim,
                         hidden_dim=args.hidden_dim, heads=args.heads,
                         attn_layers=args.attn_layers, key_dim=args.key_dim,
                         value_dim=args.key_dim)
        model = NhpiModel(cfg, seed=args.seed)
        curve = train_nhpi(model, seqs, NhpiTrainConfig(
            epochs=args.epochs, lr=args.lr, mc_samples=args.mc_samples,
            seed=args.seed))
        os.makedirs(args.out, exist_ok=True)
        save_checkpoint(model, os.path.join(args.out, "nhpi.pt"))
        with open(os.path.join(args.out, "nll_curve.csv"), "w") as fh:
            fh.write("epoch,mean_nll\n")
            for i, v in enumerate(curve):
                fh.write(f"{i},{v:.17g}\n")
        print(f"final mean NLL {curve[-1]:.6f}; checkpoint in {args.out}")
    elif args.command == "train":
        cfg = _load_run_config(args)
        out = run_sedrl(cfg, args.out)
        rets = out["returns"]
        tail = rets[-max(1, len(rets) // 10):]
        print(f"episodes {len(rets)}; mean return (last 10%) {tail.mean():.3f}; "
              f"metrics at {out['metrics']}")
    elif args.command == "evaluate":
        if args.checkpoint is None and args.policy is None:
            parser.error("evaluate needs --checkpoint or --policy")
        out = evaluate(args.checkpoint, args.task, args.episodes, args.seed,
                       policy=args.policy)
        print(json.dumps({"mean": out["mean"], "std": out["std"],
                          "returns": out["returns"].tolist()}))
    elif args.command == "reference":
        cfg = _load_run_config(args)
        out = run_reference(cfg, args.policy, args.out)
        print(f"episodes {len(out['returns'])}; mean return "
              f"{out['returns'].mean():.3f}; metrics at {out['metrics']}")
    elif args.command == "plot-data":
        n = export_plot_data(args.logs, args.out, window=args.window)
        print(f"wrote {n} rows to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
