"""Command line interface: society generation, runs, evaluation, serving."""

from __future__ import annotations

import argparse
import json
import os
import sys
import threading

import numpy as np


def cmd_gen_society(args):
    from svsl_lab.config import Config
    from svsl_lab.experiment import make_env
    from svsl_lab.persist import content_hash
    from svsl_lab.society import build_dataset, build_society, save_dataset_jsonl

    cfg = Config.load(args.config) if args.config else Config.ff_svslp()
    env = make_env(cfg)
    rng = np.random.default_rng(args.seed)
    society = build_society(env, cfg, rng)
    train, test = build_dataset(society, cfg, rng)
    os.makedirs(args.out, exist_ok=True)
    dump = env.dump_csv()
    with open(os.path.join(args.out, "env_dump.csv"), "w") as fh:
        fh.write(dump)
    header = {
        "env": cfg.env,
        "env_hash": content_hash(dump),
        "seed": args.seed,
        "num_values": env.num_values,
        "agents": society.num_agents,
        "pairs_per_kind": cfg.pairs_per_kind,
        "rational_fraction": cfg.rational_fraction,
        "rational_epsilon": cfg.rational_epsilon,
    }
    save_dataset_jsonl(os.path.join(args.out, "train.jsonl"), train, header)
    save_dataset_jsonl(os.path.join(args.out, "test.jsonl"), test, header)
    front = {
        "points": society.front.points.tolist(),
        "true_weights": [a.true_weight.tolist() for a in society.agents],
    }
    with open(os.path.join(args.out, "society.json"), "w") as fh:
        json.dump(front, fh, sort_keys=True, indent=2)
    print(f"society written to {args.out}: {society.num_agents} agents, "
          f"{len(train.records)} train / {len(test.records)} test records")


def cmd_run(args):
    from svsl_lab.config import Config
    from svsl_lab.experiment import run_method

    cfg = Config.load(args.config) if args.config else Config.preset(args.method)
    row = run_method(args.method, args.seed, cfg=cfg, out_dir=args.out,
                     total_steps=args.total_steps)
    print(json.dumps(row, sort_keys=True, default=float))


def cmd_eval(args):
    from svsl_lab.experiment import write_report
    from svsl_lab.persist import load_json

    rows = []
    for method in sorted(os.listdir(args.run)):
        mdir = os.path.join(args.run, method)
        if not os.path.isdir(mdir):
            continue
        for cell in sorted(os.listdir(mdir)):
            manifest = os.path.join(mdir, cell, "manifest.json")
            if os.path.exists(manifest):
                rows.append(load_json(manifest)["row"])
    if not rows:
        print("no run manifests found", file=sys.stderr)
        return 1
    report = write_report(rows, args.run)
    print(f"report written to {report} ({len(rows)} rows)")
    return 0


def cmd_oracle_front(args):
    from svsl_lab.config import Config
    from svsl_lab.experiment import make_env
    from svsl_lab.fronts import dp_oracle_front, hypervolume, simplex_grid

    cfg = Config.load(args.config) if args.config else Config.ff_svslp()
    env = make_env(cfg)
    front = dp_oracle_front(env, simplex_grid(env.num_values,
                                              cfg.weight_grid_points))
    ref = np.zeros(env.num_values)
    out = {
        "points": front.points.tolist(),
        "hypervolume": hypervolume(front.points, ref),
        "weights": [w.tolist() for w in front.weights],
    }
    print(json.dumps(out, indent=2))


def cmd_serve(args):
    import uvicorn

    from svsl_lab.config import Config
    from svsl_lab.experiment import make_env, make_society_and_data
    from svsl_lab.orchestrator import run_svslp
    from svsl_lab.service import HumanAnswerSource, QueryGateway, create_app

    cfg = Config.load(args.config) if args.config else Config.ff_svslp()
    env = make_env(cfg)
    society, train, _ = make_society_and_data(env, cfg)
    value_names = ["professionalism", "proximity"][: env.num_values]
    gateway = QueryGateway(value_names, in_flight_ttl=args.timeout)
    human_agents = [int(x) for x in args.human_agents.split(",") if x != ""]
    sources = {j: HumanAnswerSource(gateway, timeout=args.timeout)
               for j in human_agents}
    # seed the gateway's agent list so /api/agents shows them before queries
    for j in human_agents:
        gateway.pending.setdefault(j, __import__("collections").deque())

    def status_hook(t, sol, scores, orch):
        weights = orch.bank.weights()
        gateway.update_status(
            t, cfg.T,
            {str(l): weights[l].tolist() for l in sol.live_clusters()},
            {"representativeness": scores["representativeness"],
             "coherence": [float(c) for c in scores["coherence"]],
             "conciseness": scores["conciseness"],
             "gamma": scores["gamma"]},
        )

    def worker():
        result = run_svslp(env, society, train, cfg, seed=args.seed,
                           answer_sources=sources, status_hook=status_hook)
        if args.run:
            from svsl_lab.experiment import (model_checkpoint, q_checkpoint,
                                             solution_export)
            from svsl_lab.persist import save_json

            os.makedirs(args.run, exist_ok=True)
            save_json(os.path.join(args.run, "solution.json"),
                      solution_export(result.solution, result.bank))
            save_json(os.path.join(args.run, "model_checkpoint.json"),
                      model_checkpoint(result.model, result.bank,
                                       result.solution.lagrange,
                                       result.solution.theta_opt,
                                       result.solution.omega_opt))
            save_json(os.path.join(args.run, "q_checkpoint.json"),
                      q_checkpoint(result.qlearner))
        print("run finished")

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    app = create_app(gateway, value_names, token=args.token)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="svsl-lab",
        description="social value system learning experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-society", help="generate a synthetic society")
    p.add_argument("--env", default="ff", choices=["ff"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gen_society)

    p = sub.add_parser("run", help="run one method for one seed")
    p.add_argument("--method", required=True,
                   choices=["eql", "svsl", "pbmorl", "svslp"])
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs")
    p.add_argument("--total-steps", type=int, default=None,
                   help="override the configured step budget")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="aggregate a directory of runs")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle-front", help="print the exact scalarization front")
    p.add_argument("--env", default="ff", choices=["ff"])
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_oracle_front)

    p = sub.add_parser("serve", help="serve preference queries for a live run")
    p.add_argument("--run", default=None, help="directory for final artifacts")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--human-agents", default="0")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--token", default=None)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())
