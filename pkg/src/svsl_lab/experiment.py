"""Experiment driver: runs methods over seeds and writes reports.

All artifacts are deterministic functions of (seed, config, dataset): floats
are serialized with repr round-tripping, arrays as base64 float64 blobs, and
manifests carry no timestamps, so identical runs produce identical bytes.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from svsl_lab.config import Config
from svsl_lab.environment import FirefightersEnv
from svsl_lab.persist import content_hash, decode_array, dumps, encode_array, load_json, save_json

SOCIETY_SEED = 0  # datasets are shared across methods and run seeds


def make_env(cfg: Config) -> FirefightersEnv:
    if cfg.env != "ff":
        raise ValueError(f"unknown environment {cfg.env!r}")
    return FirefightersEnv(fi5_means_severe=cfg.fi5_means_severe,
                           horizon=cfg.horizon)


def make_society_and_data(env, cfg: Config, society_seed: int = SOCIETY_SEED):
    from svsl_lab.society import build_dataset, build_society

    rng = np.random.default_rng(society_seed)
    society = build_society(env, cfg, rng)
    train, test = build_dataset(society, cfg, rng)
    return society, train, test


# ----------------------------------------------------------------- checkpoints

def model_checkpoint(model, bank=None, lagrange=None, theta_opt=None,
                     omega_opt=None, max_coherence=None) -> dict:
    payload = {
        "version": 1,
        "kind": "reward-model",
        "mode": model.mode,
        "num_cells": model.num_cells,
        "num_values": model.num_values,
        "theta": encode_array(model.params),
    }
    if bank is not None:
        payload["omega"] = encode_array(bank.omega)
    if lagrange is not None:
        payload["lambda"] = encode_array(lagrange.multipliers)
    if max_coherence is not None:
        payload["chr_star"] = encode_array(max_coherence)
    for name, opt in (("theta_opt", theta_opt), ("omega_opt", omega_opt)):
        if opt is not None:
            state = opt.state_dict()
            payload[name] = {
                "m": encode_array(state["m"]),
                "v": encode_array(state["v"]),
                "t": state["t"],
            }
    return payload


def q_checkpoint(learner) -> dict:
    return {
        "version": 1,
        "kind": "q-model",
        "grid_points": len(learner.q.grid),
        "q": encode_array(learner.q.q),
        "target": encode_array(learner.target.q),
        "updates": learner.updates,
        "greedy_policy": encode_array(learner.q.greedy_table().astype(np.float64)),
    }


def solution_export(solution, bank) -> dict:
    weights = bank.weights()
    live = solution.live_clusters()
    scores = solution.scores or {}
    return {
        "assignment": {str(j): int(c) for j, c in solution.assignment().items()},
        "live_clusters": live,
        "weights": {str(l): [float(x) for x in weights[l]] for l in live},
        "scores": {
            k: ([float(x) for x in v] if isinstance(v, np.ndarray) else
                (float(v) if isinstance(v, (int, float, np.floating)) else v))
            for k, v in scores.items()
        },
    }


# ------------------------------------------------------------------ evaluation

def held_out_scores(model, bank, solution, test_dataset, cfg) -> dict:
    from svsl_lab.clustering import EMEngine, EMSources

    engine = EMEngine(EMSources.offline(test_dataset), model, bank, cfg)
    return engine.score(solution)


def policy_fronts(env, qtable, bank, solution, cfg):
    """(all, cls) fronts: every candidate weight row vs live clusters only."""
    from svsl_lab.eql import policy_vector_return
    from svsl_lab.fronts import pareto_filter, snap_returns

    weights = bank.weights()
    live = solution.live_clusters()
    all_returns = snap_returns(
        [policy_vector_return(env, qtable, w) for w in weights]
    )
    cls_returns = all_returns[live]
    return (all_returns, pareto_filter(all_returns),
            cls_returns, pareto_filter(cls_returns))


def front_metrics(returns, front, oracle) -> dict:
    from svsl_lab.fronts import hypervolume, mul

    ref = np.zeros(oracle.points.shape[1])
    return {
        "pf_size": int(len(front)),
        "hv": float(hypervolume(front, ref)),
        "mul": float(mul(returns, oracle)),
    }


def metric_row(seed, method, scores, all_metrics=None, cls_metrics=None) -> dict:
    row = {
        "seed": seed,
        "method": method,
        "L": int(scores["n_clusters"]),
        "repr": float(scores["representativeness"]),
    }
    for i, c in enumerate(scores["coherence"]):
        row[f"chr_v{i + 1}"] = float(c)
    row["conc"] = float(scores["conciseness"])
    row["ray_turi"] = float(scores["gamma"])
    for tag, metrics in (("all", all_metrics), ("cls", cls_metrics)):
        if metrics:
            for k, v in metrics.items():
                row[f"{k}_{tag}"] = v
    return row


def run_method(method: str, seed: int, cfg: Config | None = None,
               out_dir: str | None = None, total_steps=None) -> dict:
    """One (method, seed) cell: returns the metric row, saves artifacts."""
    from svsl_lab.fronts import dp_oracle_front, simplex_grid

    cfg = cfg or Config.preset(method)
    env = make_env(cfg)
    society, train, test = make_society_and_data(env, cfg)
    oracle = dp_oracle_front(env, simplex_grid(env.num_values,
                                               cfg.weight_grid_points))
    artifacts = {}

    if method == "eql":
        from svsl_lab.estimators import EnvelopeQ

        est = EnvelopeQ(seed=seed, config=cfg if total_steps is None
                        else replace(cfg, T=total_steps))
        est.fit(env)
        returns = est.front()
        from svsl_lab.fronts import pareto_filter

        front = pareto_filter(returns)
        metrics = front_metrics(returns, front, oracle)
        row = {"seed": seed, "method": "eql", "L": 0, "repr": float("nan"),
               "chr_v1": float("nan"), "chr_v2": float("nan"),
               "conc": float("nan"), "ray_turi": float("nan")}
        for k, v in metrics.items():
            row[f"{k}_all"] = v
            row[f"{k}_cls"] = v
        artifacts["q_checkpoint"] = q_checkpoint_from_table(est.q_)
        artifacts["front"] = {"points": front.tolist()}
    elif method in ("svsl", "svslp", "pbmorl"):
        result, qtable = _fit_clustering_method(method, seed, cfg, env, society,
                                                train, total_steps)
        scores = held_out_scores(result.model, result.bank, result.solution,
                                 test, cfg)
        all_r, all_f, cls_r, cls_f = policy_fronts(env, qtable, result.bank,
                                                   result.solution, cfg)
        row = metric_row(seed, method, scores,
                         front_metrics(all_r, all_f, oracle),
                         front_metrics(cls_r, cls_f, oracle))
        artifacts["solution"] = solution_export(result.solution, result.bank)
        artifacts["model_checkpoint"] = model_checkpoint(
            result.model, result.bank,
            getattr(result.solution, "lagrange", None),
            getattr(result.solution, "theta_opt", None),
            getattr(result.solution, "omega_opt", None),
            max_coherence=result.max_coherence,
        )
        artifacts["q_checkpoint"] = q_checkpoint_from_table(qtable)
        artifacts["timeline"] = result.timeline
        artifacts["fronts"] = {"all": all_f.tolist(), "cls": cls_f.tolist()}
    else:
        raise ValueError(f"unknown method {method!r}")

    if out_dir is not None:
        cell_dir = os.path.join(out_dir, method, f"seed_{seed}")
        os.makedirs(cell_dir, exist_ok=True)
        manifest = {
            "config": cfg.to_json(),
            "seed": seed,
            "method": method,
            "env_hash": content_hash(env.dump_csv()),
            "row": row,
            "artifacts": sorted(artifacts),
        }
        save_json(os.path.join(cell_dir, "manifest.json"), manifest)
        for name, payload in artifacts.items():
            save_json(os.path.join(cell_dir, f"{name}.json"), payload)
    return row


def q_checkpoint_from_table(qtable) -> dict:
    return {
        "version": 1,
        "kind": "q-model",
        "grid_points": len(qtable.grid),
        "q": encode_array(qtable.q),
        "greedy_policy": encode_array(qtable.greedy_table().astype(np.float64)),
    }


def _fit_clustering_method(method, seed, cfg, env, society, train, total_steps):
    """Returns (result-with-model/bank/solution, qtable for policy fronts)."""
    if method == "svslp":
        from svsl_lab.orchestrator import run_svslp

        result = run_svslp(env, society, train, cfg, seed=seed,
                           total_steps=total_steps)
        return result, result.qlearner.q
    if method == "pbmorl":
        from svsl_lab.orchestrator import run_pbmorl_baseline

        run_cfg = cfg if total_steps is None else replace(cfg, T=total_steps)
        result = run_pbmorl_baseline(env, society, train, run_cfg, seed=seed)
        return result, result.qlearner.q
    # static svsl, then a policy trained against the learned reward
    from svsl_lab.clustering import EMEngine, EMSources, run_svsl
    from svsl_lab.eql import EQLConfig, train_eql
    from svsl_lab.models import RewardVectorModel, ValueSystemBank
    from svsl_lab.orchestrator import RunResult

    rng = np.random.default_rng(seed)
    features = env.feature_matrix(cfg.onehot) if cfg.reward_mode == "mlp" else None
    model = RewardVectorModel(env.num_states * env.num_actions, env.num_values,
                              mode=cfg.reward_mode, features=features, rng=rng)
    bank = ValueSystemBank(cfg.L_max, env.num_values, rng=rng)
    engine = EMEngine(EMSources.offline(train), model, bank, cfg)
    sol = run_svsl(engine, rng, iterations=cfg.I)
    engine._load(sol)
    eql_cfg = EQLConfig(
        total_steps=cfg.T if total_steps is None else total_steps,
        lr=cfg.alpha_eql, batch_size=cfg.b_pi, buffer_capacity=cfg.S_e,
        grad_steps=cfg.T_pi,
        tau=cfg.tau_or_tu if cfg.tau_or_tu < 1 else None,
        hard_sync_every=int(cfg.tau_or_tu) if cfg.tau_or_tu >= 1 else None,
        eps0=cfg.eps0, epsinf=cfg.epsinf, h0=cfg.h0, hinf=cfg.hinf,
        num_envelope_weights=cfg.N_w, use_stored_weights=cfg.U_w,
        use_per=cfg.alpha_per > 0, alpha_per=cfg.alpha_per or 0.6,
        eps_per=cfg.eps_per, recent_span=max(cfg.b_pi, cfg.K),
        episode_weight_points=cfg.weight_grid_points,
    )
    qtable = train_eql(env, eql_cfg, rng, reward_table=model.table())
    result = RunResult(solution=sol, qlearner=None, model=model, bank=bank)
    return result, qtable


REPORT_FIELDS = ["seed", "method", "L", "repr", "chr_v1", "chr_v2", "conc",
                 "ray_turi", "pf_size_all", "hv_all", "mul_all", "pf_size_cls",
                 "hv_cls", "mul_cls"]


def write_report(rows, out_dir):
    """CSV report plus aggregate statistics and cluster-count histograms."""
    os.makedirs(out_dir, exist_ok=True)
    rows = sorted(rows, key=lambda r: (r["method"], r["seed"]))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                         for k, v in row.items()})
    with open(os.path.join(out_dir, "report.csv"), "w") as fh:
        fh.write(buf.getvalue())

    methods = sorted({r["method"] for r in rows})
    aggregates = {}
    histograms = {}
    for method in methods:
        sub = [r for r in rows if r["method"] == method]
        agg = {}
        for key in REPORT_FIELDS:
            if key in ("seed", "method"):
                continue
            vals = np.array([float(r.get(key, float("nan"))) for r in sub])
            agg[key] = {"mean": float(np.nanmean(vals)) if len(vals) else None,
                        "std": float(np.nanstd(vals)) if len(vals) else None}
        aggregates[method] = agg
        ls = [int(r["L"]) for r in sub]
        histograms[method] = {str(l): ls.count(l) / len(ls) for l in sorted(set(ls))}
    save_json(os.path.join(out_dir, "aggregates.json"), aggregates)
    save_json(os.path.join(out_dir, "cluster_histograms.json"), histograms)
    return os.path.join(out_dir, "report.csv")


def run_experiment(methods, seeds, out_dir, cfg_by_method=None, workers=1,
                   total_steps=None):
    """Full grid of (method, seed) cells; failures are recorded, not fatal."""
    jobs = [(m, s) for m in methods for s in seeds]
    rows = []
    failures = []

    def _run(job):
        method, seed = job
        cfg = (cfg_by_method or {}).get(method)
        return run_method(method, seed, cfg=cfg, out_dir=out_dir,
                          total_steps=total_steps)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_run_job, job, (cfg_by_method or {}).get(job[0]),
                                   out_dir, total_steps): job for job in jobs}
            for fut, job in futures.items():
                try:
                    rows.append(fut.result())
                except Exception as exc:  # recorded, run continues
                    failures.append({"method": job[0], "seed": job[1],
                                     "error": str(exc)})
    else:
        for job in jobs:
            try:
                rows.append(_run(job))
            except Exception as exc:
                failures.append({"method": job[0], "seed": job[1],
                                 "error": str(exc)})
    report = write_report(rows, out_dir)
    if failures:
        save_json(os.path.join(out_dir, "failures.json"), failures)
    return rows, failures, report


def _run_job(job, cfg, out_dir, total_steps):
    method, seed = job
    return run_method(method, seed, cfg=cfg, out_dir=out_dir,
                      total_steps=total_steps)
