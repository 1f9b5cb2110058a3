"""EM-based value system clustering with an evolutionary solution memory.

The inner cycle alternates hard agent-to-cluster assignment (E-step), cluster
simplification, and Lagrangian gradient descent on the combined value-system
and grounding losses (M-step), with multipliers steering optimization toward
maximal per-value coherence. The outer loop keeps a small memory of candidate
solutions, selects by rank, occasionally mutates, refines with the inner
cycle, and inserts back under Pareto dominance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from svsl_lab.metrics import (
    Dataset,
    cluster_labels,
    conciseness,
    gamma_index,
    grounding_coherence,
    label_mismatch,
    qualitative_label,
    representativeness,
)
from svsl_lab.models import (
    AdamOptimizer,
    LagrangeState,
    RewardVectorModel,
    ValueSystemBank,
    grounding_loss_grad,
    value_system_loss_grad,
)

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """Raised when the accuracy-threshold mode exhausts its iteration cap."""

    def __init__(self, message, best):
        super().__init__(message)
        self.best = best


@dataclass
class EMSources:
    """Training rows for one EM engine: a static part plus an online part.

    ``static_rows`` and ``buffer_rows`` map agent id to row indices into
    ``dataset``; the online part may be empty (offline mode).
    """

    dataset: Dataset
    static_rows: dict
    buffer_rows: dict

    @classmethod
    def offline(cls, dataset: Dataset) -> "EMSources":
        rows = {int(j): dataset.rows_of(int(j)) for j in dataset.agents()}
        return cls(dataset=dataset, static_rows=rows, buffer_rows={j: np.array([], int) for j in rows})

    def agents(self):
        return sorted(self.static_rows)

    def pool_rows(self, agent) -> np.ndarray:
        return np.concatenate([self.static_rows[agent], self.buffer_rows[agent]])


class Solution:
    """One candidate social value system with its optimizer and scores."""

    def __init__(self, beta, theta, omega, lagrange, theta_opt, omega_opt):
        self.beta = np.asarray(beta, dtype=np.int64)
        self.theta = np.asarray(theta, dtype=np.float64)
        self.omega = np.asarray(omega, dtype=np.float64)
        self.lagrange = lagrange
        self.theta_opt = theta_opt
        self.omega_opt = omega_opt
        self.scores = None

    def live_clusters(self):
        return sorted(int(c) for c in np.unique(self.beta))

    @property
    def n_clusters(self):
        return len(np.unique(self.beta))

    def clone(self) -> "Solution":
        out = Solution(
            self.beta.copy(), self.theta.copy(), self.omega.copy(),
            self.lagrange.clone(), self.theta_opt.clone(), self.omega_opt.clone(),
        )
        out.scores = dict(self.scores) if self.scores else None
        return out

    def assignment(self) -> dict:
        return {j: int(c) for j, c in enumerate(self.beta)}


class EMEngine:
    """Shared machinery binding a model architecture to a data source."""

    def __init__(self, sources: EMSources, model: RewardVectorModel,
                 bank: ValueSystemBank, cfg, tol: float = 1e-6):
        self.sources = sources
        self.model = model
        self.bank = bank
        self.cfg = cfg
        self.tol = tol
        self.agent_list = sources.agents()
        # shared estimate of the best coherence the data admits per value;
        # accumulated over every refinement of every candidate solution
        self.max_coherence = np.zeros(model.num_values)

    # ------------------------------------------------------------------ setup

    def new_solution(self, rng) -> Solution:
        """Random parameters, an initial hard assignment, and fresh state."""
        cfg = self.cfg
        if self.model.mode == "tabular-tanh":
            theta = np.zeros(self.model.n_params)
        else:
            scale = 0.05
            theta = rng.normal(0.0, scale, size=self.model.n_params)
        omega = rng.standard_normal((cfg.L_max, self.model.num_values))
        lagrange = LagrangeState(
            self.model.num_values, initial=cfg.lambda_init,
            decay=cfg.gamma_lambda, rate=cfg.alpha_lambda, smoothing=cfg.r_lambda,
        )
        theta_opt = AdamOptimizer(len(theta), cfg.alpha_theta, cfg.weight_decay)
        omega_opt = AdamOptimizer(omega.size, cfg.alpha_omega, cfg.weight_decay)
        # a random assignment seeds cluster diversity: an initial hard E-step
        # would tie everywhere under a blank grounding and collapse everyone
        # into the first cluster
        beta0 = rng.integers(0, cfg.L_max, size=len(self.agent_list))
        sol = Solution(beta0, theta, omega, lagrange, theta_opt, omega_opt)
        self._load(sol)
        return sol

    def _load(self, sol: Solution):
        self.model.set_params(sol.theta)
        self.bank.set_omega(sol.omega)

    def alignments(self) -> np.ndarray:
        return self.sources.dataset.trajectories.alignments(self.model.table())

    # ------------------------------------------------------------------ steps

    def e_step(self, sol: Solution, extra_rows: dict | None = None,
               candidates=None) -> np.ndarray:
        """Assign each agent to its least-discordant cluster (ties: lowest).

        Candidates default to the solution's live clusters: structure changes
        only through merges and mutations, so vacated random rows cannot
        spontaneously recapture agents.
        """
        self._load(sol)
        data = self.sources.dataset
        align = self.alignments()
        if candidates is None:
            candidates = sol.live_clusters()
        candidates = np.asarray(sorted(candidates), dtype=np.int64)
        labels = cluster_labels(data, align, self.bank.weights()[candidates],
                                self.tol)
        y_vs = data.columns()["y_vs"]
        beta = np.zeros(len(self.agent_list), dtype=np.int64)
        for k, j in enumerate(self.agent_list):
            rows = self.sources.static_rows[j]
            if extra_rows and len(extra_rows.get(j, ())):
                rows = np.concatenate([rows, extra_rows[j]])
            if len(rows) == 0:
                beta[k] = sol.beta[k]
                continue
            mism = label_mismatch(labels[:, rows], y_vs[rows]).mean(axis=1)
            beta[k] = int(candidates[np.argmin(mism)])
        return beta

    def merge_clusters(self, sol: Solution, rng) -> None:
        """Fuse live clusters whose weights differ by less than the threshold.

        Agents move to the more populated cluster (ties to the lower index)
        and the vacated row is re-randomized.
        """
        threshold = self.cfg.merge_threshold
        weights = self.bank.weights()
        changed = True
        while changed:
            changed = False
            live = sol.live_clusters()
            counts = {l: int(np.sum(sol.beta == l)) for l in live}
            for i, l in enumerate(live):
                for lp in live[i + 1:]:
                    if np.max(np.abs(weights[l] - weights[lp])) < threshold:
                        keep, drop = (l, lp) if counts[l] >= counts[lp] else (lp, l)
                        sol.beta[sol.beta == drop] = keep
                        self.bank.randomize_row(drop, rng)
                        weights = self.bank.weights()
                        changed = True
                        break
                if changed:
                    break
        sol.omega = self.bank.omega.copy()

    def _sample_rows(self, pools: dict, size: int, rng) -> dict:
        out = {}
        for j in self.agent_list:
            pool = pools[j]
            if len(pool) == 0:
                out[j] = np.array([], dtype=np.int64)
            elif len(pool) <= size:
                out[j] = np.asarray(pool, dtype=np.int64)
            else:
                out[j] = rng.choice(pool, size=size, replace=False)
        return out

    def _batch_gradient_step(self, sol: Solution, rows: np.ndarray):
        """One Lagrangian descent step on the given record rows."""
        data = self.sources.dataset
        cols = data.columns()
        table = self.model.table()
        align = data.trajectories.alignments(table)
        a_idx, b_idx = cols["a"][rows], cols["b"][rows]
        deltas = align[a_idx] - align[b_idx]
        agents = cols["agent"][rows]
        weights = self.bank.weights()
        agent_pos = {j: k for k, j in enumerate(self.agent_list)}
        row_cluster = sol.beta[[agent_pos[int(j)] for j in agents]]
        live = sol.live_clusters()

        loss_v, d_deltas_v = grounding_loss_grad(deltas, cols["y_values"][rows], agents)
        loss_vs, d_deltas_vs, d_w = value_system_loss_grad(
            deltas, cols["y_vs"][rows], agents, weights, row_cluster, live
        )
        lam = sol.lagrange.multipliers
        d_deltas = d_deltas_vs + d_deltas_v * lam[None, :]
        d_align = np.zeros_like(align)
        np.add.at(d_align, a_idx, d_deltas)
        np.add.at(d_align, b_idx, -d_deltas)
        d_table = np.asarray(data.trajectories.counts().T @ d_align)
        g_theta = self.model.backward(d_table)
        g_omega = self.bank.backward(d_w).reshape(-1)

        sol.theta = sol.theta_opt.step(sol.theta, g_theta)
        sol.omega = sol.omega_opt.step(sol.omega.reshape(-1), g_omega).reshape(
            self.bank.max_clusters, -1
        )
        self._load(sol)
        return loss_v, loss_vs

    def _batch_coherence(self, rows: np.ndarray) -> np.ndarray:
        """Qualitative per-value coherence of the current model on a batch."""
        data = self.sources.dataset
        cols = data.columns()
        align = self.alignments()
        deltas = align[cols["a"][rows]] - align[cols["b"][rows]]
        agents = cols["agent"][rows]
        m = align.shape[1]
        out = np.zeros(m)
        uniq = np.unique(agents)
        for i in range(m):
            model_lab = qualitative_label(deltas[:, i], 0.0, self.tol)
            mismatch = label_mismatch(model_lab, cols["y_values"][rows][:, i])
            acc = 0.0
            for j in uniq:
                acc += np.mean(mismatch[agents == j])
            out[i] = 1.0 - acc / len(uniq)
        return out

    def m_step(self, sol: Solution, rng) -> np.ndarray:
        """m_r gradient steps on fresh per-agent batches; returns last batch."""
        cfg = self.cfg
        pools = {j: self.sources.pool_rows(j) for j in self.agent_list}
        last_rows = None
        for _ in range(cfg.m_r):
            picked = self._sample_rows(pools, cfg.b_mp, rng)
            rows = np.concatenate([picked[j] for j in self.agent_list])
            if len(rows) == 0:
                continue
            self._batch_gradient_step(sol, rows)
            last_rows = rows
        return last_rows

    def em_cycle(self, sol: Solution, rng, e_step_first: bool = True) -> Solution:
        """E_r epochs of assignment, simplification, descent, and multipliers."""
        cfg = self.cfg
        self._load(sol)
        for epoch in range(cfg.E_r):
            if e_step_first or epoch > 0:
                extra = self._sample_rows(self.sources.buffer_rows, cfg.b_ep, rng)
                sol.beta = self.e_step(sol, extra)
                self.merge_clusters(sol, rng)
            last_rows = self.m_step(sol, rng)
            if last_rows is None:
                continue
            data = self.sources.dataset
            cols = data.columns()
            align = self.alignments()
            deltas = align[cols["a"][last_rows]] - align[cols["b"][last_rows]]
            loss_v, _ = grounding_loss_grad(
                deltas, cols["y_values"][last_rows], cols["agent"][last_rows]
            )
            chr_batch = self._batch_coherence(last_rows)
            sol.lagrange.update(loss_v, chr_batch, self.max_coherence)
        sol.scores = None
        return sol

    # ------------------------------------------------------------------ scores

    def score(self, sol: Solution, rows_by_agent: dict | None = None) -> dict:
        """Coherence, representativeness, conciseness, and the ratio heuristic.

        Scores are computed over the static rows by default.
        """
        self._load(sol)
        data = self.sources.dataset
        if rows_by_agent is None:
            rows_by_agent = self.sources.static_rows
        sub = _subset_dataset(data, rows_by_agent)
        align = data.trajectories.alignments(self.model.table())
        chrs = grounding_coherence(sub, align, self.tol)
        weights = self.bank.weights()
        assignment = {j: int(sol.beta[k]) for k, j in enumerate(self.agent_list)}
        rep = representativeness(sub, align, weights, assignment, self.tol)
        live = sol.live_clusters()
        conc = conciseness(sub, align, weights, live, self.tol)
        scores = {
            "coherence": chrs,
            "coherence_mean": float(np.mean(chrs)),
            "representativeness": rep,
            "conciseness": conc,
            "gamma": gamma_index(rep, conc),
            "n_clusters": sol.n_clusters,
        }
        sol.scores = scores
        return scores


class _RowView:
    """Dataset facade restricted to chosen rows (shares the trajectory table)."""

    def __init__(self, base: Dataset, rows: np.ndarray):
        self.trajectories = base.trajectories
        self.num_values = base.num_values
        base_cols = base.columns()
        self._cols = {k: v[rows] for k, v in base_cols.items()}
        self.records = [None] * len(rows)

    def columns(self):
        return self._cols

    def rows_of(self, agent_id):
        return np.flatnonzero(self._cols["agent"] == agent_id)


def _subset_dataset(data: Dataset, rows_by_agent: dict):
    rows = np.concatenate([np.asarray(rows_by_agent[j], int) for j in sorted(rows_by_agent)])
    return _RowView(data, rows)


# ---------------------------------------------------------------- memory ops

SCORE_AXES = ("coherence_mean", "representativeness", "conciseness")


def solution_dominates(a: dict, b: dict) -> bool:
    """Dominance on (coherence, representativeness, conciseness, clusters)."""
    ge = all(a[k] >= b[k] for k in SCORE_AXES) and a["n_clusters"] <= b["n_clusters"]
    gt = any(a[k] > b[k] for k in SCORE_AXES) or a["n_clusters"] < b["n_clusters"]
    return ge and gt


def insert_in_memory(memory: list, candidate: Solution, capacity: int) -> list:
    """Replace a dominated member, else append; evict on overflow."""
    for i, member in enumerate(memory):
        if solution_dominates(candidate.scores, member.scores):
            memory[i] = candidate
            return memory
    memory.append(candidate)
    if len(memory) > capacity:
        eliminate_worst(memory)
    return memory


def _protected_indices(memory: list):
    best_chr = max(range(len(memory)),
                   key=lambda i: (memory[i].scores["coherence_mean"], -i))
    best_gamma = min(range(len(memory)),
                     key=lambda i: (memory[i].scores["gamma"], i))
    return {best_chr, best_gamma}


def eliminate_worst(memory: list) -> list:
    """Evict the lexicographically worst member, never a protected one."""
    protected = _protected_indices(memory)
    identical = []
    for i, m in enumerate(memory):
        identical.append(
            sum(1 for k, other in enumerate(memory)
                if k != i and np.array_equal(other.beta, m.beta))
        )
    dominators = []
    for i, m in enumerate(memory):
        dominators.append(
            sum(1 for k, other in enumerate(memory)
                if k != i and solution_dominates(other.scores, m.scores))
        )

    def badness(i):
        s = memory[i].scores
        return (s["n_clusters"], identical[i], dominators[i],
                -s["coherence_mean"], s["gamma"])

    candidates = [i for i in range(len(memory)) if i not in protected]
    if not candidates:
        candidates = list(range(len(memory)))
    worst = max(candidates, key=lambda i: (badness(i), -i))
    memory.pop(worst)
    return memory


def select_solution(memory: list, rng) -> int:
    """Rank-proportional choice: best rank N, probability rank / sum(ranks)."""
    n = len(memory)
    if n == 0:
        raise ValueError("empty memory")
    order = sorted(
        range(n),
        key=lambda i: (memory[i].scores["gamma"], -memory[i].scores["coherence_mean"], i),
    )  # best first
    ranks = np.zeros(n)
    for pos, idx in enumerate(order):
        ranks[idx] = n - pos
    probs = ranks / ranks.sum()
    return int(rng.choice(n, p=probs))


def mutate_solution(engine: EMEngine, sol: Solution, rng) -> Solution:
    """Structural add/remove of one cluster plus error-scaled parameter noise."""
    cfg = engine.cfg
    if sol.scores is None:
        engine.score(sol)
    out = sol.clone()
    live = out.live_clusters()
    add = rng.random() < 0.5
    if add and len(live) < cfg.L_max:
        dead = [c for c in range(cfg.L_max) if c not in live]
        new = int(dead[rng.integers(len(dead))])
        engine.bank.set_omega(out.omega)
        engine.bank.randomize_row(new, rng)
        out.omega = engine.bank.omega.copy()
        move = rng.random(len(out.beta)) < cfg.p_m
        out.beta[move] = new
    elif not add and len(live) >= 2:
        gone = int(live[rng.integers(len(live))])
        remaining = [c for c in live if c != gone]
        members = np.flatnonzero(out.beta == gone)
        for k in members:
            out.beta[k] = remaining[rng.integers(len(remaining))]
    chr_err = 1.0 - sol.scores["coherence_mean"]
    rep_err = 1.0 - sol.scores["representativeness"]
    out.theta = out.theta + rng.standard_normal(out.theta.shape) * cfg.s_m * chr_err
    out.omega = out.omega + rng.standard_normal(out.omega.shape) * cfg.s_m * rep_err
    out.scores = None
    return out


def best_solution(memory: list) -> Solution:
    """Lowest ratio heuristic wins; coherence breaks ties."""
    idx = min(
        range(len(memory)),
        key=lambda i: (memory[i].scores["gamma"],
                       -memory[i].scores["coherence_mean"], i),
    )
    return memory[idx]


def run_svsl(engine: EMEngine, rng, iterations: int | None = None,
             a_ref: float | None = None, max_iterations: int | None = None,
             callback=None) -> Solution:
    """Evolutionary outer loop; stops after I iterations or at the A_ref bar.

    In threshold mode the loop errors (carrying the best solution so far)
    once ``max_iterations`` refinements pass without reaching the bar.
    """
    cfg = engine.cfg
    if (iterations is None) == (a_ref is None):
        raise ValueError("specify exactly one of iterations or a_ref")
    budget = iterations if iterations is not None else (max_iterations or cfg.max_warm_iterations)

    memory = []
    for _ in range(cfg.N):
        sol = engine.new_solution(rng)
        engine.score(sol)
        memory.append(sol)

    def satisfied(s):
        return (a_ref is not None
                and min(s.scores["coherence"]) >= a_ref
                and s.scores["representativeness"] >= a_ref)

    for sol in memory:
        if satisfied(sol):
            return sol

    anneal = max(budget - 1, 1)
    for t in range(budget):
        idx = select_solution(memory, rng)
        sol = memory[idx].clone()
        mrt_t = cfg.mrt * max(0.0, 1.0 - t / anneal)
        if rng.random() < mrt_t:
            sol = mutate_solution(engine, sol, rng)
        sol = engine.em_cycle(sol, rng, e_step_first=False)
        engine.score(sol)
        insert_in_memory(memory, sol, cfg.N)
        if callback is not None:
            callback(t, sol, memory)
        if satisfied(sol):
            return sol
    best = best_solution(memory)
    if a_ref is not None:
        raise ConvergenceError(
            f"accuracy bar {a_ref} not reached within {budget} iterations", best
        )
    return best
