"""Online social value system learning: the full exploration loop.

Starting from a warm-started clustering, the loop explores with weights
sampled from the live clusters, collects pairwise preferences from agents at
a fixed cadence, refreshes the reward vector and clusters by EM over the
static dataset merged with the preference buffer, relabels stored
experience, and trains the weight-conditioned policy throughout. A pooled
variant without any cluster machinery serves as the reward-learning baseline.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from svsl_lab.clustering import EMEngine, EMSources, Solution, run_svsl
from svsl_lab.eql import EnvelopeQLearner, ExperienceBuffer, Schedules, act_epsilon_greedy
from svsl_lab.metrics import Dataset, PreferenceRecord, bt_probability
from svsl_lab.models import RewardVectorModel, ValueSystemBank, grounding_loss_grad, AdamOptimizer

log = logging.getLogger(__name__)


class PreferenceBuffer:
    """Per-agent preference rings with a shared total capacity.

    Each agent owns capacity // n_agents slots, so the total never exceeds
    the configured size and eviction is FIFO within each agent.
    """

    def __init__(self, capacity: int, agent_ids):
        per_agent = max(1, capacity // max(1, len(agent_ids)))
        self.rings = {int(j): deque(maxlen=per_agent) for j in agent_ids}

    def add(self, record: PreferenceRecord):
        self.rings[int(record.agent_id)].append(record)

    def __len__(self):
        return sum(len(r) for r in self.rings.values())

    def records_of(self, agent_id) -> list:
        return list(self.rings[int(agent_id)])


@dataclass
class Query:
    query_id: int
    traj_a: int
    traj_b: int
    agent_id: int
    status: str = "pending"


@dataclass
class EpisodeRecord:
    traj_id: int
    weight: np.ndarray
    cluster: int


class OracleAnswerSource:
    """Answers every query instantly from ground-truth alignments.

    Per-value labels are shared across agents (the grounding is social), so
    one round of pairs is labeled once and only the value-system label is
    recomputed per agent.
    """

    def __init__(self, society):
        self.society = society
        self._round_pairs = None
        self._round_cache = None

    def _prepare(self, pairs, trajectories):
        from svsl_lab.metrics import qualitative_label

        env = self.society.env
        gt = trajectories.alignments(env.reward_table())
        a_idx = np.array([p[0] for p in pairs])
        b_idx = np.array([p[1] for p in pairs])
        g_a, g_b = gt[a_idx], gt[b_idx]
        m = g_a.shape[1]
        y_values = np.column_stack(
            [qualitative_label(g_a[:, i], g_b[:, i]) for i in range(m)]
        )
        return {"g_a": g_a, "g_b": g_b, "y_values": y_values}

    def collect(self, agent_id: int, pairs, trajectories):
        from svsl_lab.metrics import qualitative_label

        key = tuple(pairs)
        if self._round_pairs != key:
            self._round_pairs = key
            self._round_cache = self._prepare(pairs, trajectories)
        cache = self._round_cache
        w = self.society.agents[agent_id].true_weight
        y_vs = qualitative_label(cache["g_a"] @ w, cache["g_b"] @ w)
        y_vs = np.atleast_1d(y_vs)
        return [(float(y_vs[k]), cache["y_values"][k]) for k in range(len(pairs))]


def relabel_experience(buffer: ExperienceBuffer, reward_table: np.ndarray,
                       num_actions: int):
    """Replace stored reward vectors with the table's; priorities untouched."""
    n = len(buffer)
    if n == 0:
        return
    cells = buffer.s[:n] * num_actions + buffer.a[:n]
    buffer.r[:n] = reward_table[cells]


def select_query_pairs(episodes, n_pairs: int, informativeness, rng):
    """Pick trajectory pairs from recent episodes, preferring uncertain ones.

    Half the candidate pairs join episodes generated under different cluster
    weights, half are unconstrained; within each pool the pairs whose
    preference probability sits nearest 0.5 win. Returns fewer pairs when too
    few episodes exist (logged, not fatal).
    """
    if len(episodes) < 2:
        log.warning("query selection: fewer than two complete episodes")
        return []
    by_cluster = {}
    for ep in episodes:
        by_cluster.setdefault(ep.cluster, []).append(ep)

    def sample_pairs(cross: bool, count: int):
        out = set()
        attempts = 0
        while len(out) < count and attempts < count * 8:
            attempts += 1
            i, j = rng.integers(len(episodes)), rng.integers(len(episodes))
            if i == j:
                continue
            a, b = episodes[i], episodes[j]
            if cross and a.cluster == b.cluster and len(by_cluster) > 1:
                continue
            key = (min(a.traj_id, b.traj_id), max(a.traj_id, b.traj_id))
            out.add(key)
        return list(out)

    half = n_pairs // 2
    cross = sample_pairs(True, max(half * 2, 4))
    free = sample_pairs(False, max((n_pairs - half) * 2, 4))

    def best(cands, count):
        scored = sorted(cands, key=lambda p: (informativeness(p), p))
        return scored[:count]

    picked = best(cross, half) + best(free, n_pairs - half)
    seen = set()
    unique = []
    for p in picked:
        if p not in seen:
            seen.add(p)
            unique.append(p)
    if len(unique) < n_pairs:
        for p in best(free + cross, len(free) + len(cross)):
            if p not in seen:
                seen.add(p)
                unique.append(p)
            if len(unique) >= n_pairs:
                break
    if len(unique) < n_pairs:
        log.warning("query selection: only %d of %d pairs available",
                    len(unique), n_pairs)
    return unique[:n_pairs]


@dataclass
class RunResult:
    solution: Solution
    qlearner: EnvelopeQLearner
    model: RewardVectorModel
    bank: ValueSystemBank
    timeline: list = field(default_factory=list)
    skipped_agents: int = 0
    max_coherence: np.ndarray | None = None


class SVSLPOrchestrator:
    """Owns all mutable run state; single-threaded main loop."""

    def __init__(self, env, society, train_dataset: Dataset, cfg, rng,
                 answer_sources=None, status_hook=None):
        self.env = env
        self.society = society
        self.train = train_dataset
        self.cfg = cfg
        self.rng = rng
        self.table = train_dataset.trajectories  # shared trajectory store
        self.agent_ids = sorted(int(j) for j in train_dataset.agents())
        self.oracle = OracleAnswerSource(society)
        self.answer_sources = answer_sources or {}
        self.status_hook = status_hook

        m = env.num_values
        features = env.feature_matrix(cfg.onehot) if cfg.reward_mode == "mlp" else None
        self.model = RewardVectorModel(
            env.num_states * env.num_actions, m, mode=cfg.reward_mode,
            features=features, rng=rng,
        )
        self.bank = ValueSystemBank(cfg.L_max, m, rng=rng)
        self.static_rows = {j: train_dataset.rows_of(j) for j in self.agent_ids}
        self.pref_buffer = PreferenceBuffer(cfg.S_p, self.agent_ids)
        self.episodes = deque(maxlen=512)
        self.next_query_id = 0
        self.timeline = []
        self.skipped_agents = 0

    # ------------------------------------------------------------- warm start

    def warm_start(self) -> Solution:
        engine = EMEngine(EMSources.offline(self.train), self.model, self.bank,
                          self.cfg)
        sol = run_svsl(engine, self.rng, a_ref=self.cfg.A_ref,
                       max_iterations=self.cfg.max_warm_iterations)
        self.engine = engine
        return sol

    # ---------------------------------------------------------------- sources

    def _merged_sources(self) -> EMSources:
        ds = Dataset(trajectories=self.table, num_values=self.env.num_values)
        ds.records = list(self.train.records)
        buffer_rows = {}
        for j in self.agent_ids:
            recs = self.pref_buffer.records_of(j)
            start = len(ds.records)
            ds.records.extend(recs)
            buffer_rows[j] = np.arange(start, start + len(recs), dtype=np.int64)
        ds._cols.clear()
        return EMSources(dataset=ds, static_rows=self.static_rows,
                         buffer_rows=buffer_rows)

    # ------------------------------------------------------------ preference

    def _collect_preferences(self, sol: Solution, t: int):
        cfg = self.cfg
        agents = self.rng.choice(self.agent_ids, size=min(cfg.N_a, len(self.agent_ids)),
                                 replace=False)
        weights = self.bank.weights()
        agent_pos = {j: k for k, j in enumerate(self.agent_ids)}
        asked_clusters = sorted({int(sol.beta[agent_pos[int(j)]]) for j in agents})
        reward = self.model.table()
        align = self.table.alignments(reward)

        def informativeness(pair):
            a, b = pair
            probs = [bt_probability(float(weights[l] @ align[a]),
                                    float(weights[l] @ align[b]))
                     for l in asked_clusters]
            return min(abs(p - 0.5) for p in probs)

        pairs = select_query_pairs(list(self.episodes), cfg.N_s, informativeness,
                                   self.rng)
        if not pairs:
            return
        for j in agents:
            j = int(j)
            source = self.answer_sources.get(j, self.oracle)
            answers = source.collect(j, pairs, self.table)
            if answers is None:
                self.skipped_agents += 1
                log.warning("agent %d skipped at t=%d (no answers)", j, t)
                continue
            for (a, b), (y_vs, y_values) in zip(pairs, answers):
                if y_vs is None:
                    continue
                self.pref_buffer.add(PreferenceRecord(a, b, y_vs, y_values, j))

    # ------------------------------------------------------------------- run

    def run(self, total_steps: int | None = None) -> RunResult:
        cfg = self.cfg
        rng = self.rng
        env = self.env
        total = cfg.T if total_steps is None else total_steps

        sol = self.warm_start()
        engine = self.engine
        engine._load(sol)  # the last-scored memory member may differ
        reward = self.model.table()

        tau = cfg.tau_or_tu if cfg.tau_or_tu < 1.0 else None
        hard = int(cfg.tau_or_tu) if cfg.tau_or_tu >= 1.0 else None
        learner = EnvelopeQLearner(env, lr=cfg.alpha_eql, grid_points=cfg.q_grid_points,
                                   tau=tau, hard_sync_every=hard,
                                   num_envelope_weights=cfg.N_w,
                                   use_stored_weights=cfg.U_w)
        buffer = ExperienceBuffer(cfg.S_e, env.num_values, use_per=True,
                                  alpha_per=cfg.alpha_per, eps_per=cfg.eps_per)
        sched = Schedules(cfg.eps0, cfg.epsinf, cfg.h0, cfg.hinf, total)

        s = env.start_index
        episode_steps = []
        episode_id = 0
        w = self._episode_weight(sol, rng)
        w_cluster = self._cluster_of_weight(sol, w)

        for t in range(total):
            a = act_epsilon_greedy(learner.q, s, w, sched.epsilon(t), rng)
            s2 = int(env.transitions[s, a])
            done = bool(env.terminal[s2])
            buffer.add(s, a, reward[s * env.num_actions + a], s2, done, w, episode_id)
            episode_steps.append((s, a))
            if done or len(episode_steps) >= env.horizon:
                traj_id = self.table.add(np.array(episode_steps, dtype=np.int64))
                self.episodes.append(EpisodeRecord(traj_id, w, w_cluster))
                episode_steps = []
                episode_id += 1
                s = env.start_index
                w = self._episode_weight(sol, rng)
                w_cluster = self._cluster_of_weight(sol, w)
            else:
                s = s2

            if t % cfg.K == 0:
                self._collect_preferences(sol, t)
                engine.sources = self._merged_sources()
                engine.agent_list = engine.sources.agents()
                sol = engine.em_cycle(sol, rng, e_step_first=True)
                reward = self.model.table()
                relabel_experience(buffer, reward, env.num_actions)
                scores = engine.score(sol, rows_by_agent=self.static_rows)
                self.timeline.append(
                    {"t": t, "repr": scores["representativeness"],
                     "coherence": list(scores["coherence"]),
                     "conciseness": scores["conciseness"],
                     "gamma": scores["gamma"], "L": scores["n_clusters"],
                     "buffer": len(self.pref_buffer)}
                )
                if self.status_hook is not None:
                    self.status_hook(t, sol, scores, self)

            if len(buffer) >= cfg.b_pi:
                for _ in range(cfg.T_pi):
                    idx = buffer.sample_hybrid(cfg.b_pi, rng,
                                               recent_span=max(cfg.b_pi, cfg.K))
                    learner.update(buffer, idx, sched.homotopy(t), rng)

        return RunResult(solution=sol, qlearner=learner, model=self.model,
                         bank=self.bank, timeline=self.timeline,
                         skipped_agents=self.skipped_agents,
                         max_coherence=engine.max_coherence.copy())

    def _episode_weight(self, sol: Solution, rng) -> np.ndarray:
        live = sol.live_clusters()
        pick = live[int(rng.integers(len(live)))]
        return self.bank.weights()[pick].copy()

    def _cluster_of_weight(self, sol: Solution, w) -> int:
        weights = self.bank.weights()
        live = sol.live_clusters()
        dists = [float(np.max(np.abs(weights[l] - w))) for l in live]
        return int(live[int(np.argmin(dists))])


def run_svslp(env, society, train_dataset, cfg, seed, answer_sources=None,
              status_hook=None, total_steps=None) -> RunResult:
    """End-to-end online run with the oracle (or mixed) answer source."""
    rng = np.random.default_rng(seed)
    orch = SVSLPOrchestrator(env, society, train_dataset, cfg, rng,
                             answer_sources=answer_sources,
                             status_hook=status_hook)
    return orch.run(total_steps=total_steps)


def run_pbmorl_baseline(env, society, train_dataset, cfg, seed) -> RunResult:
    """Pooled reward learning without clusters, then post-hoc assignment.

    The reward vector trains on bulk per-value preference batches only; after
    training, equally spaced candidate weights stand in for clusters, agents
    are assigned by the usual hard E-step, and empty candidates are dropped.
    """
    from svsl_lab.fronts import simplex_grid

    rng = np.random.default_rng(seed)
    m = env.num_values
    table = train_dataset.trajectories
    agent_ids = sorted(int(j) for j in train_dataset.agents())
    features = env.feature_matrix(cfg.onehot) if cfg.reward_mode == "mlp" else None
    model = RewardVectorModel(env.num_states * env.num_actions, m,
                              mode=cfg.reward_mode, features=features, rng=rng)
    opt = AdamOptimizer(model.n_params, cfg.alpha_theta, cfg.weight_decay)
    oracle = OracleAnswerSource(society)

    pooled = deque(maxlen=cfg.S_p)
    episodes = deque(maxlen=512)

    tau = cfg.tau_or_tu if cfg.tau_or_tu < 1.0 else None
    hard = int(cfg.tau_or_tu) if cfg.tau_or_tu >= 1.0 else None
    learner = EnvelopeQLearner(env, lr=cfg.alpha_eql, grid_points=cfg.q_grid_points,
                               tau=tau, hard_sync_every=hard,
                               num_envelope_weights=cfg.N_w,
                               use_stored_weights=cfg.U_w)
    buffer = ExperienceBuffer(cfg.S_e, m, use_per=True, alpha_per=cfg.alpha_per,
                              eps_per=cfg.eps_per)
    sched = Schedules(cfg.eps0, cfg.epsinf, cfg.h0, cfg.hinf, cfg.T)
    reward = model.table()

    def reward_update():
        nonlocal reward
        if not pooled:
            return
        recs = list(pooled)
        counts = table.counts()
        for _ in range(cfg.m_r):
            pick = rng.integers(0, len(recs), size=min(cfg.b, len(recs)))
            rows = [recs[i] for i in pick]
            tab = model.table()
            align = np.asarray(counts @ tab)
            a_idx = np.array([r.traj_a for r in rows])
            b_idx = np.array([r.traj_b for r in rows])
            deltas = align[a_idx] - align[b_idx]
            y = np.array([r.y_values for r in rows])
            # bulk pooling: a single pseudo-agent, plain row averaging
            _, d_deltas = grounding_loss_grad(deltas, y, np.zeros(len(rows), int))
            d_align = np.zeros_like(align)
            np.add.at(d_align, a_idx, d_deltas)
            np.add.at(d_align, b_idx, -d_deltas)
            d_table = np.asarray(counts.T @ d_align)
            model.table()
            grad = model.backward(d_table)
            model.set_params(opt.step(model.params, grad))
        reward = model.table()

    s = env.start_index
    episode_steps = []
    episode_id = 0
    w = rng.dirichlet(np.ones(m))
    timeline = []
    for t in range(cfg.T):
        if t < cfg.T_i:
            a = int(rng.integers(env.num_actions))
        else:
            a = act_epsilon_greedy(learner.q, s, w, sched.epsilon(t), rng)
        s2 = int(env.transitions[s, a])
        done = bool(env.terminal[s2])
        buffer.add(s, a, reward[s * env.num_actions + a], s2, done, w, episode_id)
        episode_steps.append((s, a))
        if done or len(episode_steps) >= env.horizon:
            traj_id = table.add(np.array(episode_steps, dtype=np.int64))
            episodes.append(EpisodeRecord(traj_id, w, 0))
            episode_steps = []
            episode_id += 1
            s = env.start_index
            w = rng.dirichlet(np.ones(m))
        else:
            s = s2

        if t % cfg.K == 0 and len(episodes) >= 2:
            align = table.alignments(model.table())

            def informativeness(pair):
                delta = align[pair[0]] - align[pair[1]]
                probs = bt_probability(delta, np.zeros_like(delta))
                return float(np.min(np.abs(probs - 0.5)))

            pairs = select_query_pairs(list(episodes), cfg.N_s, informativeness, rng)
            asked = rng.choice(agent_ids, size=min(cfg.N_a, len(agent_ids)),
                               replace=False)
            for j in asked:
                answers = oracle.collect(int(j), pairs, table)
                for (a_id, b_id), (y_vs, y_values) in zip(pairs, answers):
                    pooled.append(PreferenceRecord(a_id, b_id, y_vs, y_values, int(j)))
            reward_update()
            relabel_experience(buffer, reward, env.num_actions)
            timeline.append({"t": t, "buffer": len(pooled)})

        if t >= cfg.T_i and len(buffer) >= cfg.b_pi:
            for _ in range(cfg.T_pi):
                idx = buffer.sample_hybrid(cfg.b_pi, rng,
                                           recent_span=max(cfg.b_pi, cfg.K))
                learner.update(buffer, idx, sched.homotopy(t), rng)

    # post-hoc clustering over equally spaced candidate weights
    candidates = simplex_grid(m, len(agent_ids))
    bank = ValueSystemBank(len(agent_ids), m, rng=rng)
    bank.set_omega(np.log(np.clip(candidates, 1e-12, None)))
    cfg_assign = cfg
    engine = EMEngine(EMSources.offline(train_dataset), model, bank, cfg_assign)
    sol = Solution(np.zeros(len(agent_ids), int), model.params.copy(),
                   bank.omega.copy(), None, None, None)
    sol.beta = engine.e_step(sol, candidates=range(len(candidates)))
    result = RunResult(solution=sol, qlearner=learner, model=model, bank=bank,
                       timeline=timeline)
    return result
