"""Synthetic society protocol: ground-truth agents, pools, and labeled pairs.

A society is spawned from the exact scalarization front of the environment:
one true weight vector per front point, several agents per weight, and a
per-agent pool mixing near-optimal and random trajectories. The oracle labels
any trajectory pair from ground-truth alignments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from svsl_lab.environment import rollout
from svsl_lab.fronts import dp_oracle_front, finite_horizon_values, simplex_grid
from svsl_lab.metrics import (
    DEFAULT_INDIFFERENCE_TOL,
    Dataset,
    PreferenceRecord,
    TrajectoryTable,
    qualitative_label,
)


@dataclass
class Agent:
    agent_id: int
    true_weight: np.ndarray
    pool: list = field(default_factory=list)  # trajectory ids in the table


@dataclass
class GroundTruthSociety:
    env: object
    agents: list
    front: object
    trajectories: TrajectoryTable
    alignments: np.ndarray  # ground-truth alignment per pool trajectory

    @property
    def num_agents(self):
        return len(self.agents)

    def oracle_answer(self, agent: Agent, traj_a: int, traj_b: int,
                      tol: float = DEFAULT_INDIFFERENCE_TOL):
        """Per-value labels plus the value-system label under the true weight."""
        g_a, g_b = self.alignments[traj_a], self.alignments[traj_b]
        y_values = np.array(
            [qualitative_label(g_a[i], g_b[i], tol) for i in range(len(g_a))]
        )
        y_vs = qualitative_label(
            float(agent.true_weight @ g_a), float(agent.true_weight @ g_b), tol
        )
        return y_vs, y_values

    def label_pair_steps(self, agent: Agent, steps_a, steps_b,
                         tol: float = DEFAULT_INDIFFERENCE_TOL):
        """Oracle answer for raw step arrays not present in the pool table."""
        from svsl_lab.environment import Trajectory, discounted_alignment

        table = self.env.reward_table()
        gamma = self.env.config.discount
        g_a = discounted_alignment(Trajectory(np.asarray(steps_a)), table, gamma,
                                   self.env.num_actions)
        g_b = discounted_alignment(Trajectory(np.asarray(steps_b)), table, gamma,
                                   self.env.num_actions)
        y_values = np.array(
            [qualitative_label(g_a[i], g_b[i], tol) for i in range(len(g_a))]
        )
        y_vs = qualitative_label(
            float(agent.true_weight @ g_a), float(agent.true_weight @ g_b), tol
        )
        return y_vs, y_values


def representative_weights(front) -> np.ndarray:
    """One true weight per front point: the median of its attached weights."""
    reps = []
    for wts in front.weights:
        wts = np.atleast_2d(wts)
        order = np.argsort(wts[:, 0], kind="stable")
        reps.append(wts[order[(len(order) - 1) // 2]])
    return np.array(reps)


def build_ground_truth_front(env, weight_count: int = 50):
    grid = simplex_grid(env.num_values, weight_count)
    return dp_oracle_front(env, grid)


def sample_agent_trajectories(env, weight: np.ndarray, count: int,
                              rational_fraction: float, epsilon: float,
                              rng) -> list:
    """Pool of rollouts: a rational share from the epsilon-greedy optimal
    policy for the weight, the rest from a uniform random policy."""
    n_rational = int(round(rational_fraction * count))
    _, policies = finite_horizon_values(env, env.reward_table() @ weight)
    pool = []
    for _ in range(n_rational):
        pool.append(rollout(env, lambda s, t: policies[t, s], rng, epsilon=epsilon))
    for _ in range(count - n_rational):
        pool.append(
            rollout(env, lambda s, t: int(rng.integers(env.num_actions)), rng)
        )
    return pool


def build_society(env, cfg, rng) -> GroundTruthSociety:
    """Front, true weights, agents, and their trajectory pools."""
    front = build_ground_truth_front(env, cfg.weight_grid_points)
    true_weights = representative_weights(front)
    table = TrajectoryTable(
        env.num_states * env.num_actions, env.config.discount, env.num_actions
    )
    agents = []
    for k, w in enumerate(true_weights):
        for _ in range(cfg.agents_per_weight):
            agent = Agent(agent_id=len(agents), true_weight=w)
            for traj in sample_agent_trajectories(
                env, w, cfg.trajectories_per_agent,
                cfg.rational_fraction, cfg.rational_epsilon, rng,
            ):
                agent.pool.append(table.add(traj.steps))
            agents.append(agent)
    alignments = table.alignments(env.reward_table())
    return GroundTruthSociety(env=env, agents=agents, front=front,
                              trajectories=table, alignments=alignments)


def _sample_distinct_pair(pool, rng):
    i = int(rng.integers(len(pool)))
    j = int(rng.integers(len(pool) - 1))
    if j >= i:
        j += 1
    return pool[i], pool[j]


def build_dataset(society: GroundTruthSociety, cfg, rng):
    """Per-agent labeled pairs, split 50/50 per agent per kind.

    Every agent contributes ``pairs_per_kind`` pairs per value plus the same
    number of value-system pairs; each record carries all labels.
    """
    m = society.env.num_values
    train = Dataset(trajectories=society.trajectories, num_values=m)
    test = Dataset(trajectories=society.trajectories, num_values=m)
    n = cfg.pairs_per_kind
    for agent in society.agents:
        if len(agent.pool) < 2:
            raise ValueError("agent pool too small to form distinct pairs")
        for _ in range(m + 1):  # one batch per value, one for the value system
            records = []
            for _ in range(n):
                a, b = _sample_distinct_pair(agent.pool, rng)
                y_vs, y_values = society.oracle_answer(agent, a, b)
                records.append(
                    PreferenceRecord(a, b, y_vs, y_values, agent.agent_id)
                )
            order = rng.permutation(n)
            half = n // 2
            for idx in order[:half]:
                train.add_record(records[idx])
            for idx in order[half:]:
                test.add_record(records[idx])
    return train, test


def save_dataset_jsonl(path, dataset: Dataset, header: dict):
    """One record per line with inline trajectories; first line is a header."""
    table = dataset.trajectories
    with open(path, "w") as fh:
        fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for rec in dataset.records:
            row = {
                "agent": int(rec.agent_id),
                "y_vs": rec.y_vs,
                "y_values": list(rec.y_values),
                "traj_a": table.steps(rec.traj_a).tolist(),
                "traj_b": table.steps(rec.traj_b).tolist(),
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_dataset_jsonl(path, num_cells: int, gamma: float, num_actions: int):
    """Rebuild a dataset (and its trajectory table) from a JSON-lines file."""
    table = TrajectoryTable(num_cells, gamma, num_actions)
    ds = None
    header = None
    seen = {}
    with open(path) as fh:
        for line in fh:
            row = json.loads(line)
            if "header" in row:
                header = row["header"]
                ds = Dataset(trajectories=table, num_values=header["num_values"])
                continue
            ids = []
            for key in ("traj_a", "traj_b"):
                steps = tuple(map(tuple, row[key]))
                if steps not in seen:
                    seen[steps] = table.add(np.array(row[key], dtype=np.int64).reshape(-1, 2))
                ids.append(seen[steps])
            ds.add_record(
                PreferenceRecord(ids[0], ids[1], row["y_vs"],
                                 np.array(row["y_values"]), row["agent"])
            )
    return ds, header
