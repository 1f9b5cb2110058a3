"""Pareto front construction and quality indicators for maximization problems."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Front:
    """A set of mutually nondominated vector returns with optional weights.

    ``weights[i]`` lists the scalarization weights attached to point i (for
    an oracle front, the weights for which that point is scalar-optimal).
    """

    points: np.ndarray  # (n, m)
    weights: list = field(default_factory=list)  # list of (k_i, m) arrays
    provenance: str = "all"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(
            -1, self.points.shape[-1] if np.ndim(self.points) else 0
        )

    def __len__(self):
        return self.points.shape[0]


def dominates(p: np.ndarray, q: np.ndarray) -> bool:
    """Weak Pareto dominance with at least one strict improvement (maximize)."""
    return bool(np.all(p >= q) and np.any(p > q))


def pareto_filter(points) -> np.ndarray:
    """Maximal nondominated subset; exact duplicates keep a single copy."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, pts.shape[-1] if pts.ndim == 2 else 0)
    keep = []
    for i, p in enumerate(pts):
        dominated = False
        for j, q in enumerate(pts):
            if i == j:
                continue
            if dominates(q, p):
                dominated = True
                break
            if np.array_equal(q, p) and j < i:
                dominated = True  # duplicate, keep the first copy only
                break
        if not dominated:
            keep.append(i)
    return pts[keep]


def _hv2d(points: np.ndarray, ref: np.ndarray) -> float:
    # sweep in descending x; each point adds the strip above the best y so far
    order = np.argsort(-points[:, 0], kind="stable")
    total = 0.0
    best_y = ref[1]
    for x, y in points[order]:
        if y > best_y:
            total += (x - ref[0]) * (y - best_y)
            best_y = y
    return total


def _hv3d(points: np.ndarray, ref: np.ndarray) -> float:
    # slice along the third coordinate, descending
    order = np.argsort(-points[:, 2], kind="stable")
    pts = points[order]
    zs = np.append(pts[:, 2], ref[2])
    total = 0.0
    for k in range(len(pts)):
        depth = zs[k] - zs[k + 1]
        if depth <= 0:
            continue
        slab = pareto_filter(pts[: k + 1, :2])
        total += depth * _hv2d(slab, ref[:2])
    return total


def hypervolume(points, ref_point) -> float:
    """Lebesgue measure of the region dominated by ``points`` above ``ref_point``.

    Points that do not weakly dominate the reference are excluded with a
    warning rather than corrupting the measure.
    """
    pts = np.asarray(points, dtype=np.float64)
    ref = np.asarray(ref_point, dtype=np.float64)
    if pts.size == 0:
        return 0.0
    pts = pts.reshape(-1, ref.shape[0])
    ok = np.all(pts >= ref, axis=1)
    if not np.all(ok):
        warnings.warn("excluding front points that do not dominate the reference")
        pts = pts[ok]
    if pts.shape[0] == 0:
        return 0.0
    pts = pareto_filter(pts)
    if ref.shape[0] == 2:
        return _hv2d(pts, ref)
    if ref.shape[0] == 3:
        return _hv3d(pts, ref)
    raise NotImplementedError("hypervolume implemented for 2 or 3 objectives")


def mul(learned_points, oracle: Front) -> float:
    """Maximum utility loss of a learned front against an oracle front.

    For every oracle weight w the loss is the gap between the oracle's
    scalarized value and the best scalarized value any learned point attains.
    """
    learned = np.asarray(learned_points, dtype=np.float64)
    if learned.size == 0:
        raise ValueError("empty learned front")
    learned = learned.reshape(-1, oracle.points.shape[1])
    if not oracle.weights:
        raise ValueError("oracle front carries no weights")
    worst = 0.0
    for point, wts in zip(oracle.points, oracle.weights):
        for w in np.atleast_2d(wts):
            gap = float(w @ point - np.max(learned @ w))
            worst = max(worst, gap)
    return worst


def simplex_grid(m: int, count: int) -> np.ndarray:
    """Equally spaced weights on the (m-1)-simplex; exact grid for m = 2."""
    if m == 2:
        w1 = np.linspace(0.0, 1.0, count)
        return np.column_stack([w1, 1.0 - w1])
    # lattice of comparable cardinality for m > 2
    per_axis = max(2, int(round(count ** (1.0 / (m - 1)))))
    ticks = np.linspace(0.0, 1.0, per_axis)
    grids = np.meshgrid(*([ticks] * (m - 1)), indexing="ij")
    flat = np.column_stack([g.ravel() for g in grids])
    keep = flat.sum(axis=1) <= 1.0 + 1e-12
    flat = flat[keep]
    return np.column_stack([flat, 1.0 - flat.sum(axis=1)])


def finite_horizon_values(env, scalar_reward: np.ndarray):
    """Backward-induction state values and greedy policies for one scalar reward.

    Returns (values, policies) with shapes (H+1, S) and (H, S); terminal
    states are absorbing with zero continuation.
    """
    n_s, n_a, h = env.num_states, env.num_actions, env.horizon
    gamma = env.config.discount
    r_sa = scalar_reward.reshape(n_s, n_a)
    values = np.zeros((h + 1, n_s))
    policies = np.zeros((h, n_s), dtype=np.int64)
    nonterminal = ~env.terminal
    for t in range(h - 1, -1, -1):
        q = r_sa + gamma * values[t + 1][env.transitions]
        policies[t] = np.argmax(q, axis=1)
        values[t] = np.where(nonterminal, q[np.arange(n_s), policies[t]], 0.0)
    return values, policies


def greedy_vector_return(env, policies: np.ndarray, start_index=None) -> np.ndarray:
    """Exact vector return of a time-indexed greedy policy from the start state."""
    s = env.start_index if start_index is None else start_index
    gamma = env.config.discount
    total = np.zeros(env.num_values)
    for t in range(env.horizon):
        if env.terminal[s]:
            break
        a = policies[t, s]
        total += (gamma ** t) * env.rewards[s, a]
        s = env.transitions[s, a]
    return total


def snap_returns(points, decimals: int = 9) -> np.ndarray:
    """Round accumulated returns to kill float summation noise.

    Reward tables have coarse decimal granularity, so distinct true returns
    differ by far more than 1e-9; without snapping, permuted action orders
    produce ulp-level differences that corrupt front cardinality.
    """
    return np.round(np.asarray(points, dtype=np.float64), decimals)


def dp_oracle_front(env, weight_grid: np.ndarray) -> Front:
    """Exact scalarization front by per-weight finite-horizon value iteration.

    Each grid weight contributes the vector return of its greedy policy; the
    front keeps the nondominated returns and attaches every grid weight to
    the surviving point that is scalar-optimal for it.
    """
    weight_grid = np.asarray(weight_grid, dtype=np.float64)
    reward_flat = env.reward_table()
    returns = np.zeros((len(weight_grid), env.num_values))
    for k, w in enumerate(weight_grid):
        _, policies = finite_horizon_values(env, reward_flat @ w)
        returns[k] = greedy_vector_return(env, policies)
    returns = snap_returns(returns)
    points = pareto_filter(returns)
    # attach each grid weight to the surviving point maximizing its scalarization
    owners = np.argmax(points @ weight_grid.T, axis=0)
    weights = [weight_grid[owners == i] for i in range(len(points))]
    front = Front(points=points, weights=weights, provenance="oracle")
    return front
