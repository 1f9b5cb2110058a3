"""Weight-conditioned multi-objective Q-learning with hybrid replay.

The Q model is vector-valued and conditioned on scalarization weights; the
default representation is a table over a discretized weight grid (exact and
fast at this scale), with an MLP alternative behind the same interface. The
bootstrap target takes the envelope maximum of the scalarized target values
over actions and a candidate weight set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from svsl_lab.models import AdamOptimizer


@dataclass
class Schedules:
    """Linear exploration and homotopy schedules, clamped at the endpoints."""

    eps0: float
    epsinf: float
    h0: float
    hinf: float
    total: int

    def _lerp(self, a, b, t):
        if self.total <= 0:
            return b
        frac = min(max(t / self.total, 0.0), 1.0)
        return a + (b - a) * frac

    def epsilon(self, t: int) -> float:
        return self._lerp(self.eps0, self.epsinf, t)

    def homotopy(self, t: int) -> float:
        return self._lerp(self.h0, self.hinf, t)


class WeightGrid:
    """Discretized simplex used to condition the tabular Q model."""

    def __init__(self, num_values: int, points: int = 51):
        from svsl_lab.fronts import simplex_grid

        self.grid = simplex_grid(num_values, points)
        self.num_values = num_values

    def __len__(self):
        return len(self.grid)

    def index(self, w) -> np.ndarray:
        """Nearest grid index for one weight vector or a stack of them."""
        w = np.asarray(w, dtype=np.float64)
        if self.num_values == 2:
            # the m = 2 grid is a linspace over the first component
            idx = np.rint(w[..., 0] * (len(self.grid) - 1)).astype(np.int64)
            idx = np.clip(idx, 0, len(self.grid) - 1)
            return idx if idx.ndim else int(idx)
        w = np.atleast_2d(w)
        d = ((w[:, None, :] - self.grid[None, :, :]) ** 2).sum(axis=2)
        idx = np.argmin(d, axis=1)
        return idx if len(idx) > 1 else int(idx[0])


class SumTree:
    """Flat binary sum tree for proportional priority sampling."""

    def __init__(self, capacity: int):
        self.capacity = 1
        while self.capacity < capacity:
            self.capacity *= 2
        self.tree = np.zeros(2 * self.capacity)

    def set(self, indices: np.ndarray, values: np.ndarray):
        nodes = np.asarray(indices) + self.capacity
        self.tree[nodes] = values
        nodes //= 2
        while nodes[0] >= 1:
            uniq = np.unique(nodes)
            self.tree[uniq] = self.tree[2 * uniq] + self.tree[2 * uniq + 1]
            nodes = uniq // 2
            if uniq[0] == 0:
                break

    @property
    def total(self):
        return self.tree[1]

    def sample(self, targets: np.ndarray) -> np.ndarray:
        """Descend the tree for each cumulative target value, vectorized."""
        idx = np.ones(len(targets), dtype=np.int64)
        t = np.array(targets, dtype=np.float64)
        while idx[0] < self.capacity:
            left = 2 * idx
            go_right = t > self.tree[left]
            t = np.where(go_right, t - self.tree[left], t)
            idx = np.where(go_right, left + 1, left)
        return idx - self.capacity


class ExperienceBuffer:
    """Ring buffer of transitions with optional prioritized sampling.

    Eviction is strictly FIFO. With priorities enabled, half of each batch is
    drawn uniformly from the most recent segment and half proportionally to
    priority**alpha.
    """

    def __init__(self, capacity: int, num_values: int, use_per: bool = True,
                 alpha_per: float = 0.6, eps_per: float = 0.01):
        self.capacity = capacity
        self.use_per = use_per
        self.alpha_per = alpha_per
        self.eps_per = eps_per
        self.s = np.zeros(capacity, dtype=np.int64)
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros((capacity, num_values))
        self.s2 = np.zeros(capacity, dtype=np.int64)
        self.done = np.zeros(capacity, dtype=bool)
        self.w = np.zeros((capacity, num_values))
        self.episode = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self.pos = 0
        self.total_added = 0
        self.max_priority = 1.0
        self.tree = SumTree(capacity) if use_per else None

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2, done, w, episode_id):
        i = self.pos
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2
        self.done[i] = done
        self.w[i] = w
        self.episode[i] = episode_id
        if self.use_per:
            self.tree.set(np.array([i]), np.array([self.max_priority ** self.alpha_per]))
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.total_added += 1
        return i

    def recent_indices(self, span: int) -> np.ndarray:
        span = min(span, self.size)
        newest = (self.pos - 1) % self.capacity
        return (newest - np.arange(span)) % self.capacity

    def sample_uniform(self, batch: int, rng) -> np.ndarray:
        if self.size < batch:
            raise ValueError("buffer holds fewer items than the batch size")
        return rng.integers(0, self.size, size=batch)

    def sample_hybrid(self, batch: int, rng, recent_span: int) -> np.ndarray:
        """Half uniform-from-recent, half prioritized."""
        if self.size < batch:
            raise ValueError("buffer holds fewer items than the batch size")
        if not self.use_per:
            return self.sample_uniform(batch, rng)
        n_recent = batch // 2
        n_per = batch - n_recent
        recent = self.recent_indices(max(batch, recent_span))
        picked_recent = recent[rng.integers(0, len(recent), size=n_recent)]
        targets = rng.random(n_per) * self.tree.total
        picked_per = self.tree.sample(targets)
        # guard against landing on never-filled leaves
        picked_per = np.clip(picked_per, 0, self.size - 1)
        return np.concatenate([picked_recent, picked_per])

    def update_priorities(self, indices: np.ndarray, scalar_td: np.ndarray):
        if not self.use_per:
            return
        pri = np.abs(scalar_td) + self.eps_per
        self.max_priority = max(self.max_priority, float(pri.max()))
        self.tree.set(np.asarray(indices), pri ** self.alpha_per)

    def priorities(self) -> np.ndarray:
        if not self.use_per:
            raise ValueError("priorities disabled")
        leaves = self.tree.tree[self.tree.capacity: self.tree.capacity + self.size]
        return leaves ** (1.0 / self.alpha_per)


class QTable:
    """Vector Q values indexed by (weight grid point, state, action)."""

    def __init__(self, num_states: int, num_actions: int, num_values: int,
                 grid: WeightGrid):
        self.grid = grid
        self.num_actions = num_actions
        self.num_values = num_values
        self.q = np.zeros((len(grid), num_states, num_actions, num_values))

    def values(self, w, s) -> np.ndarray:
        """Q(s, a | w) for one state and weight, (A, m)."""
        return self.q[self.grid.index(w), s]

    def greedy_action(self, s: int, w: np.ndarray) -> int:
        scal = self.values(w, s) @ np.asarray(w)
        return int(np.argmax(scal))

    def greedy_table(self) -> np.ndarray:
        """Greedy action for every (state, grid point), (n_grid, S)."""
        scal = np.einsum("gsam,gm->gsa", self.q, self.grid.grid)
        return np.argmax(scal, axis=2)

    def clone(self):
        out = QTable.__new__(QTable)
        out.grid = self.grid
        out.num_actions = self.num_actions
        out.num_values = self.num_values
        out.q = self.q.copy()
        return out


def act_epsilon_greedy(qmodel: QTable, s: int, w, eps: float, rng) -> int:
    if eps > 0.0 and rng.random() < eps:
        return int(rng.integers(qmodel.num_actions))
    return qmodel.greedy_action(s, np.asarray(w, dtype=np.float64))


def envelope_target(target_q: QTable, r: np.ndarray, s2: np.ndarray,
                    done: np.ndarray, w: np.ndarray, candidates: np.ndarray,
                    gamma: float) -> np.ndarray:
    """Envelope bootstrap target for a batch of transitions.

    For each item, (a*, w*) maximize the item's own scalarization of the
    target values over actions and candidate weights; ties break to the
    lowest (action, candidate) pair. Terminal items return the raw reward.
    """
    cand = np.atleast_2d(candidates)
    cand_idx = target_q.grid.index(cand)
    cand_idx = np.unique(np.atleast_1d(cand_idx))
    n = len(s2)
    # target values at the next states for every candidate grid point
    qt = target_q.q[cand_idx][:, s2]  # (c, n, A, m)
    scal = np.einsum("cnam,nm->nac", qt, w)  # ordered so flattening is (a, c)
    flat = scal.reshape(n, -1)
    best = np.argmax(flat, axis=1)
    a_star = best // len(cand_idx)
    c_star = best % len(cand_idx)
    boot = qt[c_star, np.arange(n), a_star]  # (n, m)
    y = r + gamma * boot * (~done)[:, None]
    return y


class EnvelopeQLearner:
    """Envelope Q updates over a tabular weight-conditioned model."""

    def __init__(self, env, lr: float, grid_points: int = 51,
                 tau: float | None = None, hard_sync_every: int | None = 1500,
                 num_envelope_weights: int = 5, use_stored_weights: bool = False):
        self.env = env
        self.lr = lr
        self.tau = tau
        self.hard_sync_every = hard_sync_every
        self.num_envelope_weights = num_envelope_weights
        self.use_stored_weights = use_stored_weights
        grid = WeightGrid(env.num_values, grid_points)
        self.q = QTable(env.num_states, env.num_actions, env.num_values, grid)
        self.target = self.q.clone()
        self.updates = 0

    POLYAK_CHUNK = 25  # compound tiny-tau averaging to cut full-table passes

    def sync_target(self):
        if self.tau is not None:
            if self.updates % self.POLYAK_CHUNK == 0:
                factor = 1.0 - (1.0 - self.tau) ** self.POLYAK_CHUNK
                self.target.q += factor * (self.q.q - self.target.q)
        elif self.hard_sync_every and self.updates % self.hard_sync_every == 0:
            self.target.q = self.q.q.copy()

    def update(self, buffer: ExperienceBuffer, indices: np.ndarray, h: float,
               rng) -> float:
        """One envelope step on the given batch; returns the batch loss."""
        s = buffer.s[indices]
        a = buffer.a[indices]
        r = buffer.r[indices]
        s2 = buffer.s2[indices]
        done = buffer.done[indices]
        w = buffer.w[indices]
        if self.use_stored_weights:
            candidates = w
        else:
            fresh = rng.dirichlet(np.ones(self.env.num_values),
                                  size=self.num_envelope_weights)
            candidates = np.vstack([w, fresh])
        gamma = self.env.config.discount
        y = envelope_target(self.target, r, s2, done, w, candidates, gamma)

        g_idx = np.atleast_1d(self.q.grid.index(w))
        cur = self.q.q[g_idx, s, a]  # (n, m)
        err = cur - y
        scal_err = np.einsum("nm,nm->n", w, err)
        m = self.env.num_values
        grad = (1.0 - h) * 2.0 * err / m + h * np.sign(scal_err)[:, None] * w
        # average duplicated cells so hot cells take one lr-sized step, not one
        # per occurrence (on-policy batches repeat cells heavily)
        flat = (g_idx * self.q.q.shape[1] + s) * self.q.num_actions + a
        uniq, inverse, counts = np.unique(flat, return_inverse=True,
                                          return_counts=True)
        acc = np.zeros((len(uniq), m))
        np.add.at(acc, inverse, grad)
        acc /= counts[:, None]
        self.q.q.reshape(-1, m)[uniq] -= self.lr * acc
        self.updates += 1
        self.sync_target()

        buffer.update_priorities(indices, scal_err)
        loss = float(np.mean((1.0 - h) * np.mean(err ** 2, axis=1) + h * np.abs(scal_err)))
        return loss


@dataclass
class EQLConfig:
    total_steps: int = 120000
    lr: float = 0.1
    batch_size: int = 32
    buffer_capacity: int = 100000
    grad_steps: int = 1  # per environment step
    hard_sync_every: int | None = 1500
    tau: float | None = None
    eps0: float = 0.5
    epsinf: float = 0.0
    h0: float = 0.0
    hinf: float = 1.0
    num_envelope_weights: int = 5
    use_stored_weights: bool = False
    use_per: bool = False
    alpha_per: float = 0.6
    eps_per: float = 0.01
    recent_span: int = 500
    episode_weight_points: int = 50


def train_eql(env, config: EQLConfig, rng, reward_table=None,
              episode_weights=None) -> QTable:
    """Standalone training loop against the environment or a reward table.

    New episodes draw their exploration weight uniformly from
    ``episode_weights`` (default: an equally spaced simplex grid). Episode
    truncation at the horizon is not treated as terminal for bootstrapping.
    """
    from svsl_lab.fronts import simplex_grid

    if reward_table is None:
        reward_table = env.reward_table()
    if episode_weights is None:
        episode_weights = simplex_grid(env.num_values, config.episode_weight_points)
    learner = EnvelopeQLearner(
        env,
        lr=config.lr,
        tau=config.tau,
        hard_sync_every=config.hard_sync_every,
        num_envelope_weights=config.num_envelope_weights,
        use_stored_weights=config.use_stored_weights,
    )
    buffer = ExperienceBuffer(
        config.buffer_capacity, env.num_values, use_per=config.use_per,
        alpha_per=config.alpha_per, eps_per=config.eps_per,
    )
    sched = Schedules(config.eps0, config.epsinf, config.h0, config.hinf,
                      config.total_steps)
    s = env.start_index
    steps_in_episode = 0
    episode_id = 0
    w = episode_weights[rng.integers(len(episode_weights))]
    for t in range(config.total_steps):
        a = act_epsilon_greedy(learner.q, s, w, sched.epsilon(t), rng)
        s2 = int(env.transitions[s, a])
        r = reward_table[s * env.num_actions + a]
        done = bool(env.terminal[s2])
        buffer.add(s, a, r, s2, done, w, episode_id)
        steps_in_episode += 1
        if done or steps_in_episode >= env.horizon:
            s = env.start_index
            steps_in_episode = 0
            episode_id += 1
            w = episode_weights[rng.integers(len(episode_weights))]
        else:
            s = s2
        if len(buffer) >= config.batch_size:
            for _ in range(config.grad_steps):
                if config.use_per:
                    idx = buffer.sample_hybrid(config.batch_size, rng, config.recent_span)
                else:
                    idx = buffer.sample_uniform(config.batch_size, rng)
                learner.update(buffer, idx, sched.homotopy(t), rng)
    return learner.q


def policy_vector_return(env, qmodel: QTable, w, reward_table=None) -> np.ndarray:
    """Ground-truth vector return of the stationary greedy policy for w."""
    if reward_table is None:
        reward_table = env.reward_table()
    w = np.asarray(w, dtype=np.float64)
    s = env.start_index
    gamma = env.config.discount
    total = np.zeros(env.num_values)
    for t in range(env.horizon):
        if env.terminal[s]:
            break
        a = qmodel.greedy_action(s, w)
        total += (gamma ** t) * reward_table[s * env.num_actions + a]
        s = int(env.transitions[s, a])
    return total
