"""Learnable grounding rewards, value-system weights, and their losses.

The grounding model exposes one reward row per flat (state, action) cell, so
trajectory returns reduce to a sparse count-matrix product and every loss
gradient flows through a single (num_cells, m) table. Gradients are exact
reverse-mode, written out by hand; they are validated against central finite
differences in the test suite.
"""

from __future__ import annotations

import warnings

import numpy as np

REWARD_CLAMP = 100.0  # safeguard for unbounded output heads


def smoothed_label(y):
    """Label smoothing {0 -> 0.1, 0.5 -> 0.5, 1 -> 0.9}; rejects other inputs."""
    y = np.asarray(y, dtype=np.float64)
    ok = (y == 0.0) | (y == 0.5) | (y == 1.0)
    if not np.all(ok):
        bad = np.asarray(y)[~ok]
        raise ValueError(f"labels must be in {{0, 0.5, 1}}, got {bad.ravel()[:5]}")
    out = 0.1 + 0.8 * y
    if out.ndim == 0:
        return float(out)
    return out


def ce_loss(p: float, y_s: float) -> float:
    """Binary cross entropy -y ln p - (1-y) ln (1-p) with clamping guard."""
    if not (0.0 < p < 1.0):
        warnings.warn("probability outside (0,1); clamping")
        p = min(max(p, 1e-12), 1.0 - 1e-12)
    return float(-y_s * np.log(p) - (1.0 - y_s) * np.log(1.0 - p))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def ce_from_logits(logits, targets):
    """Stable elementwise cross entropy of sigmoid(logits) against targets."""
    return targets * _softplus(-logits) + (1.0 - targets) * _softplus(logits)


def jsd_bernoulli(p, q):
    """Jensen-Shannon divergence between Bernoulli(p) and Bernoulli(q), nats."""
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    q = np.clip(np.asarray(q, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    mid = 0.5 * (p + q)

    def kl(a, b):
        return a * np.log(a / b) + (1.0 - a) * np.log((1.0 - a) / (1.0 - b))

    out = 0.5 * kl(p, mid) + 0.5 * kl(q, mid)
    if out.ndim == 0:
        return float(out)
    return out


def per_agent_row_weights(agent_ids: np.ndarray) -> np.ndarray:
    """Weights that average first within each agent, then across agents."""
    agent_ids = np.asarray(agent_ids)
    uniq, inverse, counts = np.unique(agent_ids, return_inverse=True, return_counts=True)
    return 1.0 / (len(uniq) * counts[inverse])


class AdamOptimizer:
    """Adam with decoupled-style L2 weight decay folded into the gradient."""

    def __init__(self, size: int, lr: float, weight_decay: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        grad = grad + self.weight_decay * params
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self):
        return {"m": self.m.copy(), "v": self.v.copy(), "t": self.t}

    def load_state_dict(self, state):
        self.m = np.array(state["m"], dtype=np.float64)
        self.v = np.array(state["v"], dtype=np.float64)
        self.t = int(state["t"])

    def clone(self):
        out = AdamOptimizer(len(self.m), self.lr, self.weight_decay,
                            self.beta1, self.beta2, self.eps)
        out.load_state_dict(self.state_dict())
        return out


class RewardVectorModel:
    """Per-value reward evaluator over all (state, action) cells.

    ``tabular-tanh`` keeps one parameter per cell and value, squashed by tanh
    so rewards stay in (-1, 1). ``mlp`` runs one 3x128 tanh network per value
    over one-hot cell features, with a bias-free scalar head; its output
    activation is tanh by default and can be disabled (then the clamped
    linear head applies).
    """

    HIDDEN = 128

    def __init__(self, num_cells: int, num_values: int, mode: str = "tabular-tanh",
                 features: np.ndarray | None = None, rng=None,
                 output_activation: str = "tanh"):
        self.num_cells = num_cells
        self.num_values = num_values
        self.mode = mode
        self.output_activation = output_activation
        self._cache = None
        if mode == "tabular-tanh":
            self.params = np.zeros(num_cells * num_values)
        elif mode == "mlp":
            if features is None:
                raise ValueError("mlp mode requires a feature matrix")
            self.features = np.asarray(features, dtype=np.float64)
            d = self.features.shape[1]
            h = self.HIDDEN
            self._shapes = [(d, h), (h,), (h, h), (h,), (h, h), (h,), (h,)]
            per_value = sum(int(np.prod(s)) for s in self._shapes)
            rng = rng or np.random.default_rng(0)
            chunks = []
            for _ in range(num_values):
                for shape in self._shapes:
                    fan_in = shape[0] if len(shape) == 2 else 1
                    scale = 1.0 / np.sqrt(max(fan_in, 1))
                    chunks.append(rng.normal(0.0, scale, size=int(np.prod(shape))))
            self.params = np.concatenate(chunks)
            self._per_value = per_value
        else:
            raise ValueError(f"unknown mode {mode!r}")

    @property
    def n_params(self):
        return len(self.params)

    def _unpack(self, value_index: int):
        base = value_index * self._per_value
        out = []
        for shape in self._shapes:
            n = int(np.prod(shape))
            out.append(self.params[base: base + n].reshape(shape))
            base += n
        return out

    def table(self) -> np.ndarray:
        """Reward of every cell, (num_cells, num_values); caches activations."""
        if self.mode == "tabular-tanh":
            theta = self.params.reshape(self.num_cells, self.num_values)
            out = np.tanh(theta)
            self._cache = {"out": out}
            return out
        cols = []
        caches = []
        for i in range(self.num_values):
            w1, b1, w2, b2, w3, b3, head = self._unpack(i)
            h1 = np.tanh(self.features @ w1 + b1)
            h2 = np.tanh(h1 @ w2 + b2)
            h3 = np.tanh(h2 @ w3 + b3)
            z = h3 @ head
            if self.output_activation == "tanh":
                y = np.tanh(z)
            else:
                y = np.clip(z, -REWARD_CLAMP, REWARD_CLAMP)
            cols.append(y)
            caches.append((h1, h2, h3, z))
        self._cache = {"layers": caches}
        return np.column_stack(cols)

    def backward(self, d_table: np.ndarray) -> np.ndarray:
        """Exact gradient of a scalar loss w.r.t. params, given dL/dtable.

        Must follow a ``table()`` call on the current parameters.
        """
        if self._cache is None:
            raise RuntimeError("backward() requires a preceding table() call")
        if self.mode == "tabular-tanh":
            out = self._cache["out"]
            grad = d_table * (1.0 - out * out)
            result = grad.reshape(-1)
        else:
            grads = []
            for i in range(self.num_values):
                w1, b1, w2, b2, w3, b3, head = self._unpack(i)
                h1, h2, h3, z = self._cache["layers"][i]
                dz = d_table[:, i]
                if self.output_activation == "tanh":
                    y = np.tanh(z)
                    dz = dz * (1.0 - y * y)
                else:
                    dz = dz * ((z > -REWARD_CLAMP) & (z < REWARD_CLAMP))
                d_head = h3.T @ dz
                dh3 = np.outer(dz, head) * (1.0 - h3 * h3)
                d_w3 = h2.T @ dh3
                d_b3 = dh3.sum(axis=0)
                dh2 = (dh3 @ w3.T) * (1.0 - h2 * h2)
                d_w2 = h1.T @ dh2
                d_b2 = dh2.sum(axis=0)
                dh1 = (dh2 @ w2.T) * (1.0 - h1 * h1)
                d_w1 = self.features.T @ dh1
                d_b1 = dh1.sum(axis=0)
                for g in (d_w1, d_b1, d_w2, d_b2, d_w3, d_b3, d_head):
                    grads.append(g.reshape(-1))
            result = np.concatenate(grads)
        if not np.all(np.isfinite(result)):
            raise FloatingPointError("non-finite gradient in reward model parameters")
        return result

    def set_params(self, vec: np.ndarray):
        if len(vec) != len(self.params):
            raise ValueError("parameter vector has the wrong size")
        self.params = np.array(vec, dtype=np.float64)
        self._cache = None

    def clone(self):
        out = RewardVectorModel.__new__(RewardVectorModel)
        out.__dict__ = {
            k: (v.copy() if isinstance(v, np.ndarray) and k == "params" else v)
            for k, v in self.__dict__.items()
        }
        out._cache = None
        return out


class ValueSystemBank:
    """Up to L_max weight vectors kept on the simplex through a row softmax."""

    def __init__(self, max_clusters: int, num_values: int, rng=None):
        rng = rng or np.random.default_rng(0)
        self.max_clusters = max_clusters
        self.num_values = num_values
        self.omega = rng.standard_normal((max_clusters, num_values))

    def weights(self) -> np.ndarray:
        z = self.omega - self.omega.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def backward(self, d_weights: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. omega given dL/dW, via the softmax Jacobian."""
        w = self.weights()
        inner = (d_weights * w).sum(axis=1, keepdims=True)
        grad = w * (d_weights - inner)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient in value-system weights")
        return grad

    def set_omega(self, omega: np.ndarray):
        self.omega = np.array(omega, dtype=np.float64).reshape(
            self.max_clusters, self.num_values
        )

    def randomize_row(self, row: int, rng):
        self.omega[row] = rng.standard_normal(self.num_values)

    def clone(self):
        out = ValueSystemBank.__new__(ValueSystemBank)
        out.max_clusters = self.max_clusters
        out.num_values = self.num_values
        out.omega = self.omega.copy()
        return out


def softmax_weights(row: np.ndarray) -> np.ndarray:
    """Single-row stable softmax, for direct use on one weight vector."""
    row = np.asarray(row, dtype=np.float64)
    z = row - row.max()
    e = np.exp(z)
    return e / e.sum()


class LagrangeState:
    """Per-solution constraint multipliers.

    The running per-value maximum coherence they compare against is shared
    training state (one estimate of what the data admits, accumulated across
    every refinement), so it lives with the caller and is passed in.
    """

    def __init__(self, num_values: int, initial: float = 1.0,
                 decay: float = 5e-5, rate: float = 0.05, smoothing: float = 0.99):
        self.multipliers = np.full(num_values, float(initial))
        self.decay = decay
        self.rate = rate
        self.smoothing = smoothing

    def update(self, per_value_losses: np.ndarray, batch_coherences: np.ndarray,
               max_coherence: np.ndarray):
        """One multiplier step: raise only the value farthest below its best.

        Values sitting at (or above) the running maximum decay instead; the
        maxima array is then updated in place through the exponentially
        weighted maximum.
        """
        gaps = max_coherence - batch_coherences
        i_star = int(np.argmax(gaps))
        for i in range(len(self.multipliers)):
            if i == i_star and gaps[i_star] > 0.0:
                self.multipliers[i] = (
                    (1.0 - self.decay) * self.multipliers[i]
                    + self.rate * per_value_losses[i]
                )
            elif gaps[i] <= 0.0:
                self.multipliers[i] *= 1.0 - self.decay
        max_coherence[:] = (
            (1.0 - self.smoothing) * np.maximum(batch_coherences, max_coherence)
            + self.smoothing * max_coherence
        )

    def clone(self):
        out = LagrangeState(len(self.multipliers), decay=self.decay,
                            rate=self.rate, smoothing=self.smoothing)
        out.multipliers = self.multipliers.copy()
        return out


def grounding_loss_grad(deltas: np.ndarray, y_values: np.ndarray,
                        agent_ids: np.ndarray, smooth: bool = True):
    """Per-value cross-entropy losses and their gradient w.r.t. deltas.

    ``deltas`` holds alignment(traj_a) - alignment(traj_b) per record row.
    Rows are averaged within each agent first, then across agents.
    """
    targets = smoothed_label(y_values) if smooth else np.asarray(y_values, float)
    rw = per_agent_row_weights(agent_ids)
    ce = ce_from_logits(deltas, targets)
    loss = rw @ ce
    d_deltas = (_sigmoid(deltas) - targets) * rw[:, None]
    return loss, d_deltas


def value_system_loss_grad(deltas: np.ndarray, y_vs: np.ndarray,
                           agent_ids: np.ndarray, weights: np.ndarray,
                           row_cluster: np.ndarray, live_clusters,
                           smooth: bool = True):
    """Representativeness CE minus pairwise-JSD separation, with gradients.

    Returns (loss, dL/ddeltas, dL/dweights); ``row_cluster`` maps each record
    row to its agent's cluster and ``live_clusters`` lists the clusters that
    currently hold agents (only those enter the separation term).
    """
    targets = smoothed_label(y_vs) if smooth else np.asarray(y_vs, float)
    rw = per_agent_row_weights(agent_ids)
    n, m = deltas.shape
    d_deltas = np.zeros_like(deltas)
    d_weights = np.zeros_like(weights)

    # representativeness part: each row scored under its assigned cluster
    w_rows = weights[row_cluster]
    logits = np.einsum("nm,nm->n", deltas, w_rows)
    loss_repr = float(rw @ ce_from_logits(logits, targets))
    d_logits = (_sigmoid(logits) - targets) * rw
    d_deltas += d_logits[:, None] * w_rows
    np.add.at(d_weights, row_cluster, d_logits[:, None] * deltas)

    # separation part: summed Bernoulli JSD between live cluster pairs
    live = sorted(live_clusters)
    loss_conc = 0.0
    if len(live) >= 2:
        logit_by_cluster = {l: deltas @ weights[l] for l in live}
        for idx, l in enumerate(live):
            for lp in live[idx + 1:]:
                la, lb = logit_by_cluster[l], logit_by_cluster[lp]
                pa = np.clip(_sigmoid(la), 1e-12, 1.0 - 1e-12)
                pb = np.clip(_sigmoid(lb), 1e-12, 1.0 - 1e-12)
                loss_conc += float(rw @ jsd_bernoulli(pa, pb))
                mid = 0.5 * (pa + pb)
                logit_mid = np.log(mid) - np.log1p(-mid)
                # minus sign: separation is subtracted from the loss
                dla = -rw * 0.5 * (la - logit_mid) * pa * (1.0 - pa)
                dlb = -rw * 0.5 * (lb - logit_mid) * pb * (1.0 - pb)
                d_deltas += dla[:, None] * weights[l] + dlb[:, None] * weights[lp]
                d_weights[l] += dla @ deltas
                d_weights[lp] += dlb @ deltas
    return loss_repr - loss_conc, d_deltas, d_weights
