"""Preference-comparison metrics over trajectory pairs.

Everything here is purely qualitative: relations are label arrays in
{0, 0.5, 1} and the metrics count label mismatches. Bradley-Terry
probabilities appear only inside training losses, never inside metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

DEFAULT_INDIFFERENCE_TOL = 1e-6


def bt_probability(g_a, g_b):
    """Preference probability exp(g_a) / (exp(g_a) + exp(g_b)), stable form."""
    g_a = np.asarray(g_a, dtype=np.float64)
    g_b = np.asarray(g_b, dtype=np.float64)
    hi = np.maximum(g_a, g_b)
    ea = np.exp(g_a - hi)
    eb = np.exp(g_b - hi)
    return ea / (ea + eb)


def qualitative_label(a_a, a_b, tol: float = DEFAULT_INDIFFERENCE_TOL):
    """Three-way preference label: 1 if a_a wins, 0 if a_b wins, 0.5 inside tol."""
    if tol < 0:
        raise ValueError("tol must be >= 0")
    a_a = np.asarray(a_a, dtype=np.float64)
    a_b = np.asarray(a_b, dtype=np.float64)
    out = np.full(np.broadcast(a_a, a_b).shape, 0.5)
    out[a_a > a_b + tol] = 1.0
    out[a_b > a_a + tol] = 0.0
    if out.ndim == 0:
        return float(out)
    return out


def label_mismatch(labels_a, labels_b) -> np.ndarray:
    """Weak-order disagreement on a directed pair.

    A label encodes whether the first trajectory is strictly preferred (1),
    strictly dispreferred (0), or tied (0.5); the relations disagree on the
    stored pair exactly when one of them asserts the strict preference of
    the first trajectory and the other does not. A tie against a label 0 is
    therefore concordant: both relations grant "at least as aligned".
    """
    labels_a = np.asarray(labels_a, dtype=np.float64)
    labels_b = np.asarray(labels_b, dtype=np.float64)
    return (labels_a == 1.0) != (labels_b == 1.0)


def discordance(labels_a, labels_b) -> float:
    """Fraction of pairs on which two relations order the pair differently."""
    labels_a = np.asarray(labels_a, dtype=np.float64)
    labels_b = np.asarray(labels_b, dtype=np.float64)
    if labels_a.size == 0:
        raise ValueError("empty pair set")
    if labels_a.shape != labels_b.shape:
        raise ValueError("label sequences must align on the same pair set")
    return float(np.mean(label_mismatch(labels_a, labels_b)))


def gamma_index(repr_score: float, conc_score: float) -> float:
    """Clustering quality heuristic (1 - repr) / (1 + conc); lower is better."""
    return (1.0 - repr_score) / (1.0 + conc_score)


@dataclass
class PreferenceRecord:
    """One labeled comparison: trajectory refs, value-system and per-value labels."""

    traj_a: int
    traj_b: int
    y_vs: float
    y_values: np.ndarray
    agent_id: int

    def __post_init__(self):
        self.y_values = np.asarray(self.y_values, dtype=np.float64)


class TrajectoryTable:
    """Append-only store of trajectories with a discounted cell-count matrix.

    Row i of the matrix holds, for each flat (state, action) cell, the sum of
    gamma**t over the steps of trajectory i that hit that cell, so that the
    per-value alignment of every trajectory under a reward table R is the
    single sparse product ``counts @ R``.
    """

    def __init__(self, num_cells: int, gamma: float, num_actions: int):
        self.num_cells = num_cells
        self.gamma = gamma
        self.num_actions = num_actions
        self._steps = []
        self._data = []
        self._indices = []
        self._indptr = [0]
        self._matrix = None

    def __len__(self):
        return len(self._indptr) - 1

    def steps(self, idx: int) -> np.ndarray:
        return self._steps[idx]

    def add(self, steps: np.ndarray) -> int:
        """Register a trajectory given as an (n, 2) step array; returns its id."""
        steps = np.asarray(steps, dtype=np.int64).reshape(-1, 2)
        self._steps.append(steps)
        cells = steps[:, 0] * self.num_actions + steps[:, 1]
        weights = self.gamma ** np.arange(len(cells), dtype=np.float64)
        order = np.argsort(cells, kind="stable")
        cells, weights = cells[order], weights[order]
        uniq, start = np.unique(cells, return_index=True)
        sums = np.add.reduceat(weights, start) if len(cells) else weights
        self._indices.append(uniq)
        self._data.append(sums)
        self._indptr.append(self._indptr[-1] + len(uniq))
        self._matrix = None
        return len(self) - 1

    def counts(self) -> sparse.csr_matrix:
        if self._matrix is None:
            data = np.concatenate(self._data) if self._data else np.zeros(0)
            indices = np.concatenate(self._indices) if self._indices else np.zeros(0, int)
            self._matrix = sparse.csr_matrix(
                (data, indices, np.array(self._indptr)),
                shape=(len(self), self.num_cells),
            )
        return self._matrix

    def alignments(self, reward_table: np.ndarray) -> np.ndarray:
        """Discounted alignment vectors of every stored trajectory, (n, m)."""
        return np.asarray(self.counts() @ reward_table)


@dataclass
class Dataset:
    """Per-agent preference records over a shared trajectory table."""

    trajectories: TrajectoryTable
    records: list = field(default_factory=list)
    num_values: int = 2

    # columns, rebuilt lazily
    _cols: dict = field(default_factory=dict, repr=False)

    def add_record(self, record: PreferenceRecord):
        if len(record.y_values) != self.num_values:
            raise ValueError("y_values length must equal the number of values")
        self.records.append(record)
        self._cols.clear()

    def agents(self) -> np.ndarray:
        return np.unique(self.columns()["agent"]) if self.records else np.array([], int)

    def columns(self) -> dict:
        """Vectorized record columns: a, b, y_vs, y_values, agent."""
        if not self._cols:
            self._cols = {
                "a": np.array([r.traj_a for r in self.records], dtype=np.int64),
                "b": np.array([r.traj_b for r in self.records], dtype=np.int64),
                "y_vs": np.array([r.y_vs for r in self.records], dtype=np.float64),
                "y_values": (
                    np.array([r.y_values for r in self.records], dtype=np.float64)
                    if self.records
                    else np.zeros((0, self.num_values))
                ),
                "agent": np.array([r.agent_id for r in self.records], dtype=np.int64),
            }
        return self._cols

    def rows_of(self, agent_id: int) -> np.ndarray:
        return np.flatnonzero(self.columns()["agent"] == agent_id)


def pair_deltas(dataset: Dataset, alignments: np.ndarray, rows=None) -> np.ndarray:
    """alignment(traj_a) - alignment(traj_b) for the selected record rows."""
    cols = dataset.columns()
    a, b = cols["a"], cols["b"]
    if rows is not None:
        a, b = a[rows], b[rows]
    return alignments[a] - alignments[b]


def coherence(dataset: Dataset, alignments: np.ndarray, value_index: int,
              tol: float = DEFAULT_INDIFFERENCE_TOL) -> float:
    """1 minus mean per-agent discordance of an alignment relation vs labels."""
    cols = dataset.columns()
    agents = np.unique(cols["agent"])
    if len(agents) == 0:
        raise ValueError("empty dataset")
    deltas = pair_deltas(dataset, alignments[:, [value_index]])[:, 0]
    model_labels = qualitative_label(deltas, 0.0, tol)
    total = 0.0
    for j in agents:
        rows = dataset.rows_of(j)
        if len(rows) == 0:
            raise ValueError(f"agent {j} has no records")
        total += discordance(model_labels[rows], cols["y_values"][rows, value_index])
    return 1.0 - total / len(agents)


def grounding_coherence(dataset: Dataset, alignments: np.ndarray,
                        tol: float = DEFAULT_INDIFFERENCE_TOL) -> np.ndarray:
    """Coherence of every value component, as an array."""
    m = alignments.shape[1]
    return np.array([coherence(dataset, alignments, i, tol) for i in range(m)])


def cluster_labels(dataset: Dataset, alignments: np.ndarray, weights: np.ndarray,
                   tol: float = DEFAULT_INDIFFERENCE_TOL) -> np.ndarray:
    """Qualitative labels of every cluster on every record, (L, n_records)."""
    deltas = pair_deltas(dataset, alignments)  # (n, m)
    scalairsed = deltas @ weights.T  # (n, L)
    return qualitative_label(scalairsed.T, 0.0, tol)


def representativeness(dataset: Dataset, alignments: np.ndarray, weights: np.ndarray,
                       assignment: dict, tol: float = DEFAULT_INDIFFERENCE_TOL) -> float:
    """1 minus mean per-agent discordance between agents and their clusters."""
    cols = dataset.columns()
    agents = np.unique(cols["agent"])
    if len(agents) == 0:
        raise ValueError("empty dataset")
    labels = cluster_labels(dataset, alignments, weights, tol)
    total = 0.0
    for j in agents:
        if j not in assignment:
            raise ValueError(f"agent {j} is not assigned to a cluster")
        rows = dataset.rows_of(j)
        total += discordance(labels[assignment[j]][rows], cols["y_vs"][rows])
    return 1.0 - total / len(agents)


def conciseness(dataset: Dataset, alignments: np.ndarray, weights: np.ndarray,
                live_clusters, tol: float = DEFAULT_INDIFFERENCE_TOL,
                warn=None) -> float:
    """Minimum pairwise discordance between live cluster relations over all pairs.

    A single-cluster solution has no pair to compare; it scores 0 and the
    optional ``warn`` callback is invoked so reports can flag it.
    """
    live = sorted(live_clusters)
    if len(live) < 2:
        if warn is not None:
            warn("conciseness undefined for a single cluster; reporting 0")
        return 0.0
    labels = cluster_labels(dataset, alignments, weights, tol)
    best = 1.0
    for i, l in enumerate(live):
        for lp in live[i + 1:]:
            best = min(best, discordance(labels[l], labels[lp]))
    return best
