import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from svsl_lab.metrics import (
    Dataset,
    PreferenceRecord,
    TrajectoryTable,
    bt_probability,
    coherence,
    conciseness,
    discordance,
    gamma_index,
    grounding_coherence,
    qualitative_label,
    representativeness,
)


def test_bt_probability_examples():
    assert bt_probability(1.3, 1.3) == 0.5
    assert abs(bt_probability(2.0, 1.0) - 1.0 / (1.0 + math.exp(-1.0))) < 1e-15
    assert abs(bt_probability(100.0, -100.0) - 1.0) < 1e-12
    assert np.isfinite(bt_probability(1e4, -1e4))


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_bt_probability_complement(a, b):
    assert abs(bt_probability(a, b) + bt_probability(b, a) - 1.0) < 1e-12


def test_qualitative_label_examples():
    assert qualitative_label(1.0, 1.0, 1e-6) == 0.5
    assert qualitative_label(2.0, 1.0, 1e-6) == 1.0
    assert qualitative_label(1.0, 1.0000005, 1e-6) == 0.5
    with pytest.raises(ValueError):
        qualitative_label(1.0, 2.0, -1.0)


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_qualitative_label_antisymmetric(a, b):
    assert (qualitative_label(a, b) == 1.0) == (qualitative_label(b, a) == 0.0)


def test_discordance_examples():
    assert discordance([1, 0, 0.5, 1], [1, 0, 0.5, 1]) == 0.0
    assert discordance([1, 1, 0, 0.5], [1, 0, 0, 0.5]) == 0.25
    assert discordance([1, 1, 0, 0], [0, 0, 1, 1]) == 1.0
    with pytest.raises(ValueError):
        discordance([], [])
    a, b = np.array([1, 0.5, 0.0]), np.array([0.5, 0.5, 1.0])
    assert discordance(a, b) == discordance(b, a)


def test_discordance_weak_order_on_directed_pairs():
    # strict preference of the first trajectory against a tie disagrees;
    # a tie against a strict preference of the second does not (both grant
    # "at least as aligned" on the stored orientation)
    assert discordance([1.0], [0.5]) == 1.0
    assert discordance([0.0], [0.5]) == 0.0
    assert discordance([0.5], [0.0]) == 0.0


def test_gamma_index():
    assert gamma_index(1.0, 0.0) == 0.0
    assert abs(gamma_index(0.968, 0.049) - 0.032 / 1.049) < 1e-15
    assert abs(gamma_index(0.915, 0.163) - 0.085 / 1.163) < 1e-15
    # decreasing in both arguments
    assert gamma_index(0.9, 0.1) > gamma_index(0.95, 0.1) > gamma_index(0.95, 0.2)


def _toy_dataset():
    """Two trajectories per slot, tiny hand-checkable label sets."""
    table = TrajectoryTable(num_cells=4, gamma=1.0, num_actions=2)
    # trajectory i hits cell i once
    for c in range(4):
        table.add(np.array([[c // 2, c % 2]]))
    ds = Dataset(trajectories=table, num_values=2)
    return ds


def test_coherence_hand_average():
    ds = _toy_dataset()
    # reward table places value-0 alignment equal to the cell index
    reward = np.column_stack([np.arange(4.0), np.zeros(4)])
    align = ds.trajectories.alignments(reward)
    # agent 0: alignment relation reproduced on 4 of 5 rows -> discordance 0.2
    for k in range(5):
        y = 1.0 if k < 4 else 0.0  # last label contradicts (3 > 0)
        ds.add_record(PreferenceRecord(3, 0, 0.5, [y, 0.5], agent_id=0))
    # agent 1: 3 of 5 match -> discordance 0.4
    for k in range(5):
        y = 1.0 if k < 3 else 0.5
        ds.add_record(PreferenceRecord(2, 1, 0.5, [y, 0.5], agent_id=1))
    assert abs(coherence(ds, align, 0) - 0.7) < 1e-12
    # value 1 alignments are all zero -> model labels 0.5 matching every y_values[1]
    assert coherence(ds, align, 1) == 1.0
    chrs = grounding_coherence(ds, align)
    assert np.allclose(chrs, [0.7, 1.0])


def test_representativeness_single_agent():
    ds = _toy_dataset()
    reward = np.column_stack([np.arange(4.0), np.zeros(4)])
    align = ds.trajectories.alignments(reward)
    for k in range(10):
        y = 1.0 if k > 0 else 0.0  # one of ten rows disagrees under cluster 0
        ds.add_record(PreferenceRecord(3, 0, y, [y, y], agent_id=0))
    weights = np.array([[1.0, 0.0], [0.0, 1.0]])
    score = representativeness(ds, align, weights, {0: 0})
    assert abs(score - 0.9) < 1e-12
    with pytest.raises(ValueError):
        representativeness(ds, align, weights, {})


def test_conciseness_min_and_single_cluster():
    ds = _toy_dataset()
    for _ in range(2):
        ds.add_record(PreferenceRecord(3, 0, 1.0, [1.0, 1.0], agent_id=0))
    align = ds.trajectories.alignments(np.column_stack([np.arange(4.0), np.zeros(4)]))
    same = np.array([[0.6, 0.4], [0.6, 0.4]])
    assert conciseness(ds, align, same, live_clusters=[0, 1]) == 0.0
    flags = []
    assert conciseness(ds, align, same, live_clusters=[0], warn=flags.append) == 0.0
    assert flags


def test_conciseness_three_cluster_hand_min():
    # relations realized directly as label rows via crafted weights
    table = TrajectoryTable(num_cells=2, gamma=1.0, num_actions=1)
    table.add(np.array([[0, 0]]))
    table.add(np.array([[1, 0]]))
    ds = Dataset(trajectories=table, num_values=2)
    for _ in range(10):
        ds.add_record(PreferenceRecord(0, 1, 1.0, [1.0, 1.0], agent_id=0))
    align = ds.trajectories.alignments(np.array([[1.0, 0.0], [0.0, 1.0]]))
    # cluster scalarized deltas: +1, -1, +0.2 -> labels 1, 0, 1
    weights = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.4]])
    got = conciseness(ds, align, weights, live_clusters=[0, 1, 2])
    # pairwise discordances: (0,1)=1.0, (0,2)=0.0, (1,2)=1.0
    assert got == 0.0
    got = conciseness(ds, align, weights[[0, 1]], live_clusters=[0, 1])
    assert got == 1.0


def _brute_force_metrics(ds, align, weights, assignment, tol=1e-6):
    """Naive double-loop versions used as an independent oracle."""

    def label(x, y):
        if x > y + tol:
            return 1.0
        if y > x + tol:
            return 0.0
        return 0.5

    def disagree(l1, l2):
        # weak order on the stored orientation: compare "first strictly wins"
        return (l1 == 1.0) != (l2 == 1.0)

    agents = sorted({r.agent_id for r in ds.records})
    m = align.shape[1]
    chrs = []
    for i in range(m):
        acc = 0.0
        for j in agents:
            recs = [r for r in ds.records if r.agent_id == j]
            bad = sum(
                disagree(label(align[r.traj_a, i], align[r.traj_b, i]), r.y_values[i])
                for r in recs
            )
            acc += bad / len(recs)
        chrs.append(1.0 - acc / len(agents))
    acc = 0.0
    for j in agents:
        recs = [r for r in ds.records if r.agent_id == j]
        w = weights[assignment[j]]
        bad = sum(
            disagree(
                label(float(w @ align[r.traj_a]), float(w @ align[r.traj_b])), r.y_vs
            )
            for r in recs
        )
        acc += bad / len(recs)
    rep = 1.0 - acc / len(agents)
    live = sorted(set(assignment.values()))
    conc = 1.0
    found = False
    for i, l in enumerate(live):
        for lp in live[i + 1:]:
            bad = 0
            for r in ds.records:
                la = label(
                    float(weights[l] @ align[r.traj_a]), float(weights[l] @ align[r.traj_b])
                )
                lb = label(
                    float(weights[lp] @ align[r.traj_a]),
                    float(weights[lp] @ align[r.traj_b]),
                )
                bad += disagree(la, lb)
            conc = min(conc, bad / len(ds.records))
            found = True
    if not found:
        conc = 0.0
    return np.array(chrs), rep, conc


def test_brute_force_equivalence_small_instances():
    rng = np.random.default_rng(42)
    for _ in range(25):
        n_traj = int(rng.integers(2, 7))
        n_agents = int(rng.integers(1, 5))
        n_clusters = int(rng.integers(1, 4))
        table = TrajectoryTable(num_cells=6, gamma=1.0, num_actions=2)
        for _ in range(n_traj):
            steps = rng.integers(0, [3, 2], size=(int(rng.integers(1, 5)), 2))
            table.add(steps)
        ds = Dataset(trajectories=table, num_values=2)
        label_pool = np.array([0.0, 0.5, 1.0])
        for j in range(n_agents):
            for _ in range(int(rng.integers(1, 8))):
                a, b = rng.choice(n_traj, size=2, replace=False)
                ds.add_record(
                    PreferenceRecord(
                        int(a), int(b),
                        float(rng.choice(label_pool)),
                        rng.choice(label_pool, size=2),
                        agent_id=j,
                    )
                )
        reward = rng.normal(size=(6, 2))
        weights = rng.dirichlet(np.ones(2), size=n_clusters)
        assignment = {j: int(rng.integers(n_clusters)) for j in range(n_agents)}
        align = ds.trajectories.alignments(reward)

        chrs_ref, rep_ref, conc_ref = _brute_force_metrics(ds, align, weights, assignment)
        chrs = grounding_coherence(ds, align)
        rep = representativeness(ds, align, weights, assignment)
        conc = conciseness(ds, align, weights, sorted(set(assignment.values())))
        assert np.array_equal(chrs, chrs_ref)
        assert rep == rep_ref
        assert conc == conc_ref
        assert np.all(chrs >= 0.0) and np.all(chrs <= 1.0)
        assert 0.0 <= rep <= 1.0
        assert 0.0 <= conc <= 1.0


def test_trajectory_table_discounting():
    table = TrajectoryTable(num_cells=4, gamma=0.5, num_actions=2)
    # repeats the same cell, discounted occupancy 1 + 0.25
    table.add(np.array([[0, 1], [1, 0], [0, 1]]))
    counts = table.counts().toarray()
    assert np.allclose(counts[0], [0.0, 1.25, 0.5, 0.0])
