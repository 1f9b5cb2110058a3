import numpy as np
import pytest

from svsl_lab.environment import (
    AGGRESSIVE_SUPPRESSION,
    CONTAIN_FIRE,
    EVACUATE,
    PREPARE_EQUIPMENT,
    UPDATE_KNOWLEDGE,
    FirefightersEnv,
    FFState,
    MOMDPConfig,
    Trajectory,
    discounted_alignment,
    ff_reward,
    ff_terminal,
    ff_transition,
    rollout,
)


@pytest.fixture(scope="module")
def env():
    return FirefightersEnv()


def test_config_invariants(env):
    cfg = env.config
    assert cfg.num_values == 2
    assert cfg.num_states == 400
    assert cfg.num_actions == 5
    assert cfg.discount == 1.0
    assert cfg.horizon == 50
    with pytest.raises(ValueError):
        MOMDPConfig(num_values=1, discount=1.0, horizon=50, num_states=4, num_actions=2)
    with pytest.raises(ValueError):
        MOMDPConfig(num_values=2, discount=0.0, horizon=50, num_states=4, num_actions=2)


def test_state_encode_decode_roundtrip():
    for idx in range(400):
        assert FFState.decode(idx).encode() == idx
    assert FFState(4, 4, 1, 1, 3).encode() == 399
    with pytest.raises(ValueError):
        FFState.decode(400)


def test_transition_examples():
    s = ff_transition(FFState(3, 2, 1, 1, 3), CONTAIN_FIRE)
    assert s.fire_intensity == 2
    assert (s.occupancy, s.equipment, s.knowledge, s.ffc) == (2, 1, 1, 3)

    s = ff_transition(FFState(2, 2, 0, 0, 3), PREPARE_EQUIPMENT)
    assert s == FFState(2, 2, 1, 0, 3)

    s = ff_transition(FFState(4, 2, 0, 1, 3), AGGRESSIVE_SUPPRESSION)
    assert s.fire_intensity == 2
    assert s.ffc == 2

    # evacuate applies all effects jointly and clamps at zero
    s = ff_transition(FFState(3, 0, 0, 0, 1), EVACUATE)
    assert s.occupancy == 0
    assert s.ffc == 0


def test_reward_examples():
    nxt = FFState(2, 2, 0, 1, 3)
    r = ff_reward(FFState(2, 3, 0, 1, 3), EVACUATE, nxt)
    assert np.allclose(r, [0.5, 1.0])

    r = ff_reward(FFState(0, 3, 0, 0, 3), CONTAIN_FIRE, FFState(0, 3, 0, 0, 3))
    assert np.allclose(r, [-1.0, -1.0])

    # incapacitation in the next state overrides everything
    r = ff_reward(FFState(2, 3, 0, 0, 0), UPDATE_KNOWLEDGE, FFState(2, 3, 0, 1, 0))
    assert np.allclose(r, [-1.0, -1.0])


def test_exhaustive_tables_defined_and_bounded(env):
    assert env.transitions.shape == (400, 5)
    assert env.rewards.shape == (400, 5, 2)
    assert np.all(env.transitions >= 0) and np.all(env.transitions < 400)
    assert np.all(env.rewards >= -1.0) and np.all(env.rewards <= 1.0)
    assert np.all(np.isfinite(env.rewards))


def test_terminal_predicate(env):
    assert ff_terminal(FFState(0, 0, 0, 0, 3))
    assert ff_terminal(FFState(2, 3, 0, 0, 0))
    assert not ff_terminal(FFState(0, 1, 0, 0, 3))


def test_rollout_constant_prepare(env):
    rng = np.random.default_rng(0)
    traj = rollout(env, lambda s, t: PREPARE_EQUIPMENT, rng)
    assert len(traj) == 50  # never reaches a terminal state
    # first step earns (0.5, -0.1); all later prepares earn (-1, -1)
    cells = traj.cell_indices(5)
    rewards = env.reward_table()[cells]
    assert np.allclose(rewards[0], [0.5, -0.1])
    assert np.allclose(rewards[1:], -1.0)


def test_rollout_respects_horizon_and_seed(env):
    short = FirefightersEnv(horizon=1)
    traj = rollout(short, lambda s, t: CONTAIN_FIRE, np.random.default_rng(1))
    assert len(traj) == 1

    pol = lambda s, t: int(s % 5)
    t1 = rollout(env, pol, np.random.default_rng(7), epsilon=0.3)
    t2 = rollout(env, pol, np.random.default_rng(7), epsilon=0.3)
    assert np.array_equal(t1.steps, t2.steps)


def test_rollout_stops_at_terminal(env):
    # drive straight to fire-out + full evacuation, then confirm no extra steps
    plan = [CONTAIN_FIRE] * 4 + [EVACUATE] * 4 + [CONTAIN_FIRE] * 10
    traj = rollout(env, lambda s, t: plan[t], np.random.default_rng(0))
    assert len(traj) == 8
    for s_idx in traj.states():
        assert not env.terminal[s_idx]


def test_discounted_alignment(env):
    table = np.array([[1.0, 0.0], [0.0, 1.0]])
    traj = Trajectory(np.array([[0, 0], [0, 1]]))
    assert np.allclose(discounted_alignment(traj, table, 1.0, num_actions=2), [1.0, 1.0])
    assert np.allclose(discounted_alignment(traj, table, 0.99, num_actions=2), [1.0, 0.99])
    empty = Trajectory(np.zeros((0, 2)))
    assert np.allclose(discounted_alignment(empty, table, 1.0, num_actions=2), [0.0, 0.0])
    with pytest.raises(ValueError):
        discounted_alignment(traj, table, 0.0, num_actions=2)


def test_dump_matches_checked_in_golden(env, tmp_path):
    import pathlib

    golden = pathlib.Path(__file__).parent / "golden" / "ff_env.csv"
    assert env.dump_csv() == golden.read_text()


def test_feature_matrix_shapes(env):
    fac = env.feature_matrix("factored")
    assert fac.shape == (2000, 5 + 5 + 2 + 2 + 4 + 5)
    assert np.all(fac.sum(axis=1) == 6)  # one hot per feature group
    joint = env.feature_matrix("joint")
    assert joint.shape == (2000, 2000)
    with pytest.raises(ValueError):
        env.feature_matrix("other")
