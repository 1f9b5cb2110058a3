"""Multi-objective MDP abstraction and the Firefighters rescue environment.

States are small tuples of categorical features with a bijective integer
encoding, transitions are deterministic table lookups, and rewards are
two-component vectors (professionalism, proximity) bounded in [-1, 1].
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

# Firefighters action indices.
EVACUATE = 0
CONTAIN_FIRE = 1
AGGRESSIVE_SUPPRESSION = 2
PREPARE_EQUIPMENT = 3
UPDATE_KNOWLEDGE = 4

FF_ACTION_NAMES = (
    "Evacuate Occupants",
    "Contain Fire",
    "Aggressive Fire Suppression",
    "Prepare Equipment",
    "Update Knowledge",
)

FF_FIRE_LEVELS = ("None", "Low", "Moderate", "High", "Severe")
FF_EQUIPMENT_LEVELS = ("Not Ready", "Ready")
FF_KNOWLEDGE_LEVELS = ("Poor", "Good")
FF_CONDITION_LEVELS = (
    "Incapacitated",
    "Moderately Injured",
    "Slightly Injured",
    "Perfect Health",
)

# Feature sizes: fire intensity, occupancy, equipment, knowledge, condition.
FF_FEATURE_SIZES = (5, 5, 2, 2, 4)


@dataclass(frozen=True)
class MOMDPConfig:
    """Shape parameters of a finite multi-objective MDP."""

    num_values: int
    discount: float
    horizon: int
    num_states: int
    num_actions: int

    def __post_init__(self):
        if self.num_values < 2:
            raise ValueError("num_values must be >= 2")
        if not (0.0 < self.discount <= 1.0):
            raise ValueError("discount must be in (0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass(frozen=True)
class FFState:
    """One firefighters state: all features are small categorical levels."""

    fire_intensity: int
    occupancy: int
    equipment: int
    knowledge: int
    ffc: int

    def encode(self) -> int:
        return (
            self.fire_intensity * 80
            + self.occupancy * 16
            + self.equipment * 8
            + self.knowledge * 4
            + self.ffc
        )

    @staticmethod
    def decode(index: int) -> "FFState":
        if not (0 <= index < 400):
            raise ValueError(f"state index {index} out of range")
        fi, rest = divmod(index, 80)
        oc, rest = divmod(rest, 16)
        eq, rest = divmod(rest, 8)
        kn, ffc = divmod(rest, 4)
        return FFState(fi, oc, eq, kn, ffc)

    def feature_names(self) -> dict:
        return {
            "fire_intensity": FF_FIRE_LEVELS[self.fire_intensity],
            "occupancy": str(self.occupancy),
            "equipment": FF_EQUIPMENT_LEVELS[self.equipment],
            "knowledge": FF_KNOWLEDGE_LEVELS[self.knowledge],
            "ffc": FF_CONDITION_LEVELS[self.ffc],
        }


@dataclass
class Trajectory:
    """A finite sequence of (state index, action index) pairs."""

    steps: np.ndarray  # (n, 2) int array

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.int64).reshape(-1, 2)

    def __len__(self):
        return self.steps.shape[0]

    def states(self) -> np.ndarray:
        return self.steps[:, 0]

    def actions(self) -> np.ndarray:
        return self.steps[:, 1]

    def cell_indices(self, num_actions: int) -> np.ndarray:
        """Flat (state, action) cell index per step."""
        return self.steps[:, 0] * num_actions + self.steps[:, 1]


def ff_transition(state: FFState, action: int, fi5_means_severe: bool = False) -> FFState:
    """Deterministic next state; all conditioned effects applied jointly.

    The printed transition rules mention a fire level 5 that the state space
    cannot reach; ``fi5_means_severe`` reinterprets those rows as level 4.
    """
    fi, oc, eq, kn, ffc = (
        state.fire_intensity,
        state.occupancy,
        state.equipment,
        state.knowledge,
        state.ffc,
    )
    fi_breaks = 4 if fi5_means_severe else 5
    if action == EVACUATE:
        new_oc = max(0, oc - 1)
        new_ffc = max(0, ffc - 1) if (fi >= 3 and eq == 0 and kn == 0) else ffc
        new_eq = 0 if fi == fi_breaks else eq
        return FFState(fi, new_oc, new_eq, kn, new_ffc)
    if action == CONTAIN_FIRE:
        return FFState(max(0, fi - 1), oc, eq, kn, ffc)
    if action == AGGRESSIVE_SUPPRESSION:
        new_fi = max(0, fi - 2)
        new_ffc = max(0, ffc - 1) if (fi >= 3 and (eq == 0 or kn == 0)) else ffc
        new_eq = 0 if fi == fi_breaks else eq
        return FFState(new_fi, oc, new_eq, kn, new_ffc)
    if action == PREPARE_EQUIPMENT:
        return FFState(fi, oc, 1, kn, ffc)
    if action == UPDATE_KNOWLEDGE:
        return FFState(fi, oc, eq, 1, ffc)
    raise ValueError(f"unknown action {action}")


def ff_reward(state: FFState, action: int, next_state: FFState) -> np.ndarray:
    """(professionalism, proximity) for a transition triple.

    An incapacitated firefighter in the next state overrides every other row
    with (-1, -1).
    """
    if next_state.ffc == 0:
        return np.array([-1.0, -1.0])
    fi, oc, eq, kn = (
        state.fire_intensity,
        state.occupancy,
        state.equipment,
        state.knowledge,
    )
    if action == EVACUATE:
        if oc == 0:
            return np.array([-1.0, -1.0])
        return np.array([1.0 - 0.2 * fi - 0.1 * kn, 1.0])
    if action == CONTAIN_FIRE:
        if fi == 0:
            return np.array([-1.0, -1.0])
        return np.array([0.8, 0.2])
    if action == AGGRESSIVE_SUPPRESSION:
        if fi == 0:
            return np.array([-1.0, -1.0])
        if eq == 0:
            return np.array([0.3, 0.7])
        return np.array([0.6, 0.7])
    if action == PREPARE_EQUIPMENT:
        if eq == 0:
            return np.array([0.5, -0.1])
        return np.array([-1.0, -1.0])
    if action == UPDATE_KNOWLEDGE:
        if kn == 0:
            return np.array([1.0, -0.5])
        return np.array([-1.0, -1.0])
    raise ValueError(f"unknown action {action}")


def ff_terminal(state: FFState) -> bool:
    """Episode ends once the fire is out and everyone is rescued, or on FFC=0."""
    return (state.fire_intensity == 0 and state.occupancy == 0) or state.ffc == 0


DEFAULT_FF_START = FFState(fire_intensity=4, occupancy=4, equipment=0, knowledge=0, ffc=3)


@dataclass
class TabularMOMDP:
    """Generic finite deterministic MOMDP given directly by its tables."""

    transitions: np.ndarray  # (S, A) next-state index
    rewards: np.ndarray  # (S, A, m)
    terminal: np.ndarray  # (S,) bool
    start_index: int = 0
    horizon: int = 50
    gamma: float = 1.0

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        self.config = MOMDPConfig(
            num_values=self.rewards.shape[2],
            discount=self.gamma,
            horizon=self.horizon,
            num_states=self.rewards.shape[0],
            num_actions=self.rewards.shape[1],
        )

    @property
    def num_states(self):
        return self.config.num_states

    @property
    def num_actions(self):
        return self.config.num_actions

    @property
    def num_values(self):
        return self.config.num_values

    def reward_table(self) -> np.ndarray:
        return self.rewards.reshape(-1, self.num_values)


@dataclass
class FirefightersEnv:
    """Tabular Firefighters MOMDP: every lookup is precomputed at build time.

    Immutable after construction; safe for concurrent read access.
    """

    fi5_means_severe: bool = False
    start_state: FFState = DEFAULT_FF_START
    horizon: int = 50
    config: MOMDPConfig = field(init=False)
    transitions: np.ndarray = field(init=False)  # (400, 5) next-state index
    rewards: np.ndarray = field(init=False)  # (400, 5, 2)
    terminal: np.ndarray = field(init=False)  # (400,) bool

    def __post_init__(self):
        self.config = MOMDPConfig(
            num_values=2, discount=1.0, horizon=self.horizon, num_states=400, num_actions=5
        )
        n_s, n_a = 400, 5
        self.transitions = np.zeros((n_s, n_a), dtype=np.int64)
        self.rewards = np.zeros((n_s, n_a, 2), dtype=np.float64)
        self.terminal = np.zeros(n_s, dtype=bool)
        for s_idx in range(n_s):
            s = FFState.decode(s_idx)
            self.terminal[s_idx] = ff_terminal(s)
            for a in range(n_a):
                s_next = ff_transition(s, a, self.fi5_means_severe)
                self.transitions[s_idx, a] = s_next.encode()
                self.rewards[s_idx, a] = ff_reward(s, a, s_next)
        self.transitions.setflags(write=False)
        self.rewards.setflags(write=False)
        self.terminal.setflags(write=False)

    @property
    def num_states(self):
        return self.config.num_states

    @property
    def num_actions(self):
        return self.config.num_actions

    @property
    def num_values(self):
        return self.config.num_values

    @property
    def start_index(self):
        return self.start_state.encode()

    def reward_table(self) -> np.ndarray:
        """Ground-truth rewards as a flat ((num_states * num_actions), m) table."""
        return self.rewards.reshape(-1, self.num_values)

    def feature_matrix(self, onehot: str = "factored") -> np.ndarray:
        """One-hot feature rows for every (state, action) cell.

        ``factored`` concatenates per-feature one-hots (5+5+2+2+4+5 columns);
        ``joint`` one-hots the whole cell (2000 columns).
        """
        n_cells = self.num_states * self.num_actions
        if onehot == "joint":
            return np.eye(n_cells)
        if onehot != "factored":
            raise ValueError(f"unknown onehot mode {onehot!r}")
        dims = list(FF_FEATURE_SIZES) + [self.num_actions]
        out = np.zeros((n_cells, sum(dims)))
        for s_idx in range(self.num_states):
            s = FFState.decode(s_idx)
            levels = [s.fire_intensity, s.occupancy, s.equipment, s.knowledge, s.ffc]
            for a in range(self.num_actions):
                row = s_idx * self.num_actions + a
                offset = 0
                for level, size in zip(levels + [a], dims):
                    out[row, offset + level] = 1.0
                    offset += size
        return out

    def dump_csv(self) -> str:
        """Exhaustive 2000-row dump for oracle cross-checking.

        Columns: state, action, next state, both reward components, and a
        flag marking transitions that end the episode.
        """
        buf = io.StringIO()
        buf.write(
            "state_index,action_index,next_state_index,"
            "r_professionalism,r_proximity,terminal_flag\n"
        )
        for s_idx in range(self.num_states):
            for a in range(self.num_actions):
                nxt = self.transitions[s_idx, a]
                r = self.rewards[s_idx, a]
                flag = int(self.terminal[nxt])
                buf.write(f"{s_idx},{a},{nxt},{float(r[0])!r},{float(r[1])!r},{flag}\n")
        return buf.getvalue()


def rollout(env: FirefightersEnv, policy, rng: np.random.Generator,
            start: FFState | None = None, epsilon: float = 0.0) -> Trajectory:
    """Roll a policy from ``start`` until the terminal predicate or horizon.

    ``policy`` maps (state_index, step) -> action; with probability
    ``epsilon`` a uniform random action is taken instead. Deterministic for a
    fixed generator state.
    """
    s_idx = (start or env.start_state).encode()
    steps = []
    for t in range(env.horizon):
        if env.terminal[s_idx]:
            break
        if epsilon > 0.0 and rng.random() < epsilon:
            a = int(rng.integers(env.num_actions))
        else:
            a = int(policy(s_idx, t))
        steps.append((s_idx, a))
        s_idx = int(env.transitions[s_idx, a])
    return Trajectory(np.array(steps, dtype=np.int64).reshape(-1, 2))


def discounted_alignment(traj: Trajectory, reward_table: np.ndarray, gamma: float,
                         num_actions: int = 5) -> np.ndarray:
    """Componentwise discounted return of a trajectory under a reward table.

    ``reward_table`` has one row per flat (state, action) cell.
    """
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must be in (0, 1]")
    m = reward_table.shape[1]
    if len(traj) == 0:
        return np.zeros(m)
    cells = traj.cell_indices(num_actions)
    discounts = gamma ** np.arange(len(traj))
    return discounts @ reward_table[cells]
