"""Social value system learning from pairwise trajectory preferences."""

from svsl_lab.environment import (
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
from svsl_lab.fronts import Front, dp_oracle_front, hypervolume, mul, pareto_filter
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

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
