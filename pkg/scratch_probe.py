"""Full-scale SVSL-P probe: one seed, T=200000, mlp grounding."""
import sys
import time
from dataclasses import replace

import numpy as np

from svsl_lab.environment import FirefightersEnv
from svsl_lab.config import Config
from svsl_lab.society import build_society, build_dataset
from svsl_lab.orchestrator import run_svslp
from svsl_lab.clustering import EMEngine, EMSources
from svsl_lab.models import RewardVectorModel, ValueSystemBank
from svsl_lab.fronts import dp_oracle_front, simplex_grid, pareto_filter, mul, snap_returns, hypervolume
from svsl_lab.eql import policy_vector_return

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
env = FirefightersEnv()
cfg = replace(Config.ff_svslp(), reward_mode="mlp")
rng = np.random.default_rng(0)
soc = build_society(env, cfg, rng)
train, test = build_dataset(soc, cfg, rng)
oracle = dp_oracle_front(env, simplex_grid(2, 50))

t0 = time.time()
res = run_svslp(env, soc, train, cfg, seed=seed)
print(f"run took {time.time()-t0:.0f}s, events={len(res.timeline)}")
for e in res.timeline[::80]:
    print(e)
print("final train event:", res.timeline[-1])

# held-out scores
test_engine = EMEngine(EMSources.offline(test), res.model, res.bank, cfg)
test_engine.agent_list = sorted(int(j) for j in test.agents())
st = test_engine.score(res.solution)
print("TEST:", {k: (np.round(v, 4).tolist() if isinstance(v, np.ndarray) else round(float(v), 4))
               for k, v in st.items()})

# cluster front vs oracle
live = res.solution.live_clusters()
weights = res.bank.weights()
cluster_returns = snap_returns([policy_vector_return(env, res.qlearner.q, weights[l]) for l in live])
front = pareto_filter(cluster_returns)
print("cluster weights:", np.round(weights[live], 3).tolist())
print("cluster returns:", cluster_returns.tolist())
print("cluster front size:", len(front), "HV:", hypervolume(front, (0.0, 0.0)))
print("cluster MUL:", mul(cluster_returns, oracle))
# "all" front over every live-cluster candidate == same here; also grid policies
grid_returns = snap_returns([policy_vector_return(env, res.qlearner.q, w) for w in simplex_grid(2, 50)])
print("grid-front MUL:", mul(grid_returns, oracle), "HV:", hypervolume(pareto_filter(grid_returns), (0.0, 0.0)))
