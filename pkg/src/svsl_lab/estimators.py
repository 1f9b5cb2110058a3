"""Estimator-style entry points over the learning pipelines.

These wrappers follow the scikit-learn protocol: constructor arguments are
stored verbatim, ``fit`` performs the work and sets trailing-underscore
attributes, and ``get_params``/``set_params`` come from ``BaseEstimator`` so
the learners compose with model-selection tooling. The heavy lifting lives in
the pipeline modules; everything here is surface.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from svsl_lab.config import Config
from svsl_lab.metrics import Dataset, qualitative_label


def _check_dataset(dataset):
    if not isinstance(dataset, Dataset):
        raise TypeError("expected a preference Dataset")
    if not dataset.records:
        raise ValueError("dataset has no records")
    return dataset


def _check_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet")


class _ClusteringMixin:
    """Shared prediction surface once weights_, assignment_, model_ exist."""

    def predict(self, pairs):
        """Value-system labels of (traj_a, traj_b) id pairs per cluster owner.

        ``pairs`` is an (n, 3) array-like of (agent_id, traj_a, traj_b); the
        label comes from the agent's assigned cluster relation.
        """
        _check_fitted(self, "assignment_")
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 3)
        align = self.dataset_.trajectories.alignments(self.model_.table())
        out = np.zeros(len(pairs))
        for k, (agent, a, b) in enumerate(pairs):
            w = self.weights_[self.assignment_[int(agent)]]
            out[k] = qualitative_label(float(w @ align[a]), float(w @ align[b]))
        return out

    def score(self, dataset=None):
        """Held-out representativeness of the fitted social value system."""
        from svsl_lab.clustering import EMEngine, EMSources

        _check_fitted(self, "assignment_")
        data = _check_dataset(dataset) if dataset is not None else self.dataset_
        engine = EMEngine(EMSources.offline(data), self.model_, self.bank_,
                          self.config_)
        return engine.score(self.solution_)["representativeness"]


class SVSL(BaseEstimator, _ClusteringMixin):
    """Offline social value system learning on a static preference dataset."""

    def __init__(self, L_max=10, iterations=100, a_ref=None, seed=0,
                 reward_mode="tabular-tanh", config=None):
        self.L_max = L_max
        self.iterations = iterations
        self.a_ref = a_ref
        self.seed = seed
        self.reward_mode = reward_mode
        self.config = config

    def _make_config(self):
        cfg = self.config or Config.ff_svsl()
        from dataclasses import replace

        return replace(cfg, L_max=self.L_max, I=self.iterations,
                       reward_mode=self.reward_mode)

    def fit(self, dataset, env=None):
        from svsl_lab.clustering import EMEngine, EMSources, run_svsl
        from svsl_lab.models import RewardVectorModel, ValueSystemBank

        dataset = _check_dataset(dataset)
        cfg = self._make_config()
        rng = np.random.default_rng(self.seed)
        num_cells = dataset.trajectories.num_cells
        features = None
        if cfg.reward_mode == "mlp":
            if env is None:
                raise ValueError("mlp mode needs the environment for features")
            features = env.feature_matrix(cfg.onehot)
        model = RewardVectorModel(num_cells, dataset.num_values,
                                  mode=cfg.reward_mode, features=features, rng=rng)
        bank = ValueSystemBank(cfg.L_max, dataset.num_values, rng=rng)
        engine = EMEngine(EMSources.offline(dataset), model, bank, cfg)
        if self.a_ref is not None:
            sol = run_svsl(engine, rng, a_ref=self.a_ref,
                           max_iterations=cfg.max_warm_iterations)
        else:
            sol = run_svsl(engine, rng, iterations=cfg.I)
        engine._load(sol)
        self.config_ = cfg
        self.dataset_ = dataset
        self.model_ = model
        self.bank_ = bank
        self.solution_ = sol
        self.weights_ = bank.weights()
        self.assignment_ = sol.assignment()
        self.n_clusters_ = sol.n_clusters
        self.scores_ = dict(sol.scores) if sol.scores else engine.score(sol)
        return self


class SVSLP(BaseEstimator, _ClusteringMixin):
    """Online social value system learning with policy training."""

    def __init__(self, seed=0, total_steps=None, reward_mode="tabular-tanh",
                 config=None):
        self.seed = seed
        self.total_steps = total_steps
        self.reward_mode = reward_mode
        self.config = config

    def fit(self, dataset, env=None, society=None, answer_sources=None):
        from dataclasses import replace

        from svsl_lab.orchestrator import run_svslp

        dataset = _check_dataset(dataset)
        if env is None or society is None:
            raise ValueError("fit requires the environment and the society")
        cfg = replace(self.config or Config.ff_svslp(),
                      reward_mode=self.reward_mode)
        result = run_svslp(env, society, dataset, cfg, seed=self.seed,
                           answer_sources=answer_sources,
                           total_steps=self.total_steps)
        self.config_ = cfg
        self.dataset_ = dataset
        self.result_ = result
        self.model_ = result.model
        self.bank_ = result.bank
        self.solution_ = result.solution
        self.weights_ = result.bank.weights()
        self.assignment_ = result.solution.assignment()
        self.n_clusters_ = result.solution.n_clusters
        self.qlearner_ = result.qlearner
        self.timeline_ = result.timeline
        return self

    def predict_action(self, state, weight):
        _check_fitted(self, "qlearner_")
        return self.qlearner_.q.greedy_action(int(state), np.asarray(weight))


class PbMORL(BaseEstimator, _ClusteringMixin):
    """Pooled preference-based reward learning baseline with post-hoc clusters."""

    def __init__(self, seed=0, config=None):
        self.seed = seed
        self.config = config

    def fit(self, dataset, env=None, society=None):
        from svsl_lab.orchestrator import run_pbmorl_baseline

        dataset = _check_dataset(dataset)
        if env is None or society is None:
            raise ValueError("fit requires the environment and the society")
        cfg = self.config or Config.ff_pbmorl()
        result = run_pbmorl_baseline(env, society, dataset, cfg, seed=self.seed)
        self.config_ = cfg
        self.dataset_ = dataset
        self.result_ = result
        self.model_ = result.model
        self.bank_ = result.bank
        self.solution_ = result.solution
        self.weights_ = result.bank.weights()
        self.assignment_ = result.solution.assignment()
        self.n_clusters_ = result.solution.n_clusters
        self.qlearner_ = result.qlearner
        return self


class EnvelopeQ(BaseEstimator):
    """Vanilla weight-conditioned Q-learning against a known reward table."""

    def __init__(self, seed=0, config=None):
        self.seed = seed
        self.config = config

    def fit(self, env, reward_table=None):
        from svsl_lab.eql import EQLConfig, train_eql

        cfg = self.config or Config.ff_eql()
        eql_cfg = EQLConfig(
            total_steps=cfg.T, lr=cfg.alpha_eql, batch_size=cfg.b_pi,
            buffer_capacity=cfg.S_e, grad_steps=cfg.T_pi,
            hard_sync_every=int(cfg.tau_or_tu) if cfg.tau_or_tu >= 1 else None,
            tau=cfg.tau_or_tu if cfg.tau_or_tu < 1 else None,
            eps0=cfg.eps0, epsinf=cfg.epsinf, h0=cfg.h0, hinf=cfg.hinf,
            num_envelope_weights=cfg.N_w, use_stored_weights=cfg.U_w,
            use_per=cfg.alpha_per > 0, alpha_per=cfg.alpha_per or 0.6,
            eps_per=cfg.eps_per, recent_span=max(cfg.b_pi, cfg.K),
            episode_weight_points=cfg.weight_grid_points,
        )
        rng = np.random.default_rng(self.seed)
        self.q_ = train_eql(env, eql_cfg, rng, reward_table=reward_table)
        self.env_ = env
        self.config_ = cfg
        return self

    def predict(self, states, weight):
        _check_fitted(self, "q_")
        w = np.asarray(weight, dtype=np.float64)
        return np.array([self.q_.greedy_action(int(s), w) for s in np.atleast_1d(states)])

    def front(self, weight_grid=None):
        """Vector returns of the greedy policies over a weight grid."""
        from svsl_lab.eql import policy_vector_return
        from svsl_lab.fronts import simplex_grid, snap_returns

        _check_fitted(self, "q_")
        if weight_grid is None:
            weight_grid = simplex_grid(self.env_.num_values,
                                       self.config_.weight_grid_points)
        return snap_returns(
            [policy_vector_return(self.env_, self.q_, w) for w in weight_grid]
        )
