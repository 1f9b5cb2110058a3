"""Run configuration mirroring the experiment hyperparameter names.

JSON config files use the table's symbols verbatim (``lambda``, ``E_r``,
``tau_or_tu`` ...); the dataclass stores them under python-safe attribute
names where needed. Defaults follow the firefighters SVSL-P column; the
per-method constructors override what differs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from typing import ClassVar


@dataclass
class Config:
    # clustering / value-system learning
    L_max: int = 10
    mrt: float = 0.25
    lambda_init: float = 1.0
    alpha_lambda: float = 0.05
    gamma_lambda: float = 5e-5
    alpha_theta: float = 0.0003
    alpha_omega: float = 0.005
    A_ref: float = 0.85
    I: int = 100  # outer iterations when not stopping on A_ref
    N: int = 5
    E_r: int = 2
    m_r: int = 3
    p_m: float = 0.1
    s_m: float = 0.1
    r_lambda: float = 0.99
    merge_threshold: float = 0.05
    weight_decay: float = 1e-4
    max_warm_iterations: int = 4000

    # online preference collection
    K: int = 500
    N_s: int = 300
    N_a: int = 11
    N_w: int = 5
    b_ep: int = 50
    b_mp: int = 50
    S_p: int = 10000
    b: int = 256  # bulk preference batch (pooled reward learning)
    T_i: int = 0  # initial random exploration steps

    # policy learning
    gamma: float = 1.0
    alpha_eql: float = 0.1
    T: int = 200000
    h0: float = 0.05
    hinf: float = 0.9
    eps0: float = 0.5
    epsinf: float = 0.05
    T_pi: int = 2
    tau_or_tu: float = 0.0001
    b_pi: int = 256
    S_e: int = 500000
    alpha_per: float = 0.6
    eps_per: float = 0.01
    U_w: bool = True

    # environment / model
    env: str = "ff"
    fi5_means_severe: bool = False
    horizon: int = 50
    reward_mode: str = "tabular-tanh"
    onehot: str = "factored"
    q_grid_points: int = 51
    weight_grid_points: int = 50

    # society protocol
    agents_per_weight: int = 3
    trajectories_per_agent: int = 200
    rational_fraction: float = 0.8
    rational_epsilon: float = 0.1
    pairs_per_kind: int = 200

    _JSON_ALIASES: ClassVar[dict] = {"lambda_init": "lambda"}

    def to_json(self) -> str:
        payload = {}
        for f in fields(self):
            if f.name.startswith("_"):
                continue
            payload[self._JSON_ALIASES.get(f.name, f.name)] = getattr(self, f.name)
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Config":
        raw = json.loads(text)
        reverse = {v: k for k, v in cls._JSON_ALIASES.items()}
        known = {f.name for f in fields(cls) if not f.name.startswith("_")}
        kwargs = {}
        for key, value in raw.items():
            attr = reverse.get(key, key)
            if attr not in known:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[attr] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "Config":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    # method presets from the firefighters experiment columns
    @classmethod
    def ff_eql(cls) -> "Config":
        return cls(T=120000, alpha_eql=0.1, h0=0.0, hinf=1.0, eps0=0.5, epsinf=0.0,
                   T_pi=1, tau_or_tu=1500, b_pi=32, S_e=100000, U_w=False,
                   alpha_per=0.0, N_w=5)

    @classmethod
    def ff_svsl(cls) -> "Config":
        return cls(L_max=10, I=100, T=200000, h0=0.05, hinf=0.5, eps0=0.5,
                   epsinf=0.05, T_pi=2, b_pi=256, S_e=500000, U_w=False, N_w=5)

    @classmethod
    def ff_svslp(cls) -> "Config":
        return cls()

    @classmethod
    def ff_pbmorl(cls) -> "Config":
        return cls(L_max=10, K=500, N_s=300, N_a=10, S_p=100000, T=250000,
                   T_i=10000, h0=0.05, hinf=0.9, eps0=0.5, epsinf=0.05,
                   T_pi=2, b_pi=256, S_e=256000, b=256, U_w=True)

    @classmethod
    def preset(cls, method: str) -> "Config":
        table = {
            "eql": cls.ff_eql,
            "svsl": cls.ff_svsl,
            "svslp": cls.ff_svslp,
            "pbmorl": cls.ff_pbmorl,
        }
        if method not in table:
            raise ValueError(f"unknown method {method!r}")
        return table[method]()
