"""HTTP bridge letting humans stand in for society agents during a run.

The orchestrator pushes pending queries into a gateway; labelers pull their
oldest pending query, answer all value prompts plus the value-system prompt,
and the answers flow back to the main loop through a thread-safe queue. The
main loop blocks at collection boundaries with a timeout, so a silent human
skips the round instead of stalling the run.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from fastapi import Depends, FastAPI, HTTPException, Header
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from svsl_lab.environment import FF_ACTION_NAMES, FFState

ADMISSIBLE_LABELS = (0.0, 0.5, 1.0)


@dataclass
class PendingQuery:
    query_id: int
    agent_id: int
    traj_a: list
    traj_b: list
    num_values: int
    deadline: float | None = None  # set while in flight


@dataclass
class RunStatus:
    t: int = 0
    total: int = 0
    pending: int = 0
    answered: int = 0
    clusters: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)


class QueryGateway:
    """Thread-safe mailbox between the run loop and HTTP handlers."""

    def __init__(self, value_names, in_flight_ttl: float = 120.0,
                 clock=time.monotonic):
        self.value_names = list(value_names)
        self.ttl = in_flight_ttl
        self.clock = clock
        self.lock = threading.Lock()
        self.pending = {}  # agent_id -> deque[PendingQuery]
        self.in_flight = {}  # query_id -> PendingQuery
        self.answers = {}  # query_id -> (y_vs, y_values)
        self.answered_ids = set()
        self.events = {}  # query_id -> threading.Event
        self.status = RunStatus()
        self.next_id = 0

    # ------------------------------------------------------------ run side

    def post_queries(self, agent_id: int, pairs_steps, num_values: int) -> list:
        """Queue one query per pair for an agent; returns query ids."""
        ids = []
        with self.lock:
            ring = self.pending.setdefault(int(agent_id), deque())
            for steps_a, steps_b in pairs_steps:
                q = PendingQuery(self.next_id, int(agent_id),
                                 np.asarray(steps_a).tolist(),
                                 np.asarray(steps_b).tolist(), num_values)
                self.next_id += 1
                ring.append(q)
                self.events[q.query_id] = threading.Event()
                ids.append(q.query_id)
            self.status.pending = sum(len(r) for r in self.pending.values())
        return ids

    def wait_for_answers(self, query_ids, timeout: float):
        """Block until every query is answered or the deadline passes.

        Returns a list of (y_vs, y_values) or None for unanswered queries.
        """
        deadline = self.clock() + timeout
        out = []
        for qid in query_ids:
            remaining = deadline - self.clock()
            event = self.events.get(qid)
            if event is not None and remaining > 0:
                event.wait(timeout=remaining)
            with self.lock:
                out.append(self.answers.get(qid))
        with self.lock:
            for qid in query_ids:
                # drop leftovers so late answers cannot leak into later rounds
                self.in_flight.pop(qid, None)
                self.events.pop(qid, None)
                for ring in self.pending.values():
                    for q in list(ring):
                        if q.query_id == qid:
                            ring.remove(q)
                self.answers.pop(qid, None)
            self.status.pending = sum(len(r) for r in self.pending.values())
        return out

    def update_status(self, t, total, clusters, metrics):
        with self.lock:
            self.status.t = int(t)
            self.status.total = int(total)
            self.status.clusters = clusters
            self.status.metrics = metrics

    # ----------------------------------------------------------- http side

    def agents(self) -> list:
        with self.lock:
            return sorted(self.pending)

    def next_query(self, agent_id: int):
        with self.lock:
            if agent_id not in self.pending:
                raise KeyError(agent_id)
            ring = self.pending[agent_id]
            now = self.clock()
            for q in ring:
                if q.query_id in self.answers:
                    continue
                if q.deadline is None or q.deadline <= now:
                    q.deadline = now + self.ttl
                    self.in_flight[q.query_id] = q
                    return q
            return None

    def submit(self, query_id: int, y_vs: float, y_values) -> None:
        if y_vs not in ADMISSIBLE_LABELS or any(
            v not in ADMISSIBLE_LABELS for v in y_values
        ):
            raise ValueError("labels must be 0, 0.5 or 1")
        with self.lock:
            if query_id in self.answered_ids:
                raise PermissionError("duplicate submission")
            q = self.in_flight.get(query_id)
            if q is None:
                raise KeyError(query_id)
            if len(y_values) != q.num_values:
                raise ValueError("wrong number of per-value labels")
            self.answers[query_id] = (float(y_vs), np.asarray(y_values, float))
            self.answered_ids.add(query_id)
            self.status.answered += 1
            ring = self.pending.get(q.agent_id)
            if ring and q in ring:
                ring.remove(q)
            self.status.pending = sum(len(r) for r in self.pending.values())
        event = self.events.get(query_id)
        if event is not None:
            event.set()


class HumanAnswerSource:
    """Answer source that routes one agent's queries through the gateway."""

    def __init__(self, gateway: QueryGateway, timeout: float = 60.0):
        self.gateway = gateway
        self.timeout = timeout

    def collect(self, agent_id: int, pairs, trajectories):
        steps = [(trajectories.steps(a), trajectories.steps(b)) for a, b in pairs]
        ids = self.gateway.post_queries(agent_id, steps,
                                        num_values=len(self.gateway.value_names))
        answers = self.gateway.wait_for_answers(ids, self.timeout)
        if all(a is None for a in answers):
            return None  # agent silent this round: skip and log upstream
        return [a if a is not None else (None, None) for a in answers]


def decode_ff_steps(steps) -> list:
    """Human-readable step rows for the firefighters domain."""
    out = []
    for t, (s_idx, a_idx) in enumerate(steps):
        s = FFState.decode(int(s_idx))
        row = {"t": t, "action": FF_ACTION_NAMES[int(a_idx)]}
        row.update(s.feature_names())
        out.append(row)
    return out


class LabelSubmission(BaseModel):
    query_id: int
    y_vs: float
    y_values: list[float]
    labeler_token: str | None = None


def create_app(gateway: QueryGateway, value_names=None, token: str | None = None,
               decode_steps=decode_ff_steps) -> FastAPI:
    """The four JSON endpoints, CORS-enabled for the labeler UI."""
    app = FastAPI(title="preference query service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
        allow_headers=["*"],
    )
    names = value_names or gateway.value_names

    def check_token(authorization: str | None = Header(default=None)):
        if token is None:
            return
        if authorization != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="bad token")

    @app.get("/api/agents")
    def list_agents(_=Depends(check_token)):
        return {"agents": gateway.agents(), "values": names}

    @app.get("/api/agents/{agent_id}/queries/next")
    def next_query(agent_id: int, _=Depends(check_token)):
        try:
            q = gateway.next_query(agent_id)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown agent")
        if q is None:
            return {"query": None}
        return {
            "query": {
                "query_id": q.query_id,
                "agent_id": q.agent_id,
                "values": names,
                "trajectory_a": decode_steps(q.traj_a),
                "trajectory_b": decode_steps(q.traj_b),
                "deadline": q.deadline,
            }
        }

    @app.post("/api/labels")
    def submit_label(body: LabelSubmission, _=Depends(check_token)):
        try:
            gateway.submit(body.query_id, body.y_vs, body.y_values)
        except PermissionError:
            raise HTTPException(status_code=409, detail="duplicate submission")
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown or stale query")
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"accepted": True, "query_id": body.query_id}

    @app.get("/api/status")
    def status(_=Depends(check_token)):
        st = gateway.status
        return {
            "t": st.t,
            "total": st.total,
            "pending": st.pending,
            "answered": st.answered,
            "clusters": st.clusters,
            "metrics": st.metrics,
        }

    return app
