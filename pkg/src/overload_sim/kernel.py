"""Discrete-event engine that wires clients, the server and the ledger."""

from __future__ import annotations

import enum
import heapq
import math
import random
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np

from .client import (
    Request,
    SessionInstance,
    SessionStatus,
    on_request_resolved,
    on_timeout,
    poisson_arrival_times,
    sample_deadline,
)
from .config import RunConfig
from .metrics import Outcome, OutcomeLedger, throughput
from .server import (
    CpuModel,
    DisciplineController,
    PhaseKind,
    QueueBank,
    QueueMode,
    ServiceExecution,
    WorkerPool,
    enqueue,
    measure_utilization,
    sample_service_demand,
    select_next,
    set_discipline,
)
from .workload import compute_reach_probability, derive_utilities, generate_trace_pool, _Walker, SessionTrace


class SchedulePast(ValueError):
    pass


class EventKind(enum.IntEnum):
    SESSION_ARRIVAL = 0
    REQUEST_ISSUE = 1
    PHASE_COMPLETE = 2
    TIMEOUT = 3
    UTILIZATION_TICK = 4
    HORIZON_END = 5
    CPU_COMPLETE = 6  # next busy-phase completion on the shared CPU


class Event(NamedTuple):
    time: float
    sequence: int
    kind: EventKind
    payload: Any = None


class EventCalendar:
    """Min-heap on (time, sequence); equal times pop in schedule order."""

    def __init__(self):
        self.now = 0.0
        self._heap: list = []
        self._seq = 0

    def __len__(self):
        return len(self._heap)

    def schedule(self, time: float, kind: EventKind, payload=None) -> int:
        if time < self.now:
            raise SchedulePast(f"cannot schedule {kind.name} at {time} < clock {self.now}")
        self._seq += 1
        heapq.heappush(self._heap, (time, self._seq, kind, payload))
        return self._seq

    def next_event(self) -> Event:
        time, seq, kind, payload = heapq.heappop(self._heap)
        self.now = time
        return Event(time, seq, EventKind(kind), payload)


class Substream:
    """Per-session uniform source: a pre-drawn row, then a seeded fallback."""

    __slots__ = ("_buf", "_seed", "_rng")

    def __init__(self, row: list, seed: int):
        self._buf = row
        self._seed = seed
        self._rng = None

    def random(self) -> float:
        if self._buf:
            return self._buf.pop()
        if self._rng is None:
            self._rng = random.Random(self._seed)
        return self._rng.random()

    def expovariate(self, lambd: float) -> float:
        return -math.log(1.0 - self.random()) / lambd


class RngStreams:
    """Independent random streams derived from one master seed.

    Arrivals and trace sampling use numpy generators directly. Demand,
    timeout and retry draws are split per session (one row of uniforms per
    session and stream), so a session sees the same draws under every
    scheduling scheme until its own history diverges.
    """

    NAMES = ("arrivals", "traces", "demands", "timeouts", "retries")
    ROW = 32
    BLOCK = 1024

    def __init__(self, seed: int):
        children = np.random.SeedSequence(seed).spawn(len(self.NAMES))
        self.arrivals = np.random.default_rng(children[0])
        self.traces = np.random.default_rng(children[1])
        self.trace_seed = children[1]
        self._gen = {n: np.random.default_rng(c) for n, c in zip(self.NAMES[2:], children[2:])}
        self._keys = {
            n: int.from_bytes(c.generate_state(2).tobytes(), "little")
            for n, c in zip(self.NAMES[2:], children[2:])
        }
        self._blocks: dict[str, dict[int, list]] = {n: {} for n in self.NAMES[2:]}
        self._drawn = dict.fromkeys(self.NAMES[2:], 0)

    def session(self, name: str, session_id: int) -> Substream:
        blocks = self._blocks[name]
        b, i = divmod(session_id, self.BLOCK)
        # blocks are always drawn in order, so row contents depend only on the id
        while self._drawn[name] <= b:
            k = self._drawn[name]
            blocks[k] = self._gen[name].random((self.BLOCK, self.ROW)).tolist()
            self._drawn[name] = k + 1
        row = blocks[b][i]
        if i == self.BLOCK - 1:
            del blocks[b]
        return Substream(row, (self._keys[name] << 40) | session_id)


@dataclass(eq=False)
class _SessionStreams:
    demands: Substream
    timeouts: Substream
    retries: Substream


@dataclass
class SimulationResult:
    config: RunConfig
    ledger: OutcomeLedger
    utilization_trace: list = field(default_factory=list)  # (t, util, policy, busy_integral)
    switch_log: list = field(default_factory=list)  # (t, util, from, to)
    decisions: list = field(default_factory=list)  # (t, lengths, queue index, from_tail, policy)
    attempts: list = field(default_factory=list)  # (session, position, attempt, issue, end, outcome)
    session_accounting: list = field(default_factory=list)  # (trace length, issued, not generated)
    session_latencies: list = field(default_factory=list)
    sessions: int = 0
    sessions_completed: int = 0
    sessions_aborted: int = 0
    unproductive_completions: int = 0
    intended: int = 0  # total trace length of all arrived sessions
    end_time: float = 0.0
    queue_ids: tuple = ()
    utilities: tuple = ()

    @property
    def warmup(self) -> float:
        return self.config.warmup_fraction * self.config.horizon

    @property
    def throughput(self) -> float:
        return throughput(self.ledger, self.config.horizon, self.warmup)

    @property
    def mean_utilization(self) -> float:
        """CPU utilization between the end of warm-up and the horizon."""
        pts = [(t, b) for t, _, _, b in self.utilization_trace]
        if not pts:
            return 0.0
        ts = np.array([p[0] for p in pts])
        bs = np.array([p[1] for p in pts])
        lo = np.interp(self.warmup, ts, bs)
        hi = np.interp(self.config.horizon, ts, bs)
        span = self.config.horizon - self.warmup
        return float((hi - lo) / span) if span > 0 else 0.0

    @property
    def session_completion(self) -> float:
        return self.sessions_completed / self.sessions if self.sessions else 1.0


class Simulation:
    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        self.cal = EventCalendar()
        self.streams = RngStreams(cfg.seed)
        model = cfg.model
        sv = cfg.server
        if cfg.scheme.mode is QueueMode.SQ:
            self.bank = QueueBank.single(model, sv.sq_capacity)
        else:
            q = compute_reach_probability(model)
            util = derive_utilities(q, model.browsing_scale, model.transaction_scale, sv.utility_digits)
            self.bank = QueueBank.per_type(model, util, sv.browsing_capacity, sv.transaction_capacity)
        self.ctrl = DisciplineController(
            sv.upper_threshold, sv.lower_threshold, cfg.scheme.policy, sv.window, cfg.scheme.adaptive
        )
        self.cpu = CpuModel(sv.cpus, sv.window)
        self.pool = WorkerPool(sv.workers)
        self.ledger = OutcomeLedger({t.label: t.request_class.value for t in model.types})
        self.result = SimulationResult(
            cfg,
            self.ledger,
            queue_ids=tuple(q.queue_id for q in self.bank.queues),
            utilities=tuple(q.utility for q in self.bank.queues),
        )
        self._queue_index = {q.queue_id: i for i, q in enumerate(self.bank.queues)}
        self.sessions: list[SessionInstance] = []
        self.active_sessions = 0
        self._next_id = 0
        self._cpu_token = 0
        self._cpu_at = math.inf
        self._log = cfg.record_logs
        self._open_attempts: dict[int, list] = {}

        cl = cfg.client
        self._arrivals = poisson_arrival_times(cfg.session_rate, cfg.horizon, self.streams.arrivals)
        if cl.fresh_sampling:
            walker = _Walker(model)
            rng = self.streams.traces
            self._traces = [
                SessionTrace(i, walker.walk(rng.random)) for i in range(len(self._arrivals))
            ]
        else:
            self._traces = generate_trace_pool(model, cl.pool_size, self.streams.trace_seed)

    # -- bookkeeping -----------------------------------------------------------

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def _streams_for(self, sid: int) -> _SessionStreams:
        s = self.streams
        return _SessionStreams(
            s.session("demands", sid), s.session("timeouts", sid), s.session("retries", sid)
        )

    # -- client side -----------------------------------------------------------

    def _arrive(self, t: float, k: int):
        trace = self._traces[k % len(self._traces)]
        session = SessionInstance(k, trace, t, streams=self._streams_for(k))
        self.sessions.append(session)
        self.active_sessions += 1
        self._issue(session, t)
        if k + 1 < len(self._arrivals):
            self.cal.schedule(float(self._arrivals[k + 1]), EventKind.SESSION_ARRIVAL, k + 1)

    def _issue(self, session: SessionInstance, t: float):
        session.issued += 1
        deadline = sample_deadline(self.cfg.client.timeouts, t, session.streams.timeouts)
        req = Request(self._new_id(), session.id, session.current, t, deadline, 0, session.cursor)
        self._submit(req, session, t)

    def _submit(self, req: Request, session: SessionInstance, t: float):
        req.demand = sample_service_demand(req.rtype, session.streams.demands, self.cfg.server.profile)
        label = req.rtype.label
        self.ledger.issue(label)
        if self._log:
            self._open_attempts[req.id] = [session.id, req.position, req.attempt, t, None, None]
        if enqueue(self.bank, req) is None:
            req.resolved = True
            self.ledger.record(label, Outcome.DROPPED, req.id)
            self._close_attempt(req, t, Outcome.DROPPED)
            self._fail(session, t)
            return
        if req.deadline != math.inf:
            self.cal.schedule(req.deadline, EventKind.TIMEOUT, req)

    def _close_attempt(self, req: Request, t: float, outcome: Outcome):
        if self._log:
            rec = self._open_attempts.pop(req.id)
            rec[4], rec[5] = t, outcome.value
            self.result.attempts.append(tuple(rec))

    def _fail(self, session: SessionInstance, t: float):
        on_request_resolved(session, False, t)
        for rt in session.trace.requests[session.cursor + 1 :]:
            self.ledger.record(rt.label, Outcome.NOT_GENERATED)
        self._end_session(session)

    def _end_session(self, session: SessionInstance):
        self.active_sessions -= 1
        r = self.result
        r.session_accounting.append((len(session.trace), session.issued, session.not_generated))
        if session.status is SessionStatus.COMPLETED:
            r.sessions_completed += 1
            r.session_latencies.append(session.end_time - session.arrival_time)
        else:
            r.sessions_aborted += 1

    def _timeout(self, t: float, req: Request):
        if req.resolved:
            return
        req.resolved = True
        self.ledger.record(req.rtype.label, Outcome.TIMED_OUT, req.id)
        self._close_attempt(req, t, Outcome.TIMED_OUT)
        session = self.sessions[req.session_id]
        st = session.streams
        retry = on_timeout(
            req, self.cfg.client.retry, st.retries, self.cfg.client.timeouts, st.timeouts, self._new_id()
        )
        if retry is None:
            self._fail(session, t)
        else:
            self._submit(retry, session, t)

    # -- server side -----------------------------------------------------------

    def _update_discipline(self, t: float) -> float:
        util = measure_utilization(self.cpu, t)
        new = set_discipline(self.ctrl, util)
        if new is not self.ctrl:
            self.result.switch_log.append(
                (t, util, self.ctrl.browsing_policy.value, new.browsing_policy.value)
            )
            self.ctrl = new
        return util

    def _dispatch(self, t: float):
        bank, pool = self.bank, self.pool
        while pool.busy_workers < pool.max_workers and bank.pending:
            if self.ctrl.adaptive:
                self._update_discipline(t)
            lengths = bank.lengths() if self._log else None
            qid, req, tail = select_next(bank, self.ctrl)
            if self._log:
                self.result.decisions.append(
                    (t, lengths, self._queue_index[qid], tail, self.ctrl.browsing_policy.value)
                )
            pool.busy_workers += 1
            self._start_phase(ServiceExecution(req, req.demand), t)
        nxt = self.cpu.next_completion()
        if nxt is not None and nxt != self._cpu_at:
            self._cpu_token += 1
            self._cpu_at = nxt
            self.cal.schedule(max(nxt, t), EventKind.CPU_COMPLETE, self._cpu_token)

    def _start_phase(self, ex: ServiceExecution, t: float):
        phases = ex.demand.phases
        while ex.phase_index < len(phases):
            kind, d = phases[ex.phase_index]
            if kind is PhaseKind.BUSY:
                self.cpu.start_busy(ex, d, t)
                return
            if d > 0:
                self.cal.schedule(t + d, EventKind.PHASE_COMPLETE, ex)
                return
            ex.phase_index += 1
        self._finish(ex, t)

    def _cpu_complete(self, t: float, token: int):
        if token != self._cpu_token:
            return
        self._cpu_at = math.inf
        for ex in self.cpu.pop_finished(t):
            ex.phase_index += 1
            self._start_phase(ex, t)

    def _finish(self, ex: ServiceExecution, t: float):
        self.pool.busy_workers -= 1
        req = ex.request
        if req.resolved:
            self.result.unproductive_completions += 1
            return
        req.resolved = True
        self.ledger.record_completion(req.rtype.label, req.id, req.issue_time, t, req.deadline)
        self._close_attempt(req, t, Outcome.COMPLETED)
        session = self.sessions[req.session_id]
        nxt = on_request_resolved(session, True, t)
        if nxt is None:
            self._end_session(session)
        elif self.cfg.client.think_time > 0:
            self.cal.schedule(t + self.cfg.client.think_time, EventKind.REQUEST_ISSUE, session)
        else:
            self._issue(session, t)

    def _tick(self, t: float):
        util = self._update_discipline(t) if self.ctrl.adaptive else measure_utilization(self.cpu, t)
        self.result.utilization_trace.append(
            (t, util, self.ctrl.browsing_policy.value, self.cpu.busy_time_accumulator)
        )
        busy = self.pool.busy_workers or self.bank.pending or self.active_sessions
        if t < self.cfg.horizon or busy:
            self.cal.schedule(t + self.cfg.server.window, EventKind.UTILIZATION_TICK)

    # -- main loop ---------------------------------------------------------------

    def run(self) -> SimulationResult:
        cal = self.cal
        if len(self._arrivals):
            cal.schedule(float(self._arrivals[0]), EventKind.SESSION_ARRIVAL, 0)
        cal.schedule(0.0, EventKind.UTILIZATION_TICK)
        cal.schedule(self.cfg.horizon, EventKind.HORIZON_END)
        heap = cal._heap
        pop = heapq.heappop
        K = EventKind
        while heap:
            t, _, kind, payload = pop(heap)
            cal.now = t
            if kind == K.CPU_COMPLETE:
                self._cpu_complete(t, payload)
            elif kind == K.PHASE_COMPLETE:
                payload.phase_index += 1
                self._start_phase(payload, t)
            elif kind == K.TIMEOUT:
                self._timeout(t, payload)
            elif kind == K.SESSION_ARRIVAL:
                self._arrive(t, payload)
            elif kind == K.REQUEST_ISSUE:
                self._issue(payload, t)
            elif kind == K.UTILIZATION_TICK:
                self._tick(t)
                continue
            elif kind == K.HORIZON_END:
                if self.cfg.stop_at_horizon:
                    break
                continue
            self._dispatch(t)
        return self._finalize()

    def _finalize(self) -> SimulationResult:
        r = self.result
        r.end_time = self.cal.now
        r.sessions = len(self.sessions)
        r.intended = sum(len(s.trace) for s in self.sessions)
        if self.cfg.stop_at_horizon:
            return r
        if self.active_sessions or self.bank.pending or self.pool.busy_workers:
            raise RuntimeError("simulation ended with work still in flight")
        self.ledger.check_conservation()
        for length, issued, ng in r.session_accounting:
            if length != issued + ng:
                raise AssertionError("session accounting broken")
        return r


def run(config: RunConfig) -> SimulationResult:
    """Simulate one (scheme, rate, seed) configuration to completion."""
    return Simulation(config).run()
