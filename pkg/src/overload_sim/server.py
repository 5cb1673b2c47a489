"""Server side of the simulation: bounded request queues, the dynamic-priority
selector, the FIFO/LIFO hysteresis switch, the worker pool and a
processor-shared CPU.
"""

from __future__ import annotations

import enum
import functools
import heapq
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .workload import RequestType, SessionModel, UtilityTable


class Policy(str, enum.Enum):
    FIFO = "FIFO"
    LIFO = "LIFO"


class QueueMode(str, enum.Enum):
    SQ = "SQ"
    MULTI = "MultiQueue"


class NoMatchingQueue(LookupError):
    pass


# -- queues ------------------------------------------------------------------


@dataclass(eq=False)
class RequestQueue:
    queue_id: str
    accepted: frozenset[str]
    capacity: int | None  # None means unbounded
    utility: float
    lifo_eligible: bool  # only pure browsing queues may switch to LIFO
    buffer: deque = field(default_factory=deque)

    def __len__(self):
        return len(self.buffer)

    @property
    def full(self) -> bool:
        return self.capacity is not None and len(self.buffer) >= self.capacity


class QueueBank:
    """Per-type (or single) request queues.

    Queue order is the tie-break order used by :func:`select_next`.
    """

    def __init__(self, queues: Sequence[RequestQueue], mode: QueueMode):
        self.queues = list(queues)
        self.mode = mode
        self._route: dict[str, RequestQueue] = {}
        for q in self.queues:
            for label in q.accepted:
                if label in self._route:
                    raise ValueError(f"type {label} routed to more than one queue")
                self._route[label] = q
        self.pending = 0

    def __getitem__(self, queue_id: str) -> RequestQueue:
        for q in self.queues:
            if q.queue_id == queue_id:
                return q
        raise KeyError(queue_id)

    def queue_for(self, label: str) -> RequestQueue:
        try:
            return self._route[label]
        except KeyError:
            raise NoMatchingQueue(f"no queue accepts request type {label!r}") from None

    def lengths(self) -> tuple[int, ...]:
        return tuple(len(q.buffer) for q in self.queues)

    @classmethod
    def single(
        cls, model: SessionModel, capacity: int | None = 100, utility: float = 1.0
    ) -> "QueueBank":
        labels = frozenset(t.label for t in model.types)
        lifo_ok = not any(t.is_transaction for t in model.types)
        return cls([RequestQueue("SQ", labels, capacity, utility, lifo_ok)], QueueMode.SQ)

    @classmethod
    def per_type(
        cls,
        model: SessionModel,
        utilities: UtilityTable,
        browsing_capacity: int | None = 50,
        transaction_capacity: int | None = 25,
    ) -> "QueueBank":
        # transaction queues first, last stage first, then browsing in type order
        tx = sorted((t for t in model.types if t.is_transaction), key=lambda t: -t.index)
        br = [t for t in model.types if not t.is_transaction]
        queues = []
        for t in tx + br:
            cap = transaction_capacity if t.is_transaction else browsing_capacity
            queues.append(
                RequestQueue(t.label, frozenset([t.label]), cap, utilities[t], not t.is_transaction)
            )
        return cls(queues, QueueMode.MULTI)


def enqueue(bank: QueueBank, req) -> str | None:
    """Append ``req`` to its queue; return the queue id, or None if dropped."""
    q = bank.queue_for(req.rtype.label)
    if q.full:
        return None
    q.buffer.append(req)
    bank.pending += 1
    return q.queue_id


# -- discipline --------------------------------------------------------------


@dataclass(frozen=True)
class DisciplineController:
    upper_threshold: float = 0.99
    lower_threshold: float = 0.95
    browsing_policy: Policy = Policy.FIFO
    measurement_interval: float = 1.0
    adaptive: bool = True  # False pins browsing_policy

    def __post_init__(self):
        if not (0 < self.lower_threshold < self.upper_threshold <= 1):
            raise ValueError("need 0 < lower_threshold < upper_threshold <= 1")
        if self.measurement_interval <= 0:
            raise ValueError("measurement_interval must be positive")


def set_discipline(ctrl: DisciplineController, measured_util: float) -> DisciplineController:
    if not ctrl.adaptive:
        return ctrl
    if ctrl.browsing_policy is Policy.FIFO and measured_util > ctrl.upper_threshold:
        return replace(ctrl, browsing_policy=Policy.LIFO)
    if ctrl.browsing_policy is Policy.LIFO and measured_util < ctrl.lower_threshold:
        return replace(ctrl, browsing_policy=Policy.FIFO)
    return ctrl


def select_next(bank: QueueBank, ctrl: DisciplineController):
    """Pick the queue with the largest N_i * U_i and take one request from it.

    Returns ``(queue_id, request, from_tail)`` or None when every queue is
    empty. Ties go to the earliest queue in bank order.
    """
    if bank.pending == 0:
        return None
    best = None
    best_dp = -math.inf
    for q in bank.queues:
        n = len(q.buffer)
        if n:
            dp = n * q.utility
            if dp > best_dp:
                best, best_dp = q, dp
    lifo = best.lifo_eligible and ctrl.browsing_policy is Policy.LIFO
    req = best.buffer.pop() if lifo else best.buffer.popleft()
    bank.pending -= 1
    return best.queue_id, req, lifo


# -- service demand ----------------------------------------------------------


class PhaseKind(str, enum.Enum):
    BUSY = "busy"
    WAIT = "wait"


@dataclass(frozen=True)
class PhaseProfile:
    """How a request's mean execution time splits into busy and wait phases."""

    n_phases: int = 4
    busy_fraction: float = 0.5
    distribution: str = "exponential"  # or "deterministic"

    def __post_init__(self):
        if self.n_phases < 1:
            raise ValueError("n_phases must be >= 1")
        if not 0 < self.busy_fraction <= 1:
            raise ValueError("busy_fraction must be in (0, 1]")
        if self.distribution not in ("exponential", "deterministic"):
            raise ValueError(f"unknown phase distribution {self.distribution!r}")


CPU_BOUND = PhaseProfile(n_phases=1, busy_fraction=1.0, distribution="deterministic")


@dataclass(frozen=True)
class ServiceDemand:
    phases: tuple[tuple[PhaseKind, float], ...]

    @property
    def total(self) -> float:
        return sum(d for _, d in self.phases)

    @property
    def busy(self) -> float:
        return sum(d for k, d in self.phases if k is PhaseKind.BUSY)


@functools.lru_cache(maxsize=256)
def phase_means(mean: float, profile: PhaseProfile) -> list[tuple[PhaseKind, float]]:
    if profile.busy_fraction >= 1.0 or profile.n_phases == 1:
        if profile.busy_fraction < 1.0:
            return (
                (PhaseKind.BUSY, mean * profile.busy_fraction),
                (PhaseKind.WAIT, mean * (1 - profile.busy_fraction)),
            )
        return ((PhaseKind.BUSY, mean),)
    n_busy = (profile.n_phases + 1) // 2
    n_wait = profile.n_phases // 2
    busy = mean * profile.busy_fraction / n_busy
    wait = mean * (1 - profile.busy_fraction) / n_wait
    return tuple(
        (PhaseKind.BUSY, busy) if i % 2 == 0 else (PhaseKind.WAIT, wait)
        for i in range(profile.n_phases)
    )


def sample_service_demand(rtype: RequestType, rng, profile: PhaseProfile) -> ServiceDemand:
    """Alternating busy/wait phases whose expected total is the type's mean.

    ``rng`` needs ``expovariate`` (a :class:`random.Random`).
    """
    means = phase_means(rtype.mean_exec_time, profile)
    if profile.distribution == "deterministic":
        return ServiceDemand(means)
    return ServiceDemand(tuple((k, rng.expovariate(1.0 / m) if m > 0 else 0.0) for k, m in means))


# -- workers and CPU ---------------------------------------------------------


@dataclass
class WorkerPool:
    max_workers: int = 30
    busy_workers: int = 0

    @property
    def available(self) -> bool:
        return self.busy_workers < self.max_workers

    def acquire(self):
        if self.busy_workers >= self.max_workers:
            raise RuntimeError("no free worker")
        self.busy_workers += 1

    def release(self):
        if self.busy_workers <= 0:
            raise RuntimeError("release without acquire")
        self.busy_workers -= 1


@dataclass(eq=False)
class ServiceExecution:
    request: object
    demand: ServiceDemand
    phase_index: int = 0
    remaining: float = 0.0  # used by the fixed-step reference only

    @property
    def kind(self) -> PhaseKind | None:
        if self.phase_index >= len(self.demand.phases):
            return None
        return self.demand.phases[self.phase_index][0]


class CpuModel:
    """Processor-shared CPU(s).

    Every job in a busy phase progresses at ``min(1, cpus / B)`` where B is
    the number of such jobs. Progress is tracked in "virtual time" (service
    attained by a job that has been busy throughout), so finishing order is a
    heap on target virtual time and nothing has to be rescaled when B changes.
    """

    def __init__(self, cpus: int = 1, utilization_window: float = 1.0):
        self.cpus = cpus
        self.utilization_window = utilization_window
        self.active_busy_threads = 0
        self.busy_time_accumulator = 0.0
        self._v = 0.0
        self._t = 0.0
        self._seq = 0
        self._heap: list = []
        # (time, cumulative busy, busy rate from then on)
        self._marks: deque = deque([(0.0, 0.0, 0.0)])

    def _job_rate(self) -> float:
        b = self.active_busy_threads
        return min(1.0, self.cpus / b) if b else 0.0

    def _busy_rate(self) -> float:
        return min(self.active_busy_threads, self.cpus) / self.cpus

    def advance_to(self, now: float):
        dt = now - self._t
        if dt < 0:
            raise ValueError("time went backwards")
        if dt and self.active_busy_threads:
            self._v += dt * self._job_rate()
            self.busy_time_accumulator += dt * self._busy_rate()
        self._t = now

    def _mark(self, now: float):
        rate = self._busy_rate()
        last = self._marks[-1]
        if last[2] != rate:
            if last[0] == now:
                self._marks.pop()
            self._marks.append((now, self.busy_time_accumulator, rate))
        horizon = now - self.utilization_window
        while len(self._marks) > 1 and self._marks[1][0] <= horizon:
            self._marks.popleft()

    def start_busy(self, item, work: float, now: float):
        self.advance_to(now)
        self._seq += 1
        heapq.heappush(self._heap, (self._v + work, self._seq, item))
        self.active_busy_threads += 1
        self._mark(now)

    def pop_finished(self, now: float, tol: float = 1e-9) -> list:
        self.advance_to(now)
        done = []
        while self._heap and self._heap[0][0] <= self._v + tol:
            done.append(heapq.heappop(self._heap)[2])
        if done:
            self.active_busy_threads -= len(done)
            self._mark(now)
        return done

    def next_completion(self) -> float | None:
        if not self._heap:
            return None
        return self._t + max(0.0, self._heap[0][0] - self._v) / self._job_rate()

    def busy_integral(self, t: float) -> float:
        """Cumulative busy time at ``t`` (t must lie within the kept window)."""
        marks = self._marks
        k = len(marks) - 1
        while k > 0 and marks[k][0] > t:
            k -= 1
        t0, c0, rate = marks[k]
        return c0 + rate * max(0.0, t - t0)

    def utilization(self, now: float) -> float:
        return measure_utilization(self, now)


def measure_utilization(cpu: CpuModel, now: float) -> float:
    """Busy fraction over the trailing window (or over [0, now] early on)."""
    cpu.advance_to(now)
    span = min(cpu.utilization_window, now)
    if span <= 0:
        return 0.0
    busy = cpu.busy_integral(now) - cpu.busy_integral(now - span)
    return min(1.0, max(0.0, busy / span))


def advance_cpu(cpu: CpuModel, in_service: Iterable[ServiceExecution], dt: float) -> list:
    """Fixed-step processor sharing over ``dt`` with B held constant.

    Reference stepper kept for cross-checking the event-driven CPU; it uses
    ``ServiceExecution.remaining`` for the current phase and does not move
    executions on to their next phase. Returns those whose phase finished.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    execs = list(in_service)
    busy = [e for e in execs if e.kind is PhaseKind.BUSY]
    b = len(busy)
    rate = min(1.0, cpu.cpus / b) if b else 0.0
    cpu.active_busy_threads = b
    if b:
        cpu.busy_time_accumulator += dt * min(b, cpu.cpus) / cpu.cpus
    done = []
    for e in execs:
        if e.kind is None:
            continue
        step = dt * rate if e.kind is PhaseKind.BUSY else dt
        e.remaining -= step
        if e.remaining <= 1e-12:
            e.remaining = 0.0
            done.append(e)
    return done
