"""Client behaviour: Poisson session arrivals, impatient requests with
timeouts, probabilistic bounded retries and session abort on failure.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .workload import RequestType, SessionTrace


@dataclass(frozen=True)
class TimeoutModel:
    base_timeout: float = 8.0
    think_timeout_mean: float = 12.0
    think_distribution: str = "exponential"  # or "fixed"

    def __post_init__(self):
        if self.think_distribution not in ("exponential", "fixed"):
            raise ValueError(f"unknown think distribution {self.think_distribution!r}")
        if self.base_timeout < 0 or self.think_timeout_mean < 0:
            raise ValueError("timeouts must be non-negative")

    @property
    def mean(self) -> float:
        return self.base_timeout + self.think_timeout_mean


NO_TIMEOUT = TimeoutModel(math.inf, 0.0, "fixed")


@dataclass(frozen=True)
class RetryPolicy:
    retry_probability: float = 0.4
    max_retries: int = 5

    def __post_init__(self):
        if not 0 <= self.retry_probability <= 1:
            raise ValueError("retry_probability must be in [0, 1]")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


NO_RETRY = RetryPolicy(0.0, 0)


@dataclass(slots=True, eq=False)
class Request:
    id: int
    session_id: int
    rtype: RequestType
    issue_time: float
    deadline: float
    attempt: int = 0
    position: int = 0  # index in the session trace
    demand: object = None
    resolved: bool = False


class SessionStatus(str, enum.Enum):
    ACTIVE = "active"
    COMPLETED = "completed"
    ABORTED = "aborted"


@dataclass(eq=False)
class SessionInstance:
    id: int
    trace: SessionTrace
    arrival_time: float
    cursor: int = 0
    status: SessionStatus = SessionStatus.ACTIVE
    issued: int = 0  # distinct trace positions issued
    not_generated: int = 0
    end_time: float | None = None
    streams: object = field(default=None, repr=False)

    @property
    def current(self) -> RequestType:
        return self.trace.requests[self.cursor]

    @property
    def remaining(self) -> tuple[RequestType, ...]:
        return self.trace.requests[self.cursor + 1 :]


def sample_deadline(tm: TimeoutModel, issue_time: float, rng) -> float:
    """``issue_time + base + think`` with think drawn per ``tm``.

    ``rng`` needs ``random()``. One draw is consumed for exponential think
    timeouts even when the mean is zero, so streams stay aligned.
    """
    if tm.think_distribution == "fixed":
        think = tm.think_timeout_mean
    else:
        u = rng.random()
        think = -tm.think_timeout_mean * math.log(1.0 - u) if tm.think_timeout_mean else 0.0
    return issue_time + tm.base_timeout + think


def on_timeout(
    req: Request,
    policy: RetryPolicy,
    rng,
    timeouts: TimeoutModel | None = None,
    deadline_rng=None,
    new_id: int | None = None,
) -> Request | None:
    """Decide what the client does when ``req`` hits its deadline.

    Returns the retry attempt (issued at the deadline instant with a fresh
    deadline) or None when the request is abandoned. A uniform is drawn on
    every call so the retry stream does not depend on the attempt count.
    """
    u = rng.random()
    if req.attempt >= policy.max_retries or u >= policy.retry_probability:
        return None
    t = req.deadline
    deadline = sample_deadline(timeouts, t, deadline_rng or rng) if timeouts else math.inf
    return Request(
        id=req.id if new_id is None else new_id,
        session_id=req.session_id,
        rtype=req.rtype,
        issue_time=t,
        deadline=deadline,
        attempt=req.attempt + 1,
        position=req.position,
    )


def on_request_resolved(session: SessionInstance, success: bool, now: float | None = None):
    """Move the session past the request at its cursor.

    On success returns the next request type to issue, or None once the
    trace is exhausted (session completed). On failure the session aborts,
    the rest of the trace is counted as not generated and None is returned.
    """
    if session.status is not SessionStatus.ACTIVE:
        raise RuntimeError(f"session {session.id} is {session.status.value}")
    if not success:
        session.not_generated = len(session.trace) - session.cursor - 1
        session.status = SessionStatus.ABORTED
        session.end_time = now
        return None
    session.cursor += 1
    if session.cursor >= len(session.trace):
        session.status = SessionStatus.COMPLETED
        session.end_time = now
        return None
    return session.current


def poisson_arrival_times(rate: float, horizon: float, rng: np.random.Generator) -> np.ndarray:
    if rate <= 0 or horizon <= 0:
        return np.empty(0)
    out = []
    t = 0.0
    block = max(16, int(rate * horizon * 1.1) + 16)
    while True:
        gaps = rng.exponential(1.0 / rate, block)
        times = t + np.cumsum(gaps)
        keep = times[times <= horizon]
        out.append(keep)
        if len(keep) < block:
            break
        t = float(times[-1])
    return np.concatenate(out)


def schedule_session_arrivals(
    rate: float, horizon: float, pool: list[SessionTrace], rng: np.random.Generator
) -> list[tuple[float, SessionTrace]]:
    """Poisson session arrivals on [0, horizon], cycling through ``pool``."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    times = poisson_arrival_times(rate, horizon, rng)
    n = len(pool)
    return [(float(t), pool[i % n]) for i, t in enumerate(times)]
