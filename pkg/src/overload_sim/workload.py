"""Session workload: request types, the Markov chain over pages, trace pools
and the utilities derived from the chance of reaching the final purchase step.
"""

from __future__ import annotations

import bisect
import enum
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import yaml

EXIT = "Exit"


class RequestClass(str, enum.Enum):
    BROWSING = "browsing"
    TRANSACTION = "transaction"


@dataclass(frozen=True)
class RequestType:
    index: int
    label: str
    request_class: RequestClass
    mean_exec_time: float  # seconds
    name: str = ""

    def __post_init__(self):
        if not self.mean_exec_time > 0:
            raise ValueError(f"{self.label}: mean_exec_time must be positive")

    @property
    def is_transaction(self) -> bool:
        return self.request_class is RequestClass.TRANSACTION


class ValidationError(ValueError):
    """Base class for session-model problems."""


class RowNotStochastic(ValidationError):
    pass


class NegativeEntry(ValidationError):
    pass


class ExitNotAbsorbing(ValidationError):
    pass


class ExitUnreachable(ValidationError):
    pass


class SingularSystem(ValidationError):
    pass


class PriorityInversion(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SessionModel:
    """Markov chain over request types with an absorbing Exit state.

    ``transitions`` is square with one row per type plus a final row for Exit.
    """

    types: tuple[RequestType, ...]
    transitions: np.ndarray
    start: int = 0
    browsing_scale: float = 1000.0
    transaction_scale: float = 5000.0
    target: int | None = None  # defaults to the last transaction type

    @property
    def n_types(self) -> int:
        return len(self.types)

    @property
    def exit_index(self) -> int:
        return len(self.types)

    @property
    def start_type(self) -> RequestType:
        return self.types[self.start]

    @property
    def target_type(self) -> RequestType:
        if self.target is not None:
            return self.types[self.target]
        tx = [t for t in self.types if t.is_transaction]
        if not tx:
            raise ValidationError("model has no transaction types; set an explicit target")
        return tx[-1]

    def type_by_label(self, label: str) -> RequestType:
        for t in self.types:
            if t.label == label:
                return t
        raise KeyError(label)

    def probability(self, src: RequestType | str, dst: RequestType | str) -> float:
        i = src.index if isinstance(src, RequestType) else self._index(src)
        j = dst.index if isinstance(dst, RequestType) else self._index(dst)
        return float(self.transitions[i, j])

    def _index(self, label: str) -> int:
        if label == EXIT:
            return self.exit_index
        return self.type_by_label(label).index

    def __eq__(self, other):
        if not isinstance(other, SessionModel):
            return NotImplemented
        return (
            self.types == other.types
            and np.array_equal(self.transitions, other.transitions)
            and self.start == other.start
            and self.browsing_scale == other.browsing_scale
            and self.transaction_scale == other.transaction_scale
            and self.target == other.target
        )

    __hash__ = None


@dataclass(frozen=True)
class SessionTrace:
    id: int
    requests: tuple[RequestType, ...]

    def __len__(self):
        return len(self.requests)


@dataclass(frozen=True)
class UtilityTable:
    utility: Mapping[str, float]
    browsing_scale: float
    transaction_scale: float

    def __getitem__(self, key: RequestType | str) -> float:
        if isinstance(key, RequestType):
            key = key.label
        return self.utility[key]


def validate_model(model: SessionModel, tol: float = 1e-9) -> None:
    """Raise a :class:`ValidationError` subclass naming the first broken rule."""
    p = np.asarray(model.transitions, dtype=float)
    n = model.n_types + 1
    if p.shape != (n, n):
        raise ValidationError(f"transition matrix must be {n}x{n}, got {p.shape}")
    if not 0 <= model.start < model.n_types:
        raise ValidationError(f"start index {model.start} out of range")
    labels = [*(t.label for t in model.types), EXIT]
    bad = np.argwhere((p < 0) | (p > 1))
    if len(bad):
        i, j = bad[0]
        raise NegativeEntry(f"P[{labels[i]} -> {labels[j]}] = {p[i, j]} outside [0, 1]")
    sums = p.sum(axis=1)
    for i, s in enumerate(sums):
        if abs(s - 1.0) > tol:
            raise RowNotStochastic(f"row {labels[i]} sums to {s!r}")
    ex = model.exit_index
    if p[ex, ex] != 1.0:
        raise ExitNotAbsorbing(f"P[Exit -> Exit] = {p[ex, ex]}")
    # walk backwards from Exit over nonzero edges
    reach = {ex}
    frontier = [ex]
    while frontier:
        j = frontier.pop()
        for i in np.nonzero(p[:, j] > 0)[0]:
            if i not in reach:
                reach.add(int(i))
                frontier.append(int(i))
    for i in range(model.n_types):
        if i not in reach:
            raise ExitUnreachable(f"Exit cannot be reached from {labels[i]}")


def compute_reach_probability(model: SessionModel) -> dict[RequestType, float]:
    """Probability that a request of each type eventually leads to the target
    (by default the final transaction step), treating the target as absorbing
    success and Exit as absorbing failure."""
    target = model.target_type.index
    p = np.asarray(model.transitions, dtype=float)
    free = [i for i in range(model.n_types) if i != target]
    a = np.eye(len(free)) - p[np.ix_(free, free)]
    b = p[free, target]
    if not free:
        return {t: 1.0 for t in model.types}
    try:
        if np.linalg.cond(a) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned")
        x = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"absorption system is singular: {exc}") from None
    q = np.empty(model.n_types)
    q[free] = x
    q[target] = 1.0
    q = np.clip(q, 0.0, 1.0)
    return {t: float(q[t.index]) for t in model.types}


def _round_sig(x: float, digits: int) -> float:
    if x == 0:
        return 0.0
    return round(x, digits - 1 - int(math.floor(math.log10(abs(x)))))


def derive_utilities(
    q: Mapping[RequestType, float],
    browsing_scale: float = 1000.0,
    transaction_scale: float = 5000.0,
    significant_digits: int | None = 2,
) -> UtilityTable:
    """Scale reach probabilities into per-queue utilities.

    Probabilities are first rounded to ``significant_digits`` (pass ``None``
    to keep them exact). With two digits the default chain gives the
    familiar 27/22/36/73 and 3650/4050/4500/5000.
    """
    if browsing_scale <= 0 or transaction_scale <= 0:
        raise ValueError("scales must be positive")
    util = {}
    for t, prob in q.items():
        if significant_digits is not None:
            prob = _round_sig(prob, significant_digits)
        scale = transaction_scale if t.is_transaction else browsing_scale
        util[t.label] = round(prob * scale, 9)
    br = [u for t, u in zip(q, util.values()) if not t.is_transaction]
    tx = [u for t, u in zip(q, util.values()) if t.is_transaction]
    if br and tx and max(br) >= min(tx):
        raise PriorityInversion(
            f"browsing utility {max(br)} >= transaction utility {min(tx)}"
        )
    if any(u <= 0 for u in util.values()):
        raise ValueError("every utility must be positive; check reachability of the target")
    return UtilityTable(util, browsing_scale, transaction_scale)


class _Walker:
    """Samples next states with cumulative rows and bisection."""

    def __init__(self, model: SessionModel):
        p = np.asarray(model.transitions, dtype=float)
        self.cum = []
        self.dst = []
        for i in range(model.n_types):
            nz = np.nonzero(p[i] > 0)[0]
            c = np.cumsum(p[i, nz])
            c[-1] = 1.0
            self.cum.append(c.tolist())
            self.dst.append(nz.tolist())
        self.model = model

    def walk(self, uniform) -> tuple[RequestType, ...]:
        m = self.model
        state = m.start
        out = []
        while state != m.exit_index:
            out.append(m.types[state])
            k = bisect.bisect_right(self.cum[state], uniform())
            state = self.dst[state][min(k, len(self.dst[state]) - 1)]
        return tuple(out)


def generate_trace_pool(
    model: SessionModel, pool_size: int, seed: int | np.random.SeedSequence
) -> list[SessionTrace]:
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    rng = np.random.default_rng(seed)
    walker = _Walker(model)
    buf: list[float] = []

    def uniform() -> float:
        if not buf:
            buf.extend(rng.random(4096).tolist()[::-1])
        return buf.pop()

    return [SessionTrace(i, walker.walk(uniform)) for i in range(pool_size)]


def expected_visits(model: SessionModel) -> dict[RequestType, float]:
    """Mean number of times each type appears in one session."""
    p = np.asarray(model.transitions, dtype=float)[: model.n_types, : model.n_types]
    fundamental = np.linalg.inv(np.eye(model.n_types) - p)
    row = fundamental[model.start]
    return {t: float(row[t.index]) for t in model.types}


def mean_requests_per_session(model: SessionModel) -> float:
    return sum(expected_visits(model).values())


# -- model files -------------------------------------------------------------


def model_from_dict(doc: Mapping) -> SessionModel:
    states = doc["states"]
    types = []
    for i, s in enumerate(states):
        cls = RequestClass(str(s["class"]).lower())
        types.append(
            RequestType(i, s["label"], cls, float(s["mean_exec_ms"]) / 1000.0, s.get("name", ""))
        )
    labels = [t.label for t in types]
    if len(set(labels)) != len(labels) or EXIT in labels:
        raise ValidationError("state labels must be unique and must not be 'Exit'")
    index = {lab: i for i, lab in enumerate(labels)}
    index[EXIT] = len(types)
    n = len(types) + 1
    p = np.zeros((n, n))
    for src, row in (doc.get("transitions") or {}).items():
        if src not in index or src == EXIT:
            raise ValidationError(f"unknown source state {src!r}")
        for dst, prob in row.items():
            if dst not in index:
                raise ValidationError(f"unknown destination state {dst!r}")
            p[index[src], index[dst]] = float(prob)
    p[n - 1, n - 1] = 1.0
    scales = doc.get("scales", {})
    target = doc.get("target")
    return SessionModel(
        types=tuple(types),
        transitions=p,
        start=index[doc.get("start", labels[0])],
        browsing_scale=float(scales.get("browsing", 1000.0)),
        transaction_scale=float(scales.get("transaction", 5000.0)),
        target=index[target] if target is not None else None,
    )


def model_to_dict(model: SessionModel) -> dict:
    labels = [*(t.label for t in model.types), EXIT]
    transitions = {}
    for t in model.types:
        row = model.transitions[t.index]
        transitions[t.label] = {labels[j]: float(row[j]) for j in np.nonzero(row)[0]}
    doc = {
        "start": model.start_type.label,
        "scales": {
            "browsing": float(model.browsing_scale),
            "transaction": float(model.transaction_scale),
        },
        "states": [
            {
                "label": t.label,
                "name": t.name,
                "class": t.request_class.value,
                "mean_exec_ms": t.mean_exec_time * 1000.0,
            }
            for t in model.types
        ],
        "transitions": transitions,
    }
    if model.target is not None:
        doc["target"] = model.types[model.target].label
    return doc


def load_model(path: str | Path) -> SessionModel:
    with open(path) as fh:
        return model_from_dict(yaml.safe_load(fh))


def dump_model(model: SessionModel, path: str | Path | None = None) -> str:
    text = yaml.safe_dump(model_to_dict(model), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def default_model() -> SessionModel:
    text = resources.files("overload_sim.data").joinpath("default_chain.yaml").read_text()
    return model_from_dict(yaml.safe_load(text))


def single_type_model(
    mean_exec_time: float, label: str = "CGI", request_class: RequestClass = RequestClass.BROWSING
) -> SessionModel:
    """One-request sessions of a single type, used by the FIFO/LIFO study."""
    t = RequestType(0, label, request_class, mean_exec_time, "cpu-intensive script")
    p = np.array([[0.0, 1.0], [0.0, 1.0]])
    return SessionModel((t,), p, 0, target=0)


def traces_contain(traces: Iterable[SessionTrace], rtype: RequestType) -> float:
    traces = list(traces)
    return sum(rtype in tr.requests for tr in traces) / len(traces)

