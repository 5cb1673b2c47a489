"""Outcome accounting, unconditional response-time CCDFs and the table-shaped
summaries written out by the harness.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class Outcome(str, enum.Enum):
    COMPLETED = "completed"
    TIMED_OUT = "timed_out"
    DROPPED = "dropped"
    NOT_GENERATED = "not_generated"


COUNTERS = ("generated", "completed", "timed_out", "dropped", "not_generated")


class DoubleCount(RuntimeError):
    pass


class EmptySet(ValueError):
    pass


@dataclass
class TypeCounts:
    generated: int = 0
    completed: int = 0
    timed_out: int = 0
    dropped: int = 0
    not_generated: int = 0

    def __iadd__(self, other: "TypeCounts"):
        for name in COUNTERS:
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self

    @property
    def resolved(self) -> int:
        return self.completed + self.timed_out + self.dropped

    @property
    def intended(self) -> int:
        return self.generated + self.not_generated


@dataclass
class OutcomeLedger:
    """Per-type counters plus response-time samples of completed attempts.

    ``classes`` maps a type label to "browsing" or "transaction".
    """

    classes: dict[str, str]
    counts: dict[str, TypeCounts] = field(default_factory=dict)
    sample_type: list[str] = field(default_factory=list)
    sample_issue: list[float] = field(default_factory=list)
    sample_time: list[float] = field(default_factory=list)
    _resolved: set = field(default_factory=set, repr=False)

    def __post_init__(self):
        for label in self.classes:
            self.counts.setdefault(label, TypeCounts())

    @property
    def labels(self) -> list[str]:
        return list(self.classes)

    def issue(self, label: str):
        self.counts[label].generated += 1

    def record(
        self,
        label: str,
        outcome: Outcome,
        attempt_id=None,
        response_time: float | None = None,
        issue_time: float = 0.0,
        count: int = 1,
    ):
        if attempt_id is not None:
            if attempt_id in self._resolved:
                raise DoubleCount(f"attempt {attempt_id} resolved twice")
            self._resolved.add(attempt_id)
        c = self.counts[label]
        if outcome is Outcome.COMPLETED:
            if response_time is None:
                raise ValueError("completed outcomes need a response time")
            c.completed += count
            self.sample_type.append(label)
            self.sample_issue.append(issue_time)
            self.sample_time.append(response_time)
        elif outcome is Outcome.TIMED_OUT:
            c.timed_out += count
        elif outcome is Outcome.DROPPED:
            c.dropped += count
        else:
            c.not_generated += count

    def record_completion(self, label, attempt_id, issue_time, completion_time, deadline):
        """Completed if the reply beat the deadline, otherwise timed out."""
        if completion_time <= deadline:
            self.record(label, Outcome.COMPLETED, attempt_id, completion_time - issue_time, issue_time)
            return Outcome.COMPLETED
        self.record(label, Outcome.TIMED_OUT, attempt_id)
        return Outcome.TIMED_OUT

    def select(self, type_filter=None) -> list[str]:
        if type_filter in (None, "all"):
            return self.labels
        if isinstance(type_filter, str):
            if type_filter in self.classes:
                return [type_filter]
            picked = [lab for lab, cls in self.classes.items() if cls == type_filter]
            if not picked:
                raise KeyError(type_filter)
            return picked
        return list(type_filter)

    def totals(self, type_filter=None) -> TypeCounts:
        out = TypeCounts()
        for label in self.select(type_filter):
            out += self.counts[label]
        return out

    def by_class(self) -> dict[str, TypeCounts]:
        out: dict[str, TypeCounts] = {}
        for label, cls in self.classes.items():
            out.setdefault(cls, TypeCounts())
            out[cls] += self.counts[label]
        return out

    def samples(self, type_filter=None) -> np.ndarray:
        chosen = set(self.select(type_filter))
        return np.array(
            [t for lab, t in zip(self.sample_type, self.sample_time) if lab in chosen], dtype=float
        )

    def completion_times(self) -> np.ndarray:
        return np.asarray(self.sample_issue, dtype=float) + np.asarray(self.sample_time, dtype=float)

    def check_conservation(self):
        for label, c in self.counts.items():
            if c.generated != c.resolved:
                raise AssertionError(
                    f"{label}: generated {c.generated} != completed+timed_out+dropped {c.resolved}"
                )


@dataclass(frozen=True)
class Ccdf:
    """P(T > t) where timed-out and dropped requests count as T = infinity."""

    samples: np.ndarray  # sorted finite response times
    failures: int

    @property
    def total(self) -> int:
        return len(self.samples) + self.failures

    @property
    def thresholds(self) -> np.ndarray:
        return np.unique(self.samples)

    @property
    def infinite_mass(self) -> float:
        return self.failures / self.total

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        above = len(self.samples) - np.searchsorted(self.samples, t, side="right")
        out = (above + self.failures) / self.total
        return float(out) if out.ndim == 0 else out

    def fraction_within(self, t: float) -> float:
        return 1.0 - self(t)

    def quantile(self, p: float) -> float:
        """Smallest t with P(T <= t) >= p; inf if that falls in the failure mass."""
        k = math.ceil(p * self.total)
        if k <= 0:
            return 0.0
        if k > len(self.samples):
            return math.inf
        return float(self.samples[k - 1])

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        t = self.thresholds
        return t, self(t)


def ccdf(ledger: OutcomeLedger, type_filter=None) -> Ccdf:
    samples = np.sort(ledger.samples(type_filter))
    tot = ledger.totals(type_filter)
    if len(samples) != tot.completed:
        raise RuntimeError("sample count disagrees with completed counter")
    failures = tot.timed_out + tot.dropped
    if len(samples) + failures == 0:
        raise EmptySet(f"no resolved requests for filter {type_filter!r}")
    return Ccdf(samples, failures)


def summarize_counts(c: TypeCounts) -> dict[str, float]:
    """Percentages to one decimal, rounded by largest remainder so the four
    values add up to exactly 100."""
    keys = ("completed", "timed_out", "dropped", "not_generated")
    whole = c.intended
    if not whole:
        return dict.fromkeys(keys, 0.0)
    exact = [1000.0 * getattr(c, k) / whole for k in keys]
    tenths = [math.floor(x) for x in exact]
    order = sorted(range(len(keys)), key=lambda i: tenths[i] - exact[i])
    for i in order[: 1000 - sum(tenths)]:
        tenths[i] += 1
    return {k: t / 10 for k, t in zip(keys, tenths)}


def summarize(ledger: OutcomeLedger) -> list[dict]:
    """Percent completed / timed out / dropped / not generated over all
    intended requests, overall and per class."""
    rows = [{"group": "all", **summarize_counts(ledger.totals())}]
    for cls, c in ledger.by_class().items():
        rows.append({"group": cls, **summarize_counts(c)})
    return rows


def throughput(ledger: OutcomeLedger, horizon: float, start: float = 0.0) -> float:
    """Completed (in-time) requests per second over [start, horizon]."""
    span = horizon - start
    if span <= 0:
        raise ValueError("horizon must exceed start")
    done = ledger.completion_times()
    if len(done) == 0:
        return 0.0
    return float(np.count_nonzero((done >= start) & (done <= horizon))) / span


# -- CSV ----------------------------------------------------------------------

LEDGER_FIELDS = ("type", "class", *COUNTERS, "mean_response_s")


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else ("inf" if x > 0 else "nan")
    return str(x)


def ledger_rows(ledger: OutcomeLedger) -> list[dict]:
    rows = []
    groups = [(lab, ledger.classes[lab], [lab]) for lab in ledger.labels]
    groups += [(cls, cls, ledger.select(cls)) for cls in sorted(set(ledger.classes.values()))]
    groups.append(("all", "all", ledger.labels))
    for name, cls, labels in groups:
        c = ledger.totals(labels)
        s = ledger.samples(labels)
        mean = float(s.mean()) if len(s) else float("nan")
        rows.append(
            {"type": name, "class": cls, **{k: getattr(c, k) for k in COUNTERS}, "mean_response_s": mean}
        )
    return rows


def write_ledger_csv(ledger: OutcomeLedger, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEDGER_FIELDS)
        for row in ledger_rows(ledger):
            w.writerow([_fmt(row[k]) for k in LEDGER_FIELDS])


def read_ledger_csv(path) -> dict[str, dict]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = {k: int(row[k]) for k in COUNTERS}
            rec["class"] = row["class"]
            rec["mean_response_s"] = float(row["mean_response_s"])
            out[row["type"]] = rec
    return out


def ccdf_grid(t_max: float = 60.0, step: float = 0.25) -> np.ndarray:
    return np.round(np.arange(0.0, t_max + step / 2, step), 6)


def write_ccdf_csv(ledger: OutcomeLedger, path, filters: Sequence[str] | None = None, grid=None):
    """Long format: filter, t, value. Filters with no resolved requests are skipped."""
    grid = ccdf_grid() if grid is None else np.asarray(grid, dtype=float)
    if filters is None:
        filters = ["all", *sorted(set(ledger.classes.values())), *ledger.labels]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("filter", "t", "value"))
        for f in filters:
            try:
                c = ccdf(ledger, f)
            except EmptySet:
                continue
            for t, v in zip(grid, c(grid)):
                w.writerow((f, _fmt(float(t)), _fmt(float(v))))


def read_ccdf_csv(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    data: dict[str, tuple[list, list]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ts, vs = data.setdefault(row["filter"], ([], []))
            ts.append(float(row["t"]))
            vs.append(float(row["value"]))
    return {k: (np.array(a), np.array(b)) for k, (a, b) in data.items()}


def percentile_summary(values: Iterable[float], ps=(50, 90, 99)) -> dict[str, float]:
    arr = np.asarray(list(values), dtype=float)
    if len(arr) == 0:
        return {"count": 0, "mean": float("nan"), **{f"p{p}": float("nan") for p in ps}}
    return {
        "count": int(len(arr)),
        "mean": float(arr.mean()),
        **{f"p{p}": float(np.percentile(arr, p)) for p in ps},
    }
