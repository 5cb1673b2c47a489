"""Scenario files and the fully-resolved configuration of a single run."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .client import RetryPolicy, TimeoutModel
from .server import CPU_BOUND, PhaseProfile, Policy, QueueMode
from .workload import (
    SessionModel,
    default_model,
    load_model,
    model_from_dict,
    single_type_model,
    validate_model,
)


class ConfigInvalid(ValueError):
    pass


class ScenarioKind(str, enum.Enum):
    E1 = "E1-single-queue"
    E2 = "E2-ecommerce"


@dataclass(frozen=True)
class Scheme:
    name: str
    kind: ScenarioKind
    mode: QueueMode
    policy: Policy
    adaptive: bool


SCHEMES = {
    s.name: s
    for s in (
        Scheme("Always-FIFO", ScenarioKind.E1, QueueMode.SQ, Policy.FIFO, False),
        Scheme("Always-LIFO", ScenarioKind.E1, QueueMode.SQ, Policy.LIFO, False),
        Scheme("LIFO-at-overload", ScenarioKind.E1, QueueMode.SQ, Policy.FIFO, True),
        Scheme("SQ", ScenarioKind.E2, QueueMode.SQ, Policy.FIFO, False),
        Scheme("8Q-AF", ScenarioKind.E2, QueueMode.MULTI, Policy.FIFO, False),
        Scheme("8Q-LIFO-Pri", ScenarioKind.E2, QueueMode.MULTI, Policy.FIFO, True),
    )
}

# FIFO, infinite-patience reference used to calibrate capacity
CALIBRATION_SCHEME = {ScenarioKind.E1: "Always-FIFO", ScenarioKind.E2: "SQ"}


@dataclass(frozen=True)
class ServerConfig:
    workers: int = 30
    cpus: int = 1
    sq_capacity: int | None = 100
    browsing_capacity: int | None = 50
    transaction_capacity: int | None = 25
    upper_threshold: float = 0.99
    lower_threshold: float = 0.95
    window: float = 1.0
    profile: PhaseProfile = PhaseProfile()
    utility_digits: int | None = 2


@dataclass(frozen=True)
class ClientConfig:
    timeouts: TimeoutModel = TimeoutModel()
    retry: RetryPolicy = RetryPolicy()
    think_time: float = 0.0
    pool_size: int = 1000
    fresh_sampling: bool = False


@dataclass(frozen=True)
class RunConfig:
    """Everything one simulation run needs."""

    model: SessionModel
    scheme: Scheme
    session_rate: float
    horizon: float
    seed: int = 1
    server: ServerConfig = ServerConfig()
    client: ClientConfig = ClientConfig()
    warmup_fraction: float = 0.1
    record_logs: bool = False
    stop_at_horizon: bool = False  # skip the drain; used by calibration
    rho: float | None = None
    variant: str | None = None

    def validate(self):
        if self.session_rate < 0 or not math.isfinite(self.session_rate):
            raise ConfigInvalid(f"session rate must be finite and >= 0, got {self.session_rate}")
        if not self.horizon > 0:
            raise ConfigInvalid("horizon must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigInvalid("warmup_fraction must be in [0, 1)")
        s = self.server
        if s.workers < 1 or s.cpus < 1:
            raise ConfigInvalid("need at least one worker and one CPU")
        for cap in (s.sq_capacity, s.browsing_capacity, s.transaction_capacity):
            if cap is not None and cap < 0:
                raise ConfigInvalid("queue capacities must be >= 0")
        if not 0 < s.lower_threshold < s.upper_threshold <= 1:
            raise ConfigInvalid("need 0 < lower_threshold < upper_threshold <= 1")
        if s.window <= 0:
            raise ConfigInvalid("window must be positive")
        if self.client.pool_size < 1:
            raise ConfigInvalid("pool_size must be >= 1")
        if self.client.think_time < 0:
            raise ConfigInvalid("think_time must be >= 0")
        try:
            validate_model(self.model)
        except ValueError as exc:
            raise ConfigInvalid(f"session model: {exc}") from exc


@dataclass(frozen=True)
class CalibrationConfig:
    requests: int = 40000
    threshold: float = 0.999
    tolerance: float = 0.005  # relative bracket width at which bisection stops
    seed: int = 12345
    max_iter: int = 40


@dataclass(frozen=True)
class TimeoutVariant:
    name: str
    timeouts: TimeoutModel


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    kind: ScenarioKind
    model: SessionModel
    schemes: tuple[Scheme, ...]
    rhos: tuple[float, ...]
    seeds: tuple[int, ...]
    server: ServerConfig
    client: ClientConfig
    variants: tuple[TimeoutVariant, ...] = ()
    horizon: float | None = None  # seconds; None derives it from target_requests
    target_requests: int = 60000
    reference_rho: float = 1.4
    capacity: float | None = None
    warmup_fraction: float = 0.1
    calibration: CalibrationConfig = CalibrationConfig()
    ccdf_max: float = 60.0
    ccdf_step: float = 0.25
    source: Path | None = field(default=None, compare=False)

    def validate(self):
        if not self.rhos:
            raise ConfigInvalid("rho list is empty")
        if any(not (r > 0 and math.isfinite(r)) for r in self.rhos):
            raise ConfigInvalid(f"every rho must be positive, got {list(self.rhos)}")
        if not self.seeds:
            raise ConfigInvalid("seed list is empty")
        if not self.schemes:
            raise ConfigInvalid("scheme list is empty")
        for s in self.schemes:
            if s.kind is not self.kind:
                raise ConfigInvalid(f"scheme {s.name} does not belong to scenario kind {self.kind.value}")
        if self.capacity is not None and not self.capacity > 0:
            raise ConfigInvalid("capacity must be positive")
        try:
            validate_model(self.model)
        except ValueError as exc:
            raise ConfigInvalid(f"session model: {exc}") from exc

    @property
    def requests_per_session(self) -> float:
        from .workload import mean_requests_per_session

        return mean_requests_per_session(self.model)

    def horizon_for(self, capacity: float) -> float:
        if self.horizon is not None:
            return self.horizon
        return self.target_requests / (self.reference_rho * capacity)

    def run_config(
        self,
        scheme: Scheme,
        rho: float,
        seed: int,
        capacity: float,
        variant: TimeoutVariant | None = None,
        record_logs: bool = False,
    ) -> RunConfig:
        client = self.client
        if variant is not None:
            client = replace(client, timeouts=variant.timeouts)
        return RunConfig(
            model=self.model,
            scheme=scheme,
            session_rate=rho * capacity / self.requests_per_session,
            horizon=self.horizon_for(capacity),
            seed=seed,
            server=self.server,
            client=client,
            warmup_fraction=self.warmup_fraction,
            record_logs=record_logs,
            rho=rho,
            variant=variant.name if variant else None,
        )

    def variant_list(self) -> list[TimeoutVariant | None]:
        return list(self.variants) or [None]

    def restrict(self, rhos=None, seeds=None, schemes=None) -> "ScenarioConfig":
        out = self
        if rhos is not None:
            out = replace(out, rhos=tuple(float(r) for r in rhos))
        if seeds is not None:
            out = replace(out, seeds=tuple(int(s) for s in seeds))
        if schemes is not None:
            out = replace(out, schemes=tuple(_scheme(n) for n in schemes))
        out.validate()
        return out


# -- parsing -----------------------------------------------------------------


def _scheme(name: str) -> Scheme:
    try:
        return SCHEMES[name]
    except KeyError:
        raise ConfigInvalid(f"unknown scheme {name!r}; choose from {sorted(SCHEMES)}") from None


def _cap(v):
    return None if v is None or v == "inf" else int(v)


def _num(v) -> float:
    return math.inf if v in ("inf", None) else float(v)


def _timeouts(block: Mapping) -> TimeoutModel:
    return TimeoutModel(
        base_timeout=_num(block.get("base_timeout_s", 8.0)),
        think_timeout_mean=float(block.get("think_timeout_mean_s", 12.0)),
        think_distribution=str(block.get("think_distribution", "exponential")),
    )


def _model(block: Mapping, base_dir: Path | None) -> SessionModel:
    if "single_type" in block:
        st = block["single_type"]
        return single_type_model(float(st.get("mean_exec_ms", 290.0)) / 1000.0, st.get("label", "CGI"))
    ref = block.get("model", "default")
    if isinstance(ref, Mapping):
        return model_from_dict(ref)
    if ref == "default":
        return default_model()
    path = Path(ref)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    return load_model(path)


def scenario_from_dict(doc: Mapping[str, Any], base_dir: Path | None = None) -> ScenarioConfig:
    try:
        kind = ScenarioKind(doc["kind"])
    except (KeyError, ValueError):
        raise ConfigInvalid(f"kind must be one of {[k.value for k in ScenarioKind]}") from None
    wl = doc.get("workload", {}) or {}
    sv = doc.get("server", {}) or {}
    cl = doc.get("client", {}) or {}
    cal = doc.get("calibration", {}) or {}
    try:
        model = _model(wl, base_dir)
        prof = wl.get("profile")
        if prof == "cpu-bound":
            profile = CPU_BOUND
        elif prof is None:
            profile = CPU_BOUND if kind is ScenarioKind.E1 else PhaseProfile()
        else:
            profile = PhaseProfile(
                n_phases=int(prof.get("n_phases", 4)),
                busy_fraction=float(prof.get("busy_fraction", 0.5)),
                distribution=str(prof.get("distribution", "exponential")),
            )
        default_sq = 50 if kind is ScenarioKind.E1 else 100
        server = ServerConfig(
            workers=int(sv.get("workers", 30)),
            cpus=int(sv.get("cpus", 1)),
            sq_capacity=_cap(sv.get("sq_capacity", default_sq)),
            browsing_capacity=_cap(sv.get("browsing_capacity", 50)),
            transaction_capacity=_cap(sv.get("transaction_capacity", 25)),
            upper_threshold=float(sv.get("upper_threshold", 0.99)),
            lower_threshold=float(sv.get("lower_threshold", 0.95)),
            window=float(sv.get("window_s", 1.0)),
            profile=profile,
            utility_digits=sv.get("utility_digits", 2),
        )
        client = ClientConfig(
            timeouts=_timeouts(cl),
            retry=RetryPolicy(float(cl.get("retry_probability", 0.4)), int(cl.get("max_retries", 5))),
            think_time=float(cl.get("think_time_s", 0.0)),
            pool_size=int(wl.get("pool_size", cl.get("pool_size", 1000))),
            fresh_sampling=bool(wl.get("fresh_sampling", False)),
        )
        variants = tuple(
            TimeoutVariant(str(v["name"]), _timeouts({**cl, **v})) for v in doc.get("timeout_variants", []) or []
        )
        horizon = doc.get("horizon", "auto")
        calibration = CalibrationConfig(
            requests=int(cal.get("requests", 40000)),
            threshold=float(cal.get("threshold", 0.999)),
            tolerance=float(cal.get("tolerance", 0.005)),
            seed=int(cal.get("seed", 12345)),
        )
        scen = ScenarioConfig(
            name=str(doc.get("name", kind.name.lower())),
            kind=kind,
            model=model,
            schemes=tuple(_scheme(n) for n in doc.get("schemes", [])),
            rhos=tuple(float(r) for r in doc.get("rho", [])),
            seeds=tuple(int(s) for s in doc.get("seeds", [1])),
            server=server,
            client=client,
            variants=variants,
            horizon=None if horizon in (None, "auto") else float(horizon),
            target_requests=int(doc.get("target_requests", 60000)),
            reference_rho=float(doc.get("reference_rho", 1.4)),
            capacity=None if doc.get("capacity") in (None, "auto") else float(doc["capacity"]),
            warmup_fraction=float(doc.get("warmup_fraction", 0.1)),
            calibration=calibration,
            ccdf_max=float(doc.get("ccdf_max_s", 60.0)),
            ccdf_step=float(doc.get("ccdf_step_s", 0.25)),
        )
    except ConfigInvalid:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"bad scenario: {exc}") from exc
    scen.validate()
    return scen


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigInvalid(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise ConfigInvalid(f"{path}: expected a mapping at top level")
    return replace(scenario_from_dict(doc, path.parent), source=path)


def bundled_scenario(name: str) -> Path:
    """Path of a scenario shipped with the package (``e1`` or ``e2``)."""
    res = resources.files("overload_sim.data").joinpath(f"{name}.scenario")
    return Path(str(res))
