"""Pod startup under legacy CNI, CNI + device plugin, and KND pipelines.

Steps run one after another in phase order. Per-step latency defaults are
invented magnitudes, except the KND lognormals, which are fitted so that
100 simulated startups land near the reported 1.8 / 2.1 / 2.3 s
P50 / P90 / P99. That fit is a calibration and says nothing about the real
per-step breakdown.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np


class PipelineKind(str, enum.Enum):
    CNI_DAEMON = "CniDaemon"
    CNI_PLUS_DEVICE_PLUGIN = "CniPlusDevicePlugin"
    KND = "Knd"


class Phase(enum.IntEnum):
    SCHEDULING = 0
    PREPARE = 1
    SANDBOX = 2
    CONTAINER = 3


class Outcome(str, enum.Enum):
    READY = "Ready"
    TIMED_OUT = "TimedOut"


DAEMON_DISPATCH = "daemon-dispatch"


@dataclass(frozen=True)
class Latency:
    """Step duration distribution in seconds: constant, uniform or lognormal."""

    dist: str
    a: float
    b: float = 0.0

    def __post_init__(self):
        if self.dist == "constant":
            if self.a < 0:
                raise ValueError("constant latency must be >= 0")
        elif self.dist == "uniform":
            if not 0 <= self.a <= self.b:
                raise ValueError("uniform latency needs 0 <= lo <= hi")
        elif self.dist == "lognormal":
            if self.b < 0:
                raise ValueError("lognormal sigma must be >= 0")
        else:
            raise ValueError(f"unknown latency distribution {self.dist!r}")

    @classmethod
    def constant(cls, value: float) -> "Latency":
        return cls("constant", value)

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "Latency":
        return cls("uniform", lo, hi)

    @classmethod
    def lognormal(cls, mu: float, sigma: float) -> "Latency":
        return cls("lognormal", mu, sigma)

    def sample(self, rng: np.random.Generator) -> float:
        if self.dist == "constant":
            return float(self.a)
        if self.dist == "uniform":
            return float(rng.uniform(self.a, self.b))
        return float(rng.lognormal(self.a, self.b))

    def to_dict(self) -> dict:
        if self.dist == "constant":
            return {"dist": "constant", "value": self.a}
        if self.dist == "uniform":
            return {"dist": "uniform", "lo": self.a, "hi": self.b}
        return {"dist": "lognormal", "mu": self.a, "sigma": self.b}


@dataclass(frozen=True)
class StepSpec:
    step_name: str
    latency: Latency
    touches_api_server: bool
    phase: Phase


@dataclass(frozen=True)
class FaultSpec:
    daemon_down: bool = False
    cni_timeout: float = 30.0

    def __post_init__(self):
        if not self.cni_timeout > 0:
            raise ValueError("cni_timeout must be > 0")


@dataclass(frozen=True)
class StepEvent:
    step_name: str
    start: float
    end: float
    touches_api_server: bool
    phase: Phase


@dataclass(frozen=True)
class StartupTimeline:
    pod_name: str
    pipeline: PipelineKind
    events: tuple[StepEvent, ...]
    outcome: Outcome

    @property
    def total(self) -> float:
        if not self.events:
            return 0.0
        return self.events[-1].end - self.events[0].start

    @property
    def critical_path(self) -> float:
        """Total latency minus the Prepare phase, which runs ahead of sandbox setup."""
        prepare = sum(e.end - e.start for e in self.events if e.phase is Phase.PREPARE)
        return self.total - prepare


S, P, SB, C = Phase.SCHEDULING, Phase.PREPARE, Phase.SANDBOX, Phase.CONTAINER
const = Latency.constant

# lognormal medians 0.25 / 0.45 / 0.75 / 0.33 s, sigma 0.2 (fitted)
_KND = (
    StepSpec("schedule-with-claims", Latency.lognormal(math.log(0.25), 0.2), False, S),
    StepSpec("node-prepare-resources", Latency.lognormal(math.log(0.45), 0.2), False, P),
    StepSpec("nri-run-pod-sandbox", Latency.lognormal(math.log(0.75), 0.2), False, SB),
    StepSpec("nri-create-container", Latency.lognormal(math.log(0.33), 0.2), False, C),
)

_CNI_DAEMON = (
    StepSpec("schedule", Latency.uniform(0.2, 0.3), False, S),
    StepSpec("runtime-invoke-cni-binary", Latency.uniform(0.05, 0.15), False, SB),
    StepSpec(DAEMON_DISPATCH, Latency.uniform(0.05, 0.1), False, SB),
    StepSpec("api-server-lookup", Latency.lognormal(math.log(0.3), 0.4), True, SB),
    StepSpec("configure-interface", Latency.uniform(0.3, 0.6), False, SB),
)

# device plugin allocation and RDMA CNI configuration serialized around the
# CNI chain; real systems partly overlap them
_CNI_PLUS_DP = (
    _CNI_DAEMON[0],
    StepSpec("device-plugin-allocate", Latency.uniform(0.1, 0.3), False, C),
    *_CNI_DAEMON[1:],
    StepSpec("annotation-read", Latency.lognormal(math.log(0.3), 0.4), True, SB),
    StepSpec("rdma-cni-configure", Latency.uniform(0.3, 0.8), False, SB),
)

_DEFAULTS = {
    PipelineKind.CNI_DAEMON: _CNI_DAEMON,
    PipelineKind.CNI_PLUS_DEVICE_PLUGIN: _CNI_PLUS_DP,
    PipelineKind.KND: _KND,
}


def default_pipeline(kind: PipelineKind | str) -> list[StepSpec]:
    return list(_DEFAULTS[PipelineKind(kind)])


def with_overrides(steps: Sequence[StepSpec], overrides: dict[str, Latency]) -> list[StepSpec]:
    names = {s.step_name for s in steps}
    unknown = sorted(set(overrides) - names)
    if unknown:
        raise ValueError(f"overrides for unknown steps: {unknown}")
    return [replace(s, latency=overrides[s.step_name]) if s.step_name in overrides else s for s in steps]


def pipeline_kind_of(steps: Sequence[StepSpec]) -> PipelineKind:
    names = [s.step_name for s in steps]
    for kind, defaults in _DEFAULTS.items():
        if names == [s.step_name for s in defaults]:
            return kind
    if "schedule-with-claims" in names:
        return PipelineKind.KND
    if "device-plugin-allocate" in names:
        return PipelineKind.CNI_PLUS_DEVICE_PLUGIN
    return PipelineKind.CNI_DAEMON


def simulate_startup(
    pipeline: Sequence[StepSpec],
    faults: FaultSpec,
    rng: np.random.Generator,
    pod_name: str = "pod",
    kind: PipelineKind | None = None,
) -> StartupTimeline:
    """Run the steps back to back and record their timings.

    With ``faults.daemon_down``, a ``daemon-dispatch`` step hangs for
    ``cni_timeout`` seconds and the pod fails there.
    """
    if not pipeline:
        raise ValueError("pipeline must contain at least one step")
    kind = PipelineKind(kind) if kind is not None else pipeline_kind_of(pipeline)
    ordered = sorted(pipeline, key=lambda s: s.phase)  # stable within a phase
    clock = 0.0
    events = []
    outcome = Outcome.READY
    for step in ordered:
        if faults.daemon_down and step.step_name == DAEMON_DISPATCH:
            events.append(StepEvent(step.step_name, clock, clock + faults.cni_timeout,
                                    step.touches_api_server, step.phase))
            outcome = Outcome.TIMED_OUT
            break
        duration = step.latency.sample(rng)
        events.append(StepEvent(step.step_name, clock, clock + duration,
                                step.touches_api_server, step.phase))
        clock += duration
    return StartupTimeline(pod_name, kind, tuple(events), outcome)


def count_api_roundtrips(t: StartupTimeline) -> int:
    return sum(1 for e in t.events if e.touches_api_server)


def percentiles(samples: Sequence[float], ps: Sequence[float]) -> list[float]:
    """Nearest-rank percentiles: the value at rank ceil(p * n) of the sorted sample."""
    if len(samples) == 0:
        raise ValueError("percentiles of an empty sample")
    ordered = sorted(samples)
    n = len(ordered)
    out = []
    for p in ps:
        if not 0 < p <= 1:
            raise ValueError(f"percentile fraction {p} outside (0, 1]")
        # round first so that 0.9 * 100 does not become rank 91
        rank = math.ceil(round(p * n, 9))
        out.append(ordered[max(rank, 1) - 1])
    return out
