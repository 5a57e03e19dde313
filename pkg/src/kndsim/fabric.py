"""NCCL-style bus bandwidth model for aligned vs. unaligned GPU/NIC pairs.

Mean bus bandwidth follows a one-parameter saturation curve
``peak * S / (S + S_half)``. The aligned peaks are the measured 8 GB
values. Each unaligned level is backed out of the measured lottery mean,
taking a 1-in-8 aligned mixture:

    b_unaligned = (mean_unaligned - peak_aligned / 8) * 8 / 7

The two unaligned distance classes sit either side of ``b_unaligned`` with
offsets weighted 3:4 (three same-NUMA GPUs and four cross-NUMA GPUs per NIC
on the preset node), so their lottery-weighted mean is exactly
``b_unaligned`` while peaks still decrease strictly with distance.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from kndsim import allocator, selector
from kndsim.topology import DistanceClass, build_preset_node, topology_distance

GIB = 1 << 30

# Measured bus bandwidth, GB/s at 8 GB: (aligned mean, unaligned mean)
MEASURED_8G = {"AllGather": (46.59, 29.20), "AllReduce": (46.93, 29.68)}
# Measured aligned means used to fit the half-saturation size (bytes, GB/s)
MEASURED_ALIGNED_ROWS = {
    "AllGather": ((64 << 10, 1.29), (1 << 20, 11.42), (8 * GIB, 46.59)),
    "AllReduce": ((64 << 10, 1.53), (1 << 20, 14.11), (8 * GIB, 46.93)),
}
P_ALIGNED = 1 / 8
# SameNumaCrossRoot sits this far above b_unaligned; CrossNuma sits 3/4 of it below
UNALIGNED_SPREAD = 2.0


class CollectiveKind(str, enum.Enum):
    ALL_GATHER = "AllGather"
    ALL_REDUCE = "AllReduce"


class BenchMode(str, enum.Enum):
    ALIGNED = "Aligned"
    UNALIGNED_LOTTERY = "UnalignedLottery"


def bus_factor(c: CollectiveKind | str, ranks: int) -> float:
    """busbw / algbw as reported by nccl-tests."""
    if ranks < 2:
        raise ValueError("ranks must be >= 2")
    c = CollectiveKind(c)
    if c is CollectiveKind.ALL_GATHER:
        return (ranks - 1) / ranks
    return 2 * (ranks - 1) / ranks


def unaligned_level(peak_aligned: float, mean_unaligned: float, p_aligned: float = P_ALIGNED) -> float:
    """Invert the two-point mixture mean for the unaligned level."""
    return (mean_unaligned - p_aligned * peak_aligned) / (1 - p_aligned)


def fit_half_saturation(peak: float, rows: Sequence[tuple[int, float]]) -> float:
    """Least-squares fit (log residuals) of S_half to measured (size, busbw) rows."""
    from scipy.optimize import minimize_scalar

    sizes = np.array([r[0] for r in rows], dtype=float)
    logbw = np.log([r[1] for r in rows])

    def loss(log_h: float) -> float:
        pred = np.log(peak * sizes / (sizes + math.exp(log_h)))
        return float(np.sum((pred - logbw) ** 2))

    res = minimize_scalar(loss, bounds=(math.log(1e2), math.log(1e11)), method="bounded",
                          options={"xatol": 1e-10})
    return math.exp(res.x)


# frozen outputs of fit_half_saturation on MEASURED_ALIGNED_ROWS
HALF_SATURATION_BYTES = {"AllGather": 2595441.65, "AllReduce": 2093881.06}


def _default_peaks() -> dict:
    peaks = {}
    for c, (aligned, unaligned_mean) in MEASURED_8G.items():
        b_u = unaligned_level(aligned, unaligned_mean)
        peaks[CollectiveKind(c)] = {
            DistanceClass.SAME_PCI_ROOT: aligned,
            DistanceClass.SAME_NUMA_CROSS_ROOT: b_u + UNALIGNED_SPREAD,
            DistanceClass.CROSS_NUMA: b_u - UNALIGNED_SPREAD * 3 / 4,
        }
    return peaks


@dataclass(frozen=True)
class PerfParams:
    peak_busbw: Mapping[CollectiveKind, Mapping[DistanceClass, float]] = field(default_factory=_default_peaks)
    half_saturation_size: Mapping[CollectiveKind, float] = field(
        default_factory=lambda: {CollectiveKind(k): v for k, v in HALF_SATURATION_BYTES.items()}
    )
    jitter_rel: Mapping[DistanceClass, float] = field(
        default_factory=lambda: {
            DistanceClass.SAME_PCI_ROOT: 0.0007,
            DistanceClass.SAME_NUMA_CROSS_ROOT: 0.03,
            DistanceClass.CROSS_NUMA: 0.03,
        }
    )
    ranks: int = 2

    def __post_init__(self):
        if self.ranks < 2:
            raise ValueError("ranks must be >= 2")
        for c, peaks in self.peak_busbw.items():
            ordered = [peaks[d] for d in DistanceClass]
            if any(a <= b for a, b in zip(ordered, ordered[1:])) or ordered[-1] <= 0:
                raise ValueError(f"{c.value}: peak_busbw must be positive and strictly decreasing in distance")
        for c, h in self.half_saturation_size.items():
            if not h > 0:
                raise ValueError(f"{c.value}: half_saturation_size must be > 0")
        if any(j < 0 for j in self.jitter_rel.values()):
            raise ValueError("jitter_rel must be >= 0")


@dataclass(frozen=True)
class BandwidthSample:
    collective: CollectiveKind
    message_size: int
    distance: DistanceClass
    busbw: float
    algbw: float


@dataclass(frozen=True)
class ExperimentStats:
    mean: float
    stddev: float
    n: int


def stats_of(values: Sequence[float]) -> ExperimentStats:
    """Mean and sample standard deviation (0 for a single value)."""
    n = len(values)
    if n == 0:
        raise ValueError("no samples")
    mean = math.fsum(values) / n
    if n == 1:
        return ExperimentStats(mean, 0.0, 1)
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return ExperimentStats(mean, math.sqrt(var), n)


def mean_busbw(params: PerfParams, c: CollectiveKind | str, size: int, d: DistanceClass) -> float:
    if size < 1:
        raise ValueError("message size must be >= 1 byte")
    c = CollectiveKind(c)
    return params.peak_busbw[c][d] * size / (size + params.half_saturation_size[c])


def _jittered(mean: float, jitter: float, rng: np.random.Generator) -> float:
    if jitter == 0:
        return mean
    while True:
        eps = rng.normal(0.0, jitter)
        if 1 + eps > 0:
            return mean * (1 + eps)


def sample_busbw(params: PerfParams, c: CollectiveKind | str, size: int, d: DistanceClass,
                 rng: np.random.Generator) -> BandwidthSample:
    c = CollectiveKind(c)
    busbw = _jittered(mean_busbw(params, c, size, d), params.jitter_rel[d], rng)
    return BandwidthSample(c, size, d, busbw, busbw / bus_factor(c, params.ranks))


def mixture_stats(b_aligned: float, b_unaligned: float, p_aligned: float) -> ExperimentStats:
    """Exact moments of a two-point mixture (population stddev, n reported as 1)."""
    if not 0 <= p_aligned <= 1:
        raise ValueError("p_aligned must lie in [0, 1]")
    mean = p_aligned * b_aligned + (1 - p_aligned) * b_unaligned
    stddev = math.sqrt(p_aligned * (1 - p_aligned)) * abs(b_aligned - b_unaligned)
    return ExperimentStats(mean, stddev, 1)


def size_sweep(begin: int = 8, end: int = 8 * GIB, factor: int = 2) -> list[int]:
    """Message sizes begin, begin*factor, ... up to end, like ``-b 8 -e 8G -f 2``."""
    if begin < 1 or end < begin or factor < 2:
        raise ValueError("sweep needs 1 <= begin <= end and factor >= 2")
    sizes = []
    s = begin
    while s <= end:
        sizes.append(s)
        s *= factor
    return sizes


def lottery_distance(rng: np.random.Generator, fixed_nic: str = "rdma0") -> DistanceClass:
    """Draw one unaligned placement on a fresh preset node and classify it."""
    node = build_preset_node("A4HighGpu8g", "bench-node")
    claims = allocator.PodClaimSet(
        "bench",
        (
            allocator.DeviceRequest("gpu", selector.parse('device.kind == "Gpu"')),
            allocator.DeviceRequest("nic", selector.parse('device.kind == "Nic" && device.attributes["rdma"] == true')),
        ),
    )
    alloc = allocator.allocate_unaligned(allocator.ClusterState((node,)), claims, fixed_nic, rng)
    return topology_distance(node.device(alloc.assignments["gpu"][0]), node.device(fixed_nic))


def run_benchmark(
    params: PerfParams,
    c: CollectiveKind | str,
    sizes: Sequence[int],
    mode: BenchMode | str,
    replications: int,
    rng: np.random.Generator,
) -> list[ExperimentStats]:
    """Per-size statistics over ``replications`` independent placements.

    One GPU and one NIC per process: a replication has a single distance
    class, drawn once and reused across the whole size sweep.
    """
    if replications < 1:
        raise ValueError("replications must be >= 1")
    mode = BenchMode(mode)
    per_size: list[list[float]] = [[] for _ in sizes]
    for _ in range(replications):
        if mode is BenchMode.ALIGNED:
            d = DistanceClass.SAME_PCI_ROOT
        else:
            d = lottery_distance(rng)
        for i, size in enumerate(sizes):
            per_size[i].append(sample_busbw(params, c, size, d, rng).busbw)
    return [stats_of(v) for v in per_size]
