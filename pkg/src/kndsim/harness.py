"""Replication orchestration, CSV emission and report comparison.

Replication ``k`` of a scenario with seed ``s`` draws from three independent
streams, ``SeedSequence(entropy=s, spawn_key=(k, j))`` for j = 0
(allocation), 1 (startup) and 2 (bandwidth). Sub-seeds depend only on
(s, k), so replications can run in any order or in separate processes.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from kndsim import allocator, fabric, lifecycle
from kndsim.scenario import Scenario
from kndsim.topology import DeviceKind, DistanceClass, topology_distance

ALLOCATIONS_HEADER = ("replication", "pod", "node", "request", "device", "distance_class", "pending_reason")
STARTUP_HEADER = ("replication", "pod", "pipeline", "step", "start_s", "end_s", "api_touch", "outcome")
BANDWIDTH_HEADER = ("replication", "collective", "size_bytes", "mode", "distance_class", "busbw_gbs", "algbw_gbs")

STREAM_ALLOC, STREAM_STARTUP, STREAM_BANDWIDTH = 0, 1, 2
PERCENTILES = (0.5, 0.9, 0.99)
REPORTED_SIZES = (64 << 10, 1 << 20, 8 << 30)


class HarnessError(RuntimeError):
    pass


class AllocationRow(NamedTuple):
    replication: int
    pod: str
    node: str
    request: str
    device: str
    distance_class: str
    pending_reason: str


class StartupRow(NamedTuple):
    replication: int
    pod: str
    pipeline: str
    step: str
    start_s: float
    end_s: float
    api_touch: bool
    outcome: str


class BandwidthRow(NamedTuple):
    replication: int
    collective: str
    size_bytes: int
    mode: str
    distance_class: str
    busbw_gbs: float
    algbw_gbs: float


@dataclass
class ReplicationResult:
    allocations: list[AllocationRow] = field(default_factory=list)
    startup: list[StartupRow] = field(default_factory=list)
    bandwidth: list[BandwidthRow] = field(default_factory=list)


def stream(seed: int, replication: int, which: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(replication, which)))


def _pod_distance(state: allocator.ClusterState, alloc: allocator.Allocation) -> Optional[DistanceClass]:
    """Distance between the pod's first GPU and first NIC, if it has both."""
    node = state.node(alloc.node_name)
    devices = [node.device(name) for names in alloc.assignments.values() for name in names]
    gpu = next((d for d in devices if d.kind is DeviceKind.GPU), None)
    nic = next((d for d in devices if d.kind is DeviceKind.NIC), None)
    if gpu is None or nic is None:
        return None
    return topology_distance(gpu, nic)


def run_replication(scenario: Scenario, k: int) -> ReplicationResult:
    """One independent replication: allocate every pod, start it, benchmark."""
    out = ReplicationResult()
    rng_alloc = stream(scenario.seed, k, STREAM_ALLOC)
    rng_start = stream(scenario.seed, k, STREAM_STARTUP)
    rng_bw = stream(scenario.seed, k, STREAM_BANDWIDTH)
    state = allocator.ClusterState(scenario.nodes)
    mode = scenario.perf.mode
    distances: list[Optional[DistanceClass]] = []
    all_ready = True

    for template in scenario.claims:
        for pod in template.pod_names():
            claims = dataclasses.replace(template.claims, pod_name=pod)
            try:
                if mode is fabric.BenchMode.UNALIGNED_LOTTERY:
                    result = allocator.allocate_unaligned(state, claims, template.fixed_nic, rng_alloc,
                                                          node_name=template.node)
                elif template.node is not None:
                    view = allocator.ClusterState(
                        (state.node(template.node),),
                        {u for u in state.in_use if u[0] == template.node},
                    )
                    result = allocator.allocate(view, claims)
                else:
                    result = allocator.allocate(state, claims)
            except (allocator.AllocationError, allocator.ClaimError) as exc:
                raise HarnessError(f"replication {k}, pod {pod}: {exc}") from exc

            if isinstance(result, allocator.Pending):
                out.allocations.append(AllocationRow(k, pod, "", "", "", "", str(result)))
                all_ready = False
                continue
            state = state.with_allocation(result)
            d = _pod_distance(state, result)
            distances.append(d)
            label = d.label if d is not None else ""
            for req in claims.requests:
                for dev in result.assignments[req.request_name]:
                    out.allocations.append(AllocationRow(k, pod, result.node_name, req.request_name, dev, label, ""))

            timeline = lifecycle.simulate_startup(scenario.pipeline, scenario.faults, rng_start,
                                                  pod_name=pod, kind=scenario.pipeline_kind)
            for e in timeline.events:
                out.startup.append(StartupRow(k, pod, timeline.pipeline.value, e.step_name, e.start, e.end,
                                              e.touches_api_server, timeline.outcome.value))
            if timeline.outcome is not lifecycle.Outcome.READY:
                all_ready = False

    paired = [d for d in distances if d is not None]
    if all_ready and paired:
        # the slowest rank's placement bounds the collective
        d = max(paired)
        params = scenario.perf.params
        for c in scenario.perf.collectives:
            for size in scenario.perf.sizes:
                s = fabric.sample_busbw(params, c, size, d, rng_bw)
                out.bandwidth.append(BandwidthRow(k, c.value, size, mode.value, d.label, s.busbw, s.algbw))
    out.allocations.sort(key=lambda r: (r.pod, r.request, r.device))
    out.startup.sort(key=lambda r: r.pod)  # stable: events stay in time order
    return out


def _run_chunk(args) -> list[tuple[int, ReplicationResult]]:
    scenario, indices = args
    return [(k, run_replication(scenario, k)) for k in indices]


@dataclass(frozen=True)
class RunReport:
    """Raw rows plus aggregates computed from them (never stored separately)."""

    scenario: str
    replications: int
    allocations: tuple[AllocationRow, ...]
    startup: tuple[StartupRow, ...]
    bandwidth: tuple[BandwidthRow, ...]

    def pod_timelines(self) -> dict[tuple[int, str], list[StartupRow]]:
        by_pod: dict[tuple[int, str], list[StartupRow]] = defaultdict(list)
        for row in self.startup:
            by_pod[(row.replication, row.pod)].append(row)
        return dict(by_pod)

    def startup_totals(self) -> list[float]:
        return [max(r.end_s for r in rows) - min(r.start_s for r in rows)
                for _, rows in sorted(self.pod_timelines().items())]

    def startup_percentiles(self) -> Optional[list[float]]:
        totals = self.startup_totals()
        return lifecycle.percentiles(totals, PERCENTILES) if totals else None

    def outcomes(self) -> dict[str, int]:
        counts: dict[str, int] = defaultdict(int)
        for rows in self.pod_timelines().values():
            counts[rows[0].outcome] += 1
        return dict(sorted(counts.items()))

    def api_roundtrips(self) -> list[int]:
        return [sum(1 for r in rows if r.api_touch) for _, rows in sorted(self.pod_timelines().items())]

    def bandwidth_stats(self) -> dict[tuple[str, int], fabric.ExperimentStats]:
        by_key: dict[tuple[str, int], list[float]] = defaultdict(list)
        for row in self.bandwidth:
            by_key[(row.collective, row.size_bytes)].append(row.busbw_gbs)
        return {k: fabric.stats_of(v) for k, v in sorted(by_key.items())}

    def alignment_fraction(self) -> Optional[float]:
        per_pod = {}
        for row in self.allocations:
            if row.distance_class:
                per_pod[(row.replication, row.pod)] = row.distance_class
        if not per_pod:
            return None
        return sum(1 for v in per_pod.values() if v == "SamePciRoot") / len(per_pod)

    def pending(self) -> int:
        return sum(1 for r in self.allocations if r.pending_reason)


def run(scenario: Scenario, order: Optional[Sequence[int]] = None, workers: int = 1) -> RunReport:
    """Run every replication and fold the results in replication order.

    ``order`` only changes execution order; ``workers > 1`` uses a process
    pool. Neither affects the report.
    """
    n = scenario.perf.replications
    indices = list(range(n)) if order is None else list(order)
    if sorted(indices) != list(range(n)):
        raise ValueError("order must be a permutation of the replication indices")
    results: dict[int, ReplicationResult] = {}
    if workers > 1 and n > 1:
        chunks = [indices[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_run_chunk, [(scenario, c) for c in chunks if c]):
                results.update(part)
    else:
        for k in indices:
            results[k] = run_replication(scenario, k)
    allocs, starts, bws = [], [], []
    for k in range(n):
        allocs.extend(results[k].allocations)
        starts.extend(results[k].startup)
        bws.extend(results[k].bandwidth)
    return RunReport(scenario.name, n, tuple(allocs), tuple(starts), tuple(bws))


# --- CSV ---------------------------------------------------------------------

def _cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write(path: Path, header: Sequence[str], rows: Iterable[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def emit_csv(report: RunReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "allocations.csv", out / "startup.csv", out / "bandwidth.csv"]
    _write(files[0], ALLOCATIONS_HEADER, report.allocations)
    _write(files[1], STARTUP_HEADER, report.startup)
    _write(files[2], BANDWIDTH_HEADER, report.bandwidth)
    return files


def _read(path: Path, header: Sequence[str]) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != tuple(header):
            raise HarnessError(f"{path}: unexpected header {reader.fieldnames}")
        return list(reader)


def load_report(report_dir: str | Path) -> RunReport:
    """Rebuild a report from the three CSV files written by :func:`emit_csv`."""
    d = Path(report_dir)
    try:
        allocs = [AllocationRow(int(r["replication"]), r["pod"], r["node"], r["request"], r["device"],
                                r["distance_class"], r["pending_reason"])
                  for r in _read(d / "allocations.csv", ALLOCATIONS_HEADER)]
        starts = [StartupRow(int(r["replication"]), r["pod"], r["pipeline"], r["step"], float(r["start_s"]),
                             float(r["end_s"]), r["api_touch"] == "true", r["outcome"])
                  for r in _read(d / "startup.csv", STARTUP_HEADER)]
        bws = [BandwidthRow(int(r["replication"]), r["collective"], int(r["size_bytes"]), r["mode"],
                            r["distance_class"], float(r["busbw_gbs"]), float(r["algbw_gbs"]))
               for r in _read(d / "bandwidth.csv", BANDWIDTH_HEADER)]
    except (OSError, KeyError, ValueError) as exc:
        raise HarnessError(f"cannot load report from {d}: {exc}") from exc
    reps = {r.replication for r in allocs} | {r.replication for r in starts} | {r.replication for r in bws}
    return RunReport(d.name, (max(reps) + 1) if reps else 0, tuple(allocs), tuple(starts), tuple(bws))


# --- comparison --------------------------------------------------------------

@dataclass(frozen=True)
class Comparison:
    speedups: dict[tuple[str, int], float]
    max_speedup: dict[str, tuple[int, float]]
    latency_delta: Optional[list[float]]
    api_roundtrip_delta: Optional[float]

    def lines(self) -> list[str]:
        out = []
        for (c, size), s in self.speedups.items():
            mark = "  <- max" if self.max_speedup.get(c, (None,))[0] == size else ""
            out.append(f"speedup {c} {size} {s:.4f}{mark}")
        if self.latency_delta is not None:
            p50, p90, p99 = self.latency_delta
            out.append(f"startup delta P50 {p50:+.3f}s P90 {p90:+.3f}s P99 {p99:+.3f}s")
        if self.api_roundtrip_delta is not None:
            out.append(f"api roundtrips per pod delta {self.api_roundtrip_delta:+.3f}")
        return out


def compare(report_a: RunReport, report_b: RunReport) -> Comparison:
    """Speedup of ``a`` over ``b`` (mean_a / mean_b) per collective and size."""
    a, b = report_a.bandwidth_stats(), report_b.bandwidth_stats()
    if set(a) != set(b):
        raise HarnessError("reports cover different collectives or message sizes")
    speedups = {k: a[k].mean / b[k].mean for k in a}
    best: dict[str, tuple[int, float]] = {}
    for (c, size), s in speedups.items():
        if c not in best or s > best[c][1]:
            best[c] = (size, s)
    pa, pb = report_a.startup_percentiles(), report_b.startup_percentiles()
    latency = [x - y for x, y in zip(pa, pb)] if pa and pb else None
    ra, rb = report_a.api_roundtrips(), report_b.api_roundtrips()
    api = (math.fsum(ra) / len(ra) - math.fsum(rb) / len(rb)) if ra and rb else None
    return Comparison(speedups, best, latency, api)


def summary_lines(report: RunReport) -> list[str]:
    lines = [f"scenario {report.scenario}: {report.replications} replications"]
    frac = report.alignment_fraction()
    if frac is not None:
        lines.append(f"aligned placements: {frac:.4f}")
    if report.pending():
        lines.append(f"pending pods: {report.pending()}")
    pct = report.startup_percentiles()
    if pct is not None:
        lines.append("startup P50 {:.3f}s P90 {:.3f}s P99 {:.3f}s".format(*pct))
        lines.append("outcomes " + " ".join(f"{k}={v}" for k, v in report.outcomes().items()))
        api = report.api_roundtrips()
        lines.append(f"api roundtrips per pod: min {min(api)} max {max(api)}")
    for (c, size), st in report.bandwidth_stats().items():
        if size in REPORTED_SIZES:
            lines.append(f"busbw {c} {size}: {st.mean:.2f} +/- {st.stddev:.2f} GB/s (n={st.n})")
    return lines
