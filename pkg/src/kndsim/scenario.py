"""Scenario files: strict JSON with cross-reference validation.

A scenario looks like::

    {
      "name": "aligned-a4",
      "seed": 20250701,
      "nodes": [{"name": "node-a", "preset": "A4HighGpu8g"}],
      "claims": [{
        "pod": "nccl", "replicas": 1, "node": "node-a",
        "requests": [{"name": "gpu", "selector": "device.kind == \\"Gpu\\""}, ...],
        "constraints": [{"matchAttribute": "pciRoot", "requests": ["gpu", "nic"]}]
      }],
      "pipeline": {"kind": "Knd", "overrides": {}},
      "faults": {"daemon_down": false, "cni_timeout": 30},
      "perf": {"mode": "Aligned", "replications": 100,
               "collectives": ["AllGather", "AllReduce"],
               "sweep": {"begin": 8, "end": 8589934592, "factor": 2}}
    }

Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

from kndsim import allocator, fabric, lifecycle, selector, topology

BUNDLED = ("aligned-a4", "unaligned-a4", "cni-baseline", "daemon-down")
SEED_MAX = 2**64 - 1


class ScenarioError(ValueError):
    def __init__(self, message: str, location: str = ""):
        super().__init__(f"{location}: {message}" if location else message)
        self.location = location


@dataclass(frozen=True)
class ClaimTemplate:
    claims: allocator.PodClaimSet
    replicas: int = 1
    node: Optional[str] = None
    fixed_nic: Optional[str] = None

    def pod_names(self) -> list[str]:
        return [f"{self.claims.pod_name}-{i}" for i in range(self.replicas)]


@dataclass(frozen=True)
class PerfConfig:
    params: fabric.PerfParams = field(default_factory=fabric.PerfParams)
    collectives: tuple[fabric.CollectiveKind, ...] = tuple(fabric.CollectiveKind)
    sizes: tuple[int, ...] = tuple(fabric.size_sweep())
    mode: fabric.BenchMode = fabric.BenchMode.ALIGNED
    replications: int = 100


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    nodes: tuple[topology.NodeInventory, ...]
    claims: tuple[ClaimTemplate, ...]
    pipeline_kind: lifecycle.PipelineKind
    pipeline: tuple[lifecycle.StepSpec, ...]
    faults: lifecycle.FaultSpec
    perf: PerfConfig


def _check_keys(obj: Any, loc: str, required: set[str], optional: set[str] = frozenset()) -> dict:
    if not isinstance(obj, dict):
        raise ScenarioError("expected an object", loc)
    unknown = sorted(set(obj) - required - set(optional))
    if unknown:
        raise ScenarioError(f"unknown key(s) {unknown}", loc)
    missing = sorted(required - set(obj))
    if missing:
        raise ScenarioError(f"missing key(s) {missing}", loc)
    return obj


def _int(value: Any, loc: str, lo: int = 0, hi: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ScenarioError("expected an integer", loc)
    if value < lo or (hi is not None and value > hi):
        raise ScenarioError(f"integer {value} out of range", loc)
    return value


def _num(value: Any, loc: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError("expected a number", loc)
    return float(value)


def _str(value: Any, loc: str) -> str:
    if not isinstance(value, str) or not value:
        raise ScenarioError("expected a non-empty string", loc)
    return value


def _enum(cls, value: Any, loc: str):
    try:
        return cls(value)
    except ValueError:
        choices = [m.value for m in cls]
        raise ScenarioError(f"{value!r} is not one of {choices}", loc) from None


def _parse_node(raw: Any, loc: str) -> topology.NodeInventory:
    if isinstance(raw, dict) and "preset" in raw:
        _check_keys(raw, loc, {"name", "preset"})
        try:
            return topology.build_preset_node(raw["preset"], _str(raw["name"], f"{loc}.name"))
        except topology.TopologyError as exc:
            raise ScenarioError(str(exc), f"{loc}.preset") from None
    _check_keys(raw, loc, {"name", "devices"})
    if not isinstance(raw["devices"], list):
        raise ScenarioError("expected a list", f"{loc}.devices")
    for i, dev in enumerate(raw["devices"]):
        _check_keys(dev, f"{loc}.devices[{i}]", {"name", "kind", "attributes"})
        if not isinstance(dev["attributes"], dict):
            raise ScenarioError("expected an object", f"{loc}.devices[{i}].attributes")
    spec = topology.NodeTopologySpec(_str(raw["name"], f"{loc}.name"), tuple(raw["devices"]))
    try:
        return topology.build_node(spec)
    except topology.TopologyError as exc:
        raise ScenarioError(str(exc), f"{loc}.devices") from None


def _parse_claim(raw: Any, loc: str, nodes: dict[str, topology.NodeInventory]) -> ClaimTemplate:
    _check_keys(raw, loc, {"pod", "requests"}, {"replicas", "node", "fixed_nic", "constraints"})
    pod = _str(raw["pod"], f"{loc}.pod")
    if not isinstance(raw["requests"], list) or not raw["requests"]:
        raise ScenarioError("expected a non-empty list", f"{loc}.requests")
    requests = []
    config = {}
    for i, r in enumerate(raw["requests"]):
        rloc = f"{loc}.requests[{i}]"
        _check_keys(r, rloc, {"name", "selector"}, {"count", "config"})
        name = _str(r["name"], f"{rloc}.name")
        try:
            ast = selector.parse(_str(r["selector"], f"{rloc}.selector"))
        except selector.SelectorSyntaxError as exc:
            raise ScenarioError(str(exc), f"{rloc}.selector") from None
        count = _int(r.get("count", 1), f"{rloc}.count", lo=1)
        if "config" in r:
            if not isinstance(r["config"], str):
                raise ScenarioError("config payload must be a string", f"{rloc}.config")
            config[name] = r["config"]
        requests.append(allocator.DeviceRequest(name, ast, count))
    constraints = []
    for i, c in enumerate(raw.get("constraints", [])):
        cloc = f"{loc}.constraints[{i}]"
        _check_keys(c, cloc, {"matchAttribute", "requests"})
        if not isinstance(c["requests"], list):
            raise ScenarioError("expected a list", f"{cloc}.requests")
        try:
            constraints.append(
                allocator.MatchAttributeConstraint(
                    _str(c["matchAttribute"], f"{cloc}.matchAttribute"),
                    frozenset(_str(n, f"{cloc}.requests") for n in c["requests"]),
                )
            )
        except allocator.ClaimError as exc:
            raise ScenarioError(str(exc), cloc) from None
    try:
        claims = allocator.PodClaimSet(pod, tuple(requests), tuple(constraints), config)
    except allocator.ClaimError as exc:
        raise ScenarioError(str(exc), loc) from None

    node = raw.get("node")
    if node is not None and node not in nodes:
        raise ScenarioError(f"unknown node {node!r}", f"{loc}.node")
    fixed_nic = raw.get("fixed_nic")
    if fixed_nic is not None:
        _str(fixed_nic, f"{loc}.fixed_nic")
        hosts = [nodes[node]] if node is not None else list(nodes.values())
        if not any(fixed_nic in {d.name for d in n.devices} for n in hosts):
            raise ScenarioError(f"unknown device {fixed_nic!r}", f"{loc}.fixed_nic")
    return ClaimTemplate(claims, _int(raw.get("replicas", 1), f"{loc}.replicas", lo=1), node, fixed_nic)


def parse_latency(raw: Any, loc: str) -> lifecycle.Latency:
    if not isinstance(raw, dict) or "dist" not in raw:
        raise ScenarioError("latency needs a 'dist' key", loc)
    dist = raw["dist"]
    fields = {"constant": ("value",), "uniform": ("lo", "hi"), "lognormal": ("mu", "sigma")}
    if dist not in fields:
        raise ScenarioError(f"unknown distribution {dist!r}", loc)
    _check_keys(raw, loc, {"dist", *fields[dist]})
    args = [_num(raw[k], f"{loc}.{k}") for k in fields[dist]]
    try:
        return lifecycle.Latency(dist, *args)
    except ValueError as exc:
        raise ScenarioError(str(exc), loc) from None


def _parse_pipeline(raw: Any, loc: str):
    _check_keys(raw, loc, {"kind"}, {"overrides"})
    kind = _enum(lifecycle.PipelineKind, raw["kind"], f"{loc}.kind")
    overrides_raw = raw.get("overrides", {})
    if not isinstance(overrides_raw, dict):
        raise ScenarioError("expected an object", f"{loc}.overrides")
    overrides = {k: parse_latency(v, f"{loc}.overrides.{k}") for k, v in overrides_raw.items()}
    try:
        steps = lifecycle.with_overrides(lifecycle.default_pipeline(kind), overrides)
    except ValueError as exc:
        raise ScenarioError(str(exc), f"{loc}.overrides") from None
    return kind, tuple(steps)


def _class_map(raw: Any, loc: str) -> dict:
    if not isinstance(raw, dict):
        raise ScenarioError("expected an object", loc)
    out = {}
    for k, v in raw.items():
        try:
            out[topology.DistanceClass.from_label(k)] = _num(v, f"{loc}.{k}")
        except ValueError:
            raise ScenarioError(f"unknown distance class {k!r}", loc) from None
    return out


def _parse_perf(raw: Any, loc: str) -> PerfConfig:
    _check_keys(raw, loc, set(), {"mode", "replications", "collectives", "sweep", "sizes",
                                  "ranks", "peak_busbw", "half_saturation_size", "jitter_rel"})
    defaults = fabric.PerfParams()
    peaks = {c: dict(v) for c, v in defaults.peak_busbw.items()}
    for c, classes in raw.get("peak_busbw", {}).items():
        coll = _enum(fabric.CollectiveKind, c, f"{loc}.peak_busbw")
        peaks[coll].update(_class_map(classes, f"{loc}.peak_busbw.{c}"))
    halves = dict(defaults.half_saturation_size)
    for c, v in raw.get("half_saturation_size", {}).items():
        halves[_enum(fabric.CollectiveKind, c, f"{loc}.half_saturation_size")] = _num(
            v, f"{loc}.half_saturation_size.{c}")
    jitter = dict(defaults.jitter_rel)
    jitter.update(_class_map(raw.get("jitter_rel", {}), f"{loc}.jitter_rel"))
    try:
        params = fabric.PerfParams(peaks, halves, jitter, _int(raw.get("ranks", 2), f"{loc}.ranks"))
    except ValueError as exc:
        raise ScenarioError(str(exc), loc) from None

    if "sweep" in raw and "sizes" in raw:
        raise ScenarioError("give either 'sweep' or 'sizes', not both", loc)
    if "sizes" in raw:
        if not isinstance(raw["sizes"], list) or not raw["sizes"]:
            raise ScenarioError("expected a non-empty list", f"{loc}.sizes")
        sizes = tuple(_int(s, f"{loc}.sizes", lo=1) for s in raw["sizes"])
    else:
        sw = _check_keys(raw.get("sweep", {}), f"{loc}.sweep", set(), {"begin", "end", "factor"})
        try:
            sizes = tuple(fabric.size_sweep(
                _int(sw.get("begin", 8), f"{loc}.sweep.begin"),
                _int(sw.get("end", 8 * fabric.GIB), f"{loc}.sweep.end"),
                _int(sw.get("factor", 2), f"{loc}.sweep.factor"),
            ))
        except ValueError as exc:
            raise ScenarioError(str(exc), f"{loc}.sweep") from None
    colls = raw.get("collectives", [c.value for c in fabric.CollectiveKind])
    if not isinstance(colls, list):
        raise ScenarioError("expected a list", f"{loc}.collectives")
    return PerfConfig(
        params=params,
        collectives=tuple(_enum(fabric.CollectiveKind, c, f"{loc}.collectives") for c in colls),
        sizes=sizes,
        mode=_enum(fabric.BenchMode, raw.get("mode", "Aligned"), f"{loc}.mode"),
        replications=_int(raw.get("replications", 100), f"{loc}.replications"),
    )


def scenario_from_dict(data: Any) -> Scenario:
    _check_keys(data, "$", {"name", "nodes", "claims"}, {"seed", "pipeline", "faults", "perf"})
    if "seed" not in data:
        raise ScenarioError("seed required", "$.seed")
    seed = _int(data["seed"], "$.seed", hi=SEED_MAX)
    name = _str(data["name"], "$.name")

    if not isinstance(data["nodes"], list):
        raise ScenarioError("expected a list", "$.nodes")
    nodes: dict[str, topology.NodeInventory] = {}
    for i, raw in enumerate(data["nodes"]):
        inv = _parse_node(raw, f"$.nodes[{i}]")
        if inv.node_name in nodes:
            raise ScenarioError(f"duplicate node name {inv.node_name!r}", f"$.nodes[{i}].name")
        nodes[inv.node_name] = inv

    if not isinstance(data["claims"], list):
        raise ScenarioError("expected a list", "$.claims")
    claims = tuple(_parse_claim(c, f"$.claims[{i}]", nodes) for i, c in enumerate(data["claims"]))
    pods = [p for t in claims for p in t.pod_names()]
    if len(set(pods)) != len(pods):
        raise ScenarioError("pod names collide across claim templates", "$.claims")

    kind, steps = _parse_pipeline(data.get("pipeline", {"kind": "Knd"}), "$.pipeline")
    fraw = _check_keys(data.get("faults", {}), "$.faults", set(), {"daemon_down", "cni_timeout"})
    daemon_down = fraw.get("daemon_down", False)
    if not isinstance(daemon_down, bool):
        raise ScenarioError("expected true or false", "$.faults.daemon_down")
    try:
        faults = lifecycle.FaultSpec(daemon_down, _num(fraw.get("cni_timeout", 30.0), "$.faults.cni_timeout"))
    except ValueError as exc:
        raise ScenarioError(str(exc), "$.faults.cni_timeout") from None
    perf = _parse_perf(data.get("perf", {}), "$.perf")

    if perf.mode is fabric.BenchMode.UNALIGNED_LOTTERY:
        for i, t in enumerate(claims):
            if t.fixed_nic is None:
                raise ScenarioError("UnalignedLottery mode needs fixed_nic on every claim", f"$.claims[{i}]")
    return Scenario(name, seed, tuple(nodes.values()), claims, kind, steps, faults, perf)


def resolve_path(path_or_name: str | Path):
    """A filesystem path, or the name of a bundled scenario."""
    p = Path(path_or_name)
    if p.exists():
        return p
    name = p.name[:-5] if p.name.endswith(".json") else p.name
    if name in BUNDLED and str(path_or_name) in (name, name + ".json"):
        return resources.files("kndsim") / "scenarios" / f"{name}.json"
    raise ScenarioError(f"no such scenario file: {path_or_name}")


def load_scenario(path: str | Path) -> Scenario:
    source = resolve_path(path)
    text = source.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from None
    return scenario_from_dict(data)
