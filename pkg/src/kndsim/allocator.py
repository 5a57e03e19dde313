"""Resolve pod device claims against cluster inventory.

``allocate`` is deterministic first-fit: nodes in name order, then a
backtracking search over free devices in name order. ``allocate_unaligned``
emulates the legacy device plugin: the NIC is pinned by claim, the GPU is
drawn uniformly at random with no knowledge of the NIC.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from kndsim import selector
from kndsim.topology import DeviceDescriptor, DeviceKind, NodeInventory

NO_NODE_FITS = "NoNodeFits"
SELECTOR_FAULT = "SelectorFault"

ORACLE_MAX_NODES = 4
ORACLE_MAX_DEVICES = 16  # one A4HighGpu8g preset node
ORACLE_MAX_REQUESTS = 4


class ClaimError(ValueError):
    """Malformed claims."""


class AllocationError(RuntimeError):
    """A request that cannot be honoured (busy device, double release, ...)."""


@dataclass(frozen=True)
class DeviceRequest:
    request_name: str
    selector: selector.SelectorAst
    count: int = 1

    def __post_init__(self):
        if not self.request_name:
            raise ClaimError("request_name must be non-empty")
        if self.count < 1:
            raise ClaimError(f"{self.request_name}: count must be >= 1")


@dataclass(frozen=True)
class MatchAttributeConstraint:
    attribute_key: str
    request_names: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "request_names", frozenset(self.request_names))
        if len(self.request_names) < 2:
            raise ClaimError("matchAttribute needs at least two requests")


@dataclass(frozen=True)
class PodClaimSet:
    pod_name: str
    requests: tuple[DeviceRequest, ...]
    constraints: tuple[MatchAttributeConstraint, ...] = ()
    # opaque per-request driver configuration; carried, never read
    config_payload: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "requests", tuple(self.requests))
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if not self.pod_name:
            raise ClaimError("pod_name must be non-empty")
        names = [r.request_name for r in self.requests]
        if len(set(names)) != len(names):
            raise ClaimError(f"{self.pod_name}: duplicate request names")
        by_name = {r.request_name: r for r in self.requests}
        for c in self.constraints:
            for name in sorted(c.request_names):
                if name not in by_name:
                    raise ClaimError(
                        f"{self.pod_name}: constraint on {c.attribute_key!r} "
                        f"references unknown request {name!r}"
                    )
                if by_name[name].count != 1:
                    raise ClaimError(
                        f"{self.pod_name}: constraints over requests with count > 1 "
                        f"are not supported ({name!r})"
                    )
        for name in self.config_payload:
            if name not in by_name:
                raise ClaimError(f"{self.pod_name}: config for unknown request {name!r}")

    def request(self, name: str) -> DeviceRequest:
        for r in self.requests:
            if r.request_name == name:
                return r
        raise KeyError(name)


@dataclass(frozen=True)
class Allocation:
    pod_name: str
    node_name: str
    assignments: Mapping[str, tuple[str, ...]]

    def devices(self) -> list[str]:
        return [d for names in self.assignments.values() for d in names]


@dataclass(frozen=True)
class Pending:
    reason: str
    detail: str = ""
    diagnostics: tuple[str, ...] = ()

    def __str__(self) -> str:
        return f"{self.reason}({self.detail})" if self.detail else self.reason


@dataclass(frozen=True)
class ClusterState:
    nodes: tuple[NodeInventory, ...]
    in_use: frozenset[tuple[str, str]] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "in_use", frozenset(self.in_use))
        names = [n.node_name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ClaimError("duplicate node names in cluster")
        known = {(n.node_name, d.name) for n in self.nodes for d in n.devices}
        stray = self.in_use - known
        if stray:
            raise ClaimError(f"in_use refers to unknown devices: {sorted(stray)}")

    def node(self, name: str) -> NodeInventory:
        for n in self.nodes:
            if n.node_name == name:
                return n
        raise KeyError(f"no node {name!r}")

    def free_devices(self, node: NodeInventory) -> list[DeviceDescriptor]:
        return sorted(
            (d for d in node.devices if (node.node_name, d.name) not in self.in_use),
            key=lambda d: d.name,
        )

    def with_allocation(self, alloc: Allocation) -> "ClusterState":
        taken = {(alloc.node_name, d) for d in alloc.devices()}
        clash = taken & self.in_use
        if clash:
            raise AllocationError(f"devices already in use: {sorted(clash)}")
        return ClusterState(self.nodes, self.in_use | taken)


def _matches(req: DeviceRequest, dev: DeviceDescriptor, faults: list[str]) -> bool:
    outcome = selector.evaluate(req.selector, dev)
    if not outcome.ok:
        faults.append(f"{req.request_name}/{dev.name}: {outcome}")
        return False
    return bool(outcome.value)


def _constraints_hold(
    claims: PodClaimSet, chosen: Mapping[str, Sequence[DeviceDescriptor]]
) -> bool:
    for c in claims.constraints:
        present = [n for n in c.request_names if n in chosen]
        values = set()
        for name in present:
            dev = chosen[name][0]
            if c.attribute_key not in dev.attributes:
                return False
            value = dev.attributes[c.attribute_key]
            values.add((type(value), value))
        if len(values) > 1:
            return False
    return True


def _search_node(state: ClusterState, node: NodeInventory, claims: PodClaimSet, faults: list[str]):
    free = state.free_devices(node)
    candidates = [[d for d in free if _matches(req, d, faults)] for req in claims.requests]
    chosen: dict[str, tuple[DeviceDescriptor, ...]] = {}
    used: set[str] = set()

    def backtrack(i: int) -> bool:
        if i == len(claims.requests):
            return True
        req = claims.requests[i]
        pool = [d for d in candidates[i] if d.name not in used]
        for combo in itertools.combinations(pool, req.count):
            chosen[req.request_name] = combo
            if _constraints_hold(claims, chosen):
                used.update(d.name for d in combo)
                if backtrack(i + 1):
                    return True
                used.difference_update(d.name for d in combo)
            del chosen[req.request_name]
        return False

    if not backtrack(0):
        return None
    return Allocation(
        claims.pod_name,
        node.node_name,
        {name: tuple(d.name for d in devs) for name, devs in chosen.items()},
    )


def allocate(state: ClusterState, claims: PodClaimSet) -> Allocation | Pending:
    """First complete assignment in (node name, device name) order, or Pending.

    Selector faults count as non-matches. The Pending reason is
    ``SelectorFault`` only when some request had no device evaluate cleanly
    on any node; otherwise it is ``NoNodeFits``. Never mutates ``state``.
    """
    faults: list[str] = []
    for node in sorted(state.nodes, key=lambda n: n.node_name):
        alloc = _search_node(state, node, claims, faults)
        if alloc is not None:
            return alloc
    for req in claims.requests:
        clean = any(
            selector.evaluate(req.selector, d).ok for n in state.nodes for d in n.devices
        )
        req_faults = [f for f in faults if f.startswith(req.request_name + "/")]
        if not clean and req_faults:
            return Pending(SELECTOR_FAULT, req_faults[0], tuple(faults))
    return Pending(NO_NODE_FITS, "", tuple(faults))


def allocate_unaligned(
    state: ClusterState,
    claims: PodClaimSet,
    fixed_nic: str,
    rng: np.random.Generator,
    node_name: Optional[str] = None,
) -> Allocation:
    """Bind the NIC request to ``fixed_nic`` and pick a GPU uniformly at random.

    The GPU request's selector and all constraints are ignored for the GPU,
    as a device plugin has no view of the network claim. ``node_name``
    defaults to the first node (by name) where ``fixed_nic`` is free.
    """
    if len(claims.requests) != 2 or any(r.count != 1 for r in claims.requests):
        raise ClaimError("unaligned allocation needs exactly one GPU and one NIC request, count 1")

    nodes = sorted(state.nodes, key=lambda n: n.node_name)
    if node_name is not None:
        nodes = [state.node(node_name)]
    node = None
    for cand in nodes:
        names = {d.name for d in cand.devices}
        if fixed_nic in names and (cand.node_name, fixed_nic) not in state.in_use:
            node = cand
            break
    if node is None:
        raise AllocationError(f"NIC {fixed_nic!r} missing or busy")

    nic = node.device(fixed_nic)
    nic_req = gpu_req = None
    for req in claims.requests:
        outcome = selector.evaluate(req.selector, nic)
        if outcome.ok and outcome.value and nic_req is None:
            nic_req = req
        else:
            gpu_req = req
    if nic_req is None or gpu_req is None:
        raise ClaimError(f"no request in {claims.pod_name!r} selects NIC {fixed_nic!r}")

    gpus = [d for d in state.free_devices(node) if d.kind is DeviceKind.GPU]
    if not gpus:
        raise AllocationError(f"no free GPU on {node.node_name}")
    gpu = gpus[int(rng.integers(len(gpus)))]
    return Allocation(
        claims.pod_name,
        node.node_name,
        {gpu_req.request_name: (gpu.name,), nic_req.request_name: (nic.name,)},
    )


def release(state: ClusterState, alloc: Allocation) -> ClusterState:
    held = {(alloc.node_name, d) for d in alloc.devices()}
    missing = held - state.in_use
    if missing:
        raise AllocationError(f"releasing devices not in use: {sorted(missing)}")
    return ClusterState(state.nodes, state.in_use - held)


def verify_allocation(state: ClusterState, claims: PodClaimSet, alloc: Allocation) -> list[str]:
    """Independent re-check of an allocation; returns a list of violations."""
    problems = []
    try:
        node = state.node(alloc.node_name)
    except KeyError:
        return [f"unknown node {alloc.node_name!r}"]
    by_name = {d.name: d for d in node.devices}
    seen: set[str] = set()
    if set(alloc.assignments) != {r.request_name for r in claims.requests}:
        problems.append("assignment keys differ from request names")
    first = {}
    for req in claims.requests:
        names = alloc.assignments.get(req.request_name, ())
        if len(names) != req.count:
            problems.append(f"{req.request_name}: expected {req.count} devices, got {len(names)}")
        for name in names:
            if name in seen:
                problems.append(f"{name} assigned twice")
            seen.add(name)
            if (alloc.node_name, name) in state.in_use:
                problems.append(f"{name} already in use")
            dev = by_name.get(name)
            if dev is None:
                problems.append(f"{name} not on {alloc.node_name}")
                continue
            out = selector.evaluate(req.selector, dev)
            if not (out.ok and out.value):
                problems.append(f"{name} fails selector of {req.request_name}: {out}")
            first.setdefault(req.request_name, dev)
    for c in claims.constraints:
        vals = []
        for name in c.request_names:
            dev = first.get(name)
            if dev is None or c.attribute_key not in dev.attributes:
                problems.append(f"matchAttribute {c.attribute_key!r}: {name} lacks attribute")
                continue
            v = dev.attributes[c.attribute_key]
            vals.append((type(v), v))
        if len(set(vals)) > 1:
            problems.append(f"matchAttribute {c.attribute_key!r} violated")
    return problems


def feasibility_oracle(state: ClusterState, claims: PodClaimSet) -> bool:
    """Exhaustively enumerate every assignment; True iff one is valid.

    Shares no search code with :func:`allocate`; only usable on small
    instances.
    """
    if len(state.nodes) > ORACLE_MAX_NODES or len(claims.requests) > ORACLE_MAX_REQUESTS:
        raise ValueError("instance exceeds exhaustive bounds")
    if any(len(n.devices) > ORACLE_MAX_DEVICES for n in state.nodes):
        raise ValueError("instance exceeds exhaustive bounds")
    for node in state.nodes:
        free = [d for d in node.devices if (node.node_name, d.name) not in state.in_use]
        per_request = [list(itertools.permutations(free, r.count)) for r in claims.requests]
        for picks in itertools.product(*per_request):
            names = [d.name for group in picks for d in group]
            if len(set(names)) != len(names):
                continue
            ok = True
            for req, group in zip(claims.requests, picks):
                for dev in group:
                    out = selector.evaluate(req.selector, dev)
                    if out.fault is not None or out.value is not True:
                        ok = False
            if not ok:
                continue
            pick_of = dict(zip((r.request_name for r in claims.requests), picks))
            for c in claims.constraints:
                attrs = [pick_of[n][0].attributes for n in c.request_names]
                if any(c.attribute_key not in a for a in attrs):
                    ok = False
                    break
                if len({repr(a[c.attribute_key]) for a in attrs}) != 1:
                    ok = False
                    break
            if ok:
                return True
    return False
