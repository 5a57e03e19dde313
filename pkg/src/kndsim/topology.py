"""Node hardware topology and ResourceSlice-style device inventories."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Union

AttributeValue = Union[str, int, bool]

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

PCI_ROOT = "pciRoot"
NUMA_NODE = "numaNode"
RDMA = "rdma"


class TopologyError(ValueError):
    pass


class DeviceKind(str, enum.Enum):
    GPU = "Gpu"
    NIC = "Nic"


class DistanceClass(enum.IntEnum):
    """Locality between two devices; lower is closer."""

    SAME_PCI_ROOT = 0
    SAME_NUMA_CROSS_ROOT = 1
    CROSS_NUMA = 2

    @property
    def label(self) -> str:
        return _DISTANCE_LABELS[self]

    @classmethod
    def from_label(cls, label: str) -> "DistanceClass":
        for member, text in _DISTANCE_LABELS.items():
            if text == label:
                return member
        raise ValueError(f"unknown distance class {label!r}")


_DISTANCE_LABELS = {
    DistanceClass.SAME_PCI_ROOT: "SamePciRoot",
    DistanceClass.SAME_NUMA_CROSS_ROOT: "SameNumaCrossRoot",
    DistanceClass.CROSS_NUMA: "CrossNuma",
}


def variant_of(value: Any) -> str:
    """Return "flag", "integer" or "text"; raise for anything else."""
    # bool first: bool is a subclass of int
    if isinstance(value, bool):
        return "flag"
    if isinstance(value, int):
        if not INT64_MIN <= value <= INT64_MAX:
            raise TopologyError(f"integer attribute out of 64-bit range: {value}")
        return "integer"
    if isinstance(value, str):
        if not value:
            raise TopologyError("text attribute must be non-empty")
        return "text"
    raise TopologyError(f"unsupported attribute value {value!r}")


_REQUIRED = {
    DeviceKind.GPU: ((PCI_ROOT, "text"), (NUMA_NODE, "integer")),
    DeviceKind.NIC: ((PCI_ROOT, "text"), (NUMA_NODE, "integer"), (RDMA, "flag")),
}


@dataclass(frozen=True)
class DeviceDescriptor:
    name: str
    kind: DeviceKind
    attributes: Mapping[str, AttributeValue] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.name:
            raise TopologyError("device name must be non-empty")
        kind = DeviceKind(self.kind)
        object.__setattr__(self, "kind", kind)
        attrs = dict(self.attributes)
        for key, value in attrs.items():
            if not isinstance(key, str) or not key:
                raise TopologyError(f"{self.name}: attribute keys must be non-empty strings")
            variant_of(value)
        for key, variant in _REQUIRED[kind]:
            if key not in attrs:
                raise TopologyError(f"{self.name}: missing required attribute {key!r}")
            if variant_of(attrs[key]) != variant:
                raise TopologyError(
                    f"{self.name}: attribute {key!r} must be {variant}, "
                    f"got {variant_of(attrs[key])}"
                )
        if attrs[NUMA_NODE] < 0:
            raise TopologyError(f"{self.name}: numaNode must be >= 0")
        object.__setattr__(self, "attributes", attrs)

    @property
    def pci_root(self) -> str:
        return self.attributes[PCI_ROOT]

    @property
    def numa_node(self) -> int:
        return self.attributes[NUMA_NODE]

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind.value, "attributes": dict(self.attributes)}


@dataclass(frozen=True)
class NodeInventory:
    node_name: str
    devices: tuple[DeviceDescriptor, ...] = ()

    def __post_init__(self) -> None:
        devices = tuple(self.devices)
        seen: set[str] = set()
        for dev in devices:
            if dev.name in seen:
                raise TopologyError(f"{self.node_name}: duplicate device name {dev.name!r}")
            seen.add(dev.name)
        object.__setattr__(self, "devices", devices)

    def device(self, name: str) -> DeviceDescriptor:
        for dev in self.devices:
            if dev.name == name:
                return dev
        raise KeyError(f"{self.node_name}: no device {name!r}")

    def to_dict(self) -> dict:
        return {"node_name": self.node_name, "devices": [d.to_dict() for d in self.devices]}


@dataclass(frozen=True)
class ResourceSlice:
    node_name: str
    driver: str
    devices: tuple[DeviceDescriptor, ...] = ()


@dataclass(frozen=True)
class NodeTopologySpec:
    """Raw node description as it appears in a scenario file.

    ``devices`` holds mappings with ``name``, ``kind`` and ``attributes``;
    nothing is validated until :func:`build_node`.
    """

    node_name: str
    devices: tuple[Mapping[str, Any], ...] = ()


class Preset(str, enum.Enum):
    A4_HIGHGPU_8G = "A4HighGpu8g"


def _a4_highgpu_8g(node_name: str) -> NodeInventory:
    # 8 GPU/NIC pairs; pair k shares pci-rootk. NUMA split 0-3 / 4-7 is synthetic.
    gpus = []
    nics = []
    for k in range(8):
        numa = 0 if k < 4 else 1
        root = f"pci-root{k}"
        gpus.append(DeviceDescriptor(f"gpu{k}", DeviceKind.GPU, {PCI_ROOT: root, NUMA_NODE: numa}))
        nics.append(
            DeviceDescriptor(
                f"rdma{k}", DeviceKind.NIC, {PCI_ROOT: root, NUMA_NODE: numa, RDMA: True}
            )
        )
    return NodeInventory(node_name, tuple(gpus + nics))


_PRESETS = {Preset.A4_HIGHGPU_8G: _a4_highgpu_8g}


def build_preset_node(preset: Preset | str, node_name: str) -> NodeInventory:
    try:
        preset = Preset(preset)
    except ValueError:
        raise TopologyError(f"unknown preset {preset!r}") from None
    return _PRESETS[preset](node_name)


def build_node(spec: NodeTopologySpec) -> NodeInventory:
    devices = []
    for raw in spec.devices:
        try:
            name = raw["name"]
            kind = raw["kind"]
        except KeyError as exc:
            raise TopologyError(f"{spec.node_name}: device entry missing {exc.args[0]!r}") from None
        try:
            kind = DeviceKind(kind)
        except ValueError:
            raise TopologyError(f"{spec.node_name}/{name}: unknown device kind {kind!r}") from None
        devices.append(DeviceDescriptor(name, kind, dict(raw.get("attributes", {}))))
    return NodeInventory(spec.node_name, tuple(devices))


def publish_slices(inv: NodeInventory, driver: str) -> list[ResourceSlice]:
    """One slice per (node, driver) holding every device in inventory order."""
    return [ResourceSlice(inv.node_name, driver, inv.devices)]


def topology_distance(a: DeviceDescriptor, b: DeviceDescriptor) -> DistanceClass:
    try:
        if a.attributes[PCI_ROOT] == b.attributes[PCI_ROOT]:
            return DistanceClass.SAME_PCI_ROOT
        if a.attributes[NUMA_NODE] == b.attributes[NUMA_NODE]:
            return DistanceClass.SAME_NUMA_CROSS_ROOT
    except KeyError as exc:
        raise TopologyError(f"missing topology attribute {exc.args[0]!r}") from None
    return DistanceClass.CROSS_NUMA


def iter_pairs(inv: NodeInventory) -> Iterable[tuple[DeviceDescriptor, DeviceDescriptor]]:
    """All (GPU, NIC) pairs of a node."""
    gpus = [d for d in inv.devices if d.kind is DeviceKind.GPU]
    nics = [d for d in inv.devices if d.kind is DeviceKind.NIC]
    for gpu in gpus:
        for nic in nics:
            yield gpu, nic
