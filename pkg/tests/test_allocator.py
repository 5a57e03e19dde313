import random

import numpy as np
import pytest

from kndsim import allocator, selector
from kndsim.allocator import (
    Allocation,
    AllocationError,
    ClaimError,
    ClusterState,
    DeviceRequest,
    MatchAttributeConstraint,
    Pending,
    PodClaimSet,
    allocate,
    allocate_unaligned,
    feasibility_oracle,
    release,
    verify_allocation,
)
from kndsim.topology import DeviceDescriptor, DeviceKind, DistanceClass, NodeInventory, build_preset_node, topology_distance
from instances import random_instance

GPU_SEL = selector.parse('device.kind == "Gpu"')
NIC_SEL = selector.parse('device.kind == "Nic" && device.attributes["rdma"] == true')
RDMA_SEL = selector.parse('device.attributes["rdma"] == true')


def aligned_claims(name="pod", nic_sel=NIC_SEL):
    return PodClaimSet(
        name,
        (DeviceRequest("gpu", GPU_SEL), DeviceRequest("nic", nic_sel)),
        (MatchAttributeConstraint("pciRoot", frozenset({"gpu", "nic"})),),
    )


@pytest.fixture
def preset_state():
    return ClusterState((build_preset_node("A4HighGpu8g", "node-a"),))


def test_aligned_first_fit(preset_state):
    alloc = allocate(preset_state, aligned_claims(nic_sel=RDMA_SEL))
    assert alloc == Allocation("pod", "node-a", {"gpu": ("gpu0",), "nic": ("rdma0",)})
    node = preset_state.nodes[0]
    assert topology_distance(node.device("gpu0"), node.device("rdma0")) is DistanceClass.SAME_PCI_ROOT


def test_no_rdma_nics_pending():
    devs = [DeviceDescriptor("gpu0", DeviceKind.GPU, {"pciRoot": "r0", "numaNode": 0}),
            DeviceDescriptor("eth0", DeviceKind.NIC, {"pciRoot": "r0", "numaNode": 0, "rdma": False})]
    result = allocate(ClusterState((NodeInventory("plain", tuple(devs)),)), aligned_claims())
    assert isinstance(result, Pending) and result.reason == "NoNodeFits"


def test_selector_fault_reason():
    claims = PodClaimSet("pod", (DeviceRequest("x", selector.parse('device.attributes["pciRoot"] > 1')),))
    result = allocate(ClusterState((build_preset_node("A4HighGpu8g", "n"),)), claims)
    assert isinstance(result, Pending) and result.reason == "SelectorFault"
    assert "TypeMismatch" in result.detail
    assert str(result).startswith("SelectorFault(")


def test_exclusivity_second_pod_pending(preset_state):
    only_gpu0 = selector.parse('device.kind == "Gpu" && device.attributes["pciRoot"] == "pci-root0"')
    claims = PodClaimSet("p1", (DeviceRequest("g", only_gpu0),))
    first = allocate(preset_state, claims)
    assert first.assignments == {"g": ("gpu0",)}
    state = preset_state.with_allocation(first)
    second = allocate(state, PodClaimSet("p2", (DeviceRequest("g", only_gpu0),)))
    assert isinstance(second, Pending)


def test_sequential_aligned_pods_take_next_pair(preset_state):
    state = preset_state
    for k in range(8):
        alloc = allocate(state, aligned_claims(f"p{k}"))
        assert alloc.assignments == {"gpu": (f"gpu{k}",), "nic": (f"rdma{k}",)}
        state = state.with_allocation(alloc)
    assert isinstance(allocate(state, aligned_claims("p8")), Pending)


def test_nodes_tried_in_name_order():
    state = ClusterState((build_preset_node("A4HighGpu8g", "node-b"), build_preset_node("A4HighGpu8g", "node-a")))
    assert allocate(state, aligned_claims()).node_name == "node-a"


def test_count_two_request(preset_state):
    claims = PodClaimSet("pod", (DeviceRequest("gpus", GPU_SEL, 2),))
    assert allocate(preset_state, claims).assignments == {"gpus": ("gpu0", "gpu1")}


def test_allocate_does_not_mutate(preset_state):
    before = preset_state.in_use
    allocate(preset_state, aligned_claims())
    assert preset_state.in_use == before


def test_dangling_constraint_rejected():
    with pytest.raises(ClaimError, match="unknown request"):
        PodClaimSet("p", (DeviceRequest("gpu", GPU_SEL),), (MatchAttributeConstraint("pciRoot", {"gpu", "nic"}),))


def test_constraint_over_count_two_rejected():
    with pytest.raises(ClaimError, match="count > 1"):
        PodClaimSet("p", (DeviceRequest("gpu", GPU_SEL, 2), DeviceRequest("nic", NIC_SEL)),
                    (MatchAttributeConstraint("pciRoot", {"gpu", "nic"}),))


@pytest.mark.parametrize("bad", [
    lambda: DeviceRequest("g", GPU_SEL, 0),
    lambda: MatchAttributeConstraint("pciRoot", {"gpu"}),
    lambda: PodClaimSet("", (DeviceRequest("g", GPU_SEL),)),
    lambda: PodClaimSet("p", (DeviceRequest("g", GPU_SEL), DeviceRequest("g", NIC_SEL))),
    lambda: PodClaimSet("p", (DeviceRequest("g", GPU_SEL),), config_payload={"x": "{}"}),
])
def test_malformed_claims(bad):
    with pytest.raises(ClaimError):
        bad()


def test_config_payload_is_carried(preset_state):
    claims = PodClaimSet("p", (DeviceRequest("nic", NIC_SEL),), config_payload={"nic": "opaque{not json"})
    assert claims.config_payload["nic"] == "opaque{not json"
    assert isinstance(allocate(preset_state, claims), Allocation)


def test_unknown_in_use_rejected():
    with pytest.raises(ClaimError):
        ClusterState((build_preset_node("A4HighGpu8g", "a"),), {("a", "gpu99")})


# --- unaligned ---------------------------------------------------------------

def unaligned_claims():
    return PodClaimSet("pod", (DeviceRequest("gpu", GPU_SEL), DeviceRequest("nic", NIC_SEL)))


def test_unaligned_lottery_rate(preset_state):
    rng = np.random.default_rng(7)
    node = preset_state.nodes[0]
    hits = 0
    for _ in range(10_000):
        alloc = allocate_unaligned(preset_state, unaligned_claims(), "rdma0", rng)
        assert alloc.assignments["nic"] == ("rdma0",)
        hits += alloc.assignments["gpu"] == ("gpu0",)
        assert topology_distance(node.device(alloc.assignments["gpu"][0]), node.device("rdma0")) is not None
    assert 0.115 <= hits / 10_000 <= 0.135


def test_unaligned_is_uniform_over_gpus(preset_state):
    rng = np.random.default_rng(11)
    counts = {f"gpu{k}": 0 for k in range(8)}
    for _ in range(8000):
        counts[allocate_unaligned(preset_state, unaligned_claims(), "rdma3", rng).assignments["gpu"][0]] += 1
    # 4-sigma band of Binomial(8000, 1/8)
    assert all(abs(c - 1000) < 4 * (8000 * 7 / 64) ** 0.5 for c in counts.values())


def test_unaligned_only_free_gpu(preset_state):
    busy = {("node-a", f"gpu{k}") for k in range(8) if k != 5}
    state = ClusterState(preset_state.nodes, busy)
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert allocate_unaligned(state, unaligned_claims(), "rdma0", rng).assignments["gpu"] == ("gpu5",)


def test_unaligned_deterministic(preset_state):
    def trace(seed):
        rng = np.random.default_rng(seed)
        return [allocate_unaligned(preset_state, unaligned_claims(), "rdma2", rng).assignments["gpu"] for _ in range(100)]

    assert trace(42) == trace(42)
    assert trace(42) != trace(43)


def test_unaligned_ignores_constraints(preset_state):
    rng = np.random.default_rng(3)
    claims = PodClaimSet("pod", (DeviceRequest("gpu", GPU_SEL), DeviceRequest("nic", NIC_SEL)),
                         (MatchAttributeConstraint("pciRoot", {"gpu", "nic"}),))
    gpus = {allocate_unaligned(preset_state, claims, "rdma0", rng).assignments["gpu"][0] for _ in range(200)}
    assert len(gpus) == 8


def test_unaligned_errors(preset_state):
    rng = np.random.default_rng(0)
    with pytest.raises(AllocationError):
        allocate_unaligned(preset_state, unaligned_claims(), "rdma9", rng)
    busy = ClusterState(preset_state.nodes, {("node-a", "rdma0")})
    with pytest.raises(AllocationError):
        allocate_unaligned(busy, unaligned_claims(), "rdma0", rng)
    no_gpu = ClusterState(preset_state.nodes, {("node-a", f"gpu{k}") for k in range(8)})
    with pytest.raises(AllocationError, match="no free GPU"):
        allocate_unaligned(no_gpu, unaligned_claims(), "rdma0", rng)
    with pytest.raises(ClaimError):
        allocate_unaligned(preset_state, PodClaimSet("p", (DeviceRequest("gpu", GPU_SEL),)), "rdma0", rng)


# --- release -----------------------------------------------------------------

def test_release_restores_state(preset_state):
    alloc = allocate(preset_state, aligned_claims())
    held = preset_state.with_allocation(alloc)
    assert release(held, alloc).in_use == preset_state.in_use


def test_double_release_errors(preset_state):
    alloc = allocate(preset_state, aligned_claims())
    freed = release(preset_state.with_allocation(alloc), alloc)
    with pytest.raises(AllocationError):
        release(freed, alloc)


def test_release_empty_allocation(preset_state):
    assert release(preset_state, Allocation("p", "node-a", {})) == preset_state


def test_with_allocation_rejects_clash(preset_state):
    alloc = allocate(preset_state, aligned_claims())
    with pytest.raises(AllocationError):
        preset_state.with_allocation(alloc).with_allocation(alloc)


# --- oracle ------------------------------------------------------------------

def test_oracle_examples(preset_state):
    assert feasibility_oracle(preset_state, aligned_claims())
    gpus_only = NodeInventory("g", tuple(d for d in preset_state.nodes[0].devices if d.kind is DeviceKind.GPU))
    assert not feasibility_oracle(ClusterState((gpus_only,)), aligned_claims())


def test_oracle_bounds(preset_state):
    big = build_preset_node("A4HighGpu8g", "a")
    big = NodeInventory("a", big.devices + tuple(
        DeviceDescriptor(f"x{k}", DeviceKind.GPU, {"pciRoot": "r", "numaNode": 0}) for k in range(1)))
    with pytest.raises(ValueError, match="bounds"):
        feasibility_oracle(ClusterState((big,)), aligned_claims())
    five = ClusterState(tuple(build_preset_node("A4HighGpu8g", f"n{k}") for k in range(5)))
    with pytest.raises(ValueError, match="bounds"):
        feasibility_oracle(five, aligned_claims())


def test_oracle_equivalence_randomized():
    rnd = random.Random(2025)
    feasible = 0
    for _ in range(1000):
        state, claims = random_instance(rnd)
        result = allocate(state, claims)
        expected = feasibility_oracle(state, claims)
        assert isinstance(result, Allocation) == expected, (state, claims, result)
        if expected:
            feasible += 1
            assert verify_allocation(state, claims, result) == []
    # the generator must exercise both outcomes
    assert 200 < feasible < 800


def test_exclusivity_over_allocate_release_sequences():
    rnd = random.Random(99)
    for _ in range(100):
        state, _ = random_instance(rnd)
        state = ClusterState(state.nodes)
        live: list[Allocation] = []
        for step in range(20):
            if live and rnd.random() < 0.3:
                victim = live.pop(rnd.randrange(len(live)))
                state = release(state, victim)
            else:
                _, claims = random_instance(rnd)
                result = allocate(state, claims)
                if isinstance(result, Allocation):
                    assert verify_allocation(state, claims, result) == []
                    state = state.with_allocation(result)
                    live.append(result)
            held = [(a.node_name, d) for a in live for d in a.devices()]
            assert len(held) == len(set(held))
            assert set(held) == state.in_use


def test_determinism_same_input():
    rnd = random.Random(5)
    for _ in range(50):
        state, claims = random_instance(rnd)
        assert allocate(state, claims) == allocate(state, claims)
