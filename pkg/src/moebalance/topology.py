"""Rail-optimized cluster model and GPU-pair traffic classification.

GPUs are numbered node-major: GPU id = node * gpus_per_node + local_rank.
The rail of a GPU is its local rank; NICs on the same rail across nodes
share a leaf switch, so inter-node traffic between same-rank GPUs goes
straight over RDMA while cross-rail traffic needs an NVLink hop to the
rail-matched GPU on the source node first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property

import numpy as np


class TrafficClass(IntEnum):
    """Relation between a source GPU and the GPU serving its tokens."""

    LOC = 0  # same GPU, local memory copy
    NV = 1   # same node, NVLink
    SR = 2   # different node, same rail, direct RDMA
    CR = 3   # different node, different rail, NVLink relay + RDMA


@dataclass(frozen=True)
class HardwareProfile:
    """Effective per-GPU compute rate and link bandwidths.

    Bandwidths are flat effective rates in bytes/second. Setting
    bytes_per_token = 1 lets bandwidths be expressed directly in
    tokens/second.
    """

    flops_per_gpu: float
    bw_nvlink: float
    bw_rdma: float
    bytes_per_token: float = 1.0

    def __post_init__(self) -> None:
        for name in ("flops_per_gpu", "bw_nvlink", "bw_rdma", "bytes_per_token"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"HardwareProfile.{name} must be positive and finite, got {value!r}")


@dataclass(frozen=True)
class ClusterTopology:
    """A cluster of num_nodes nodes with gpus_per_node GPUs each."""

    num_nodes: int
    gpus_per_node: int
    profile: HardwareProfile

    def __post_init__(self) -> None:
        if self.num_nodes < 1 or self.gpus_per_node < 1:
            raise ValueError(
                f"topology needs at least one node and one GPU per node, "
                f"got {self.num_nodes} x {self.gpus_per_node}"
            )

    @property
    def num_gpus(self) -> int:
        return self.num_nodes * self.gpus_per_node

    def node_of(self, gpu: int) -> int:
        self._check_gpu(gpu)
        return gpu // self.gpus_per_node

    def rail_of(self, gpu: int) -> int:
        self._check_gpu(gpu)
        return gpu % self.gpus_per_node

    def gpu_id(self, node: int, local_rank: int) -> int:
        if not (0 <= node < self.num_nodes and 0 <= local_rank < self.gpus_per_node):
            raise ValueError(f"invalid (node, local_rank) = ({node}, {local_rank})")
        return node * self.gpus_per_node + local_rank

    def node_gpus(self, node: int) -> range:
        """All GPU ids on the given node."""
        base = self.gpu_id(node, 0)
        return range(base, base + self.gpus_per_node)

    def _check_gpu(self, gpu: int) -> None:
        if not (0 <= gpu < self.num_gpus):
            raise ValueError(f"GPU id {gpu} out of range [0, {self.num_gpus})")

    @cached_property
    def class_matrix(self) -> np.ndarray:
        """(G, G) uint8 matrix of TrafficClass values for every (src, dst) pair."""
        g = self.num_gpus
        ids = np.arange(g)
        nodes = ids // self.gpus_per_node
        rails = ids % self.gpus_per_node
        same_node = nodes[:, None] == nodes[None, :]
        same_rail = rails[:, None] == rails[None, :]
        same_gpu = ids[:, None] == ids[None, :]
        out = np.full((g, g), TrafficClass.CR, dtype=np.uint8)
        out[~same_node & same_rail] = TrafficClass.SR
        out[same_node] = TrafficClass.NV
        out[same_gpu] = TrafficClass.LOC
        return out

    @cached_property
    def relay_matrix(self) -> np.ndarray:
        """(G, G) int32 matrix: relay_matrix[j, g] is the GPU on node(j) with
        local rank rail(g). Only meaningful for cross-rail pairs; defined for
        all pairs for convenience."""
        ids = np.arange(self.num_gpus)
        nodes = ids // self.gpus_per_node
        rails = ids % self.gpus_per_node
        return (nodes[:, None] * self.gpus_per_node + rails[None, :]).astype(np.int32)


def build_topology(num_nodes: int, gpus_per_node: int, profile: HardwareProfile) -> ClusterTopology:
    """Build a rail-optimized topology with node-major GPU numbering."""
    return ClusterTopology(num_nodes=num_nodes, gpus_per_node=gpus_per_node, profile=profile)


def classify_traffic(topo: ClusterTopology, src_gpu: int, dst_gpu: int) -> TrafficClass:
    """Classify the link path used by tokens moving from src_gpu to dst_gpu."""
    topo._check_gpu(src_gpu)
    topo._check_gpu(dst_gpu)
    return TrafficClass(topo.class_matrix[src_gpu, dst_gpu])


def relay_gpu(topo: ClusterTopology, src_gpu: int, dst_gpu: int) -> int:
    """The NVLink relay for a cross-rail transfer: the GPU on the source node
    whose local rank matches the destination rail."""
    topo._check_gpu(src_gpu)
    topo._check_gpu(dst_gpu)
    return int(topo.relay_matrix[src_gpu, dst_gpu])
