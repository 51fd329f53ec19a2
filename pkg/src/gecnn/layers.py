"""Edge, node and shared node/edge graph convolutions over skeleton sequences.

Inputs are laid out (N, C, T, S) with S the spatial axis (edges or joints).
A graph convolution runs a 1 x K_t temporal correlation first and then, for
each of the three spatial labels, contracts the spatial axis with that label's
normalized adjacency and mixes channels with a label-specific map:

    y = sum_l S_l . (conv_t(x; W_t) x_S A_l^T)

so the weight seen by a neighbor at temporal offset k under label l is the
product S_l @ W_t[:, :, k].
"""
from __future__ import annotations

import numpy as np

from . import tensor as tn
from .skeleton import NUM_LABELS, LabelPartition, SkeletonTopology, incidence_operators
from .tensor import Parameter, Tensor


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(x: Tensor, where: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"non-finite values in {where}")


def _pointwise(shape_out: int, shape_in: int, rng, name: str, dtype) -> Parameter:
    return Parameter(tn.glorot_uniform(rng, (shape_out, shape_in, 1), shape_in, shape_out, dtype), name=name)


class GraphConv:
    """Spatio-temporal convolution over one partitioned graph (edges or joints)."""

    def __init__(self, partition: LabelPartition, c_in: int, c_out: int, kernel_size: int = 9,
                 stride: int = 1, rng: np.random.Generator | None = None, name: str = "conv",
                 dtype=np.float64):
        if kernel_size % 2 == 0 or kernel_size < 1:
            raise ValueError(f"temporal kernel size must be odd, got {kernel_size}")
        if partition.adjacency is None:
            raise ValueError("partition has no adjacency operators")
        if partition.adjacency.shape[0] != NUM_LABELS:
            raise ValueError(f"expected {NUM_LABELS} label slots, got {partition.adjacency.shape[0]}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.partition = partition
        self.c_in, self.c_out = c_in, c_out
        self.kernel_size, self.stride = kernel_size, stride
        self.name = name
        self.temporal = Parameter(
            tn.glorot_uniform(rng, (c_out, c_in, kernel_size), c_in * kernel_size, c_out * kernel_size, dtype),
            name=f"{name}.temporal")
        self.spatial = [_pointwise(c_out, c_out, rng, f"{name}.spatial{l}", dtype) for l in range(NUM_LABELS)]
        # columns l*S:(l+1)*S hold A_l^T, so one product shifts by every label at once
        self._shift = Tensor(np.concatenate([partition.adjacency[l].T for l in range(NUM_LABELS)], axis=1))

    @property
    def num_units(self) -> int:
        return self.partition.adjacency.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.temporal, *self.spatial]

    def effective_weights(self) -> np.ndarray:
        """(K, K_t, C_out, C_in): weight applied per spatial label and temporal tap."""
        S = np.stack([s.data[:, :, 0] for s in self.spatial])
        return np.einsum("lom,mck->lkoc", S, self.temporal.data)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ValueError(f"{self.name}: expected input (N, {self.c_in}, T, S), got {x.shape}")
        if x.shape[3] != self.num_units:
            raise ValueError(f"{self.name}: input has {x.shape[3]} spatial units, partition has {self.num_units}")
        _check_finite(x, f"{self.name} input")
        z = tn.conv_temporal(x, self.temporal, stride=self.stride)
        N, C, T, S = z.shape
        shifted = tn.reshape(tn.matmul(z, self._shift), (N, C, T, NUM_LABELS, S))
        stacked = tn.reshape(tn.transpose(shifted, (0, 3, 1, 2, 4)), (N, NUM_LABELS * C, T, S))
        return tn.conv_temporal(stacked, tn.concat(self.spatial, axis=1))


# the two layer kinds differ only in which partition they are bound to
EdgeConvLayer = GraphConv
NodeConvLayer = GraphConv


def edge_conv_forward(x: Tensor, layer: GraphConv) -> Tensor:
    return layer(x)


def node_conv_forward(x: Tensor, layer: GraphConv) -> Tensor:
    return layer(x)


class SharedConv:
    """Joint node/edge layer: each bone sees itself and its two joints, each joint
    sees itself and its incident bones (neighbor terms averaged)."""

    def __init__(self, topo: SkeletonTopology, c_in: int, c_out: int,
                 rng: np.random.Generator | None = None, name: str = "shared", dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.topo = topo
        self.c_in, self.c_out = c_in, c_out
        self.name = name
        edge_from_nodes, node_from_edges = incidence_operators(topo)
        self.edge_from_nodes = edge_from_nodes
        self.node_from_edges = node_from_edges
        self._gather_nodes = Tensor(np.ascontiguousarray(edge_from_nodes.T))
        self._gather_edges = Tensor(np.ascontiguousarray(node_from_edges.T))
        self.w_ee = _pointwise(c_out, c_in, rng, f"{name}.edge_edge", dtype)
        self.w_ne = _pointwise(c_out, c_in, rng, f"{name}.node_edge", dtype)
        self.w_nn = _pointwise(c_out, c_in, rng, f"{name}.node_node", dtype)
        self.w_en = _pointwise(c_out, c_in, rng, f"{name}.edge_node", dtype)

    def parameters(self) -> list[Parameter]:
        return [self.w_ee, self.w_ne, self.w_nn, self.w_en]

    def __call__(self, x_e: Tensor, x_n: Tensor) -> tuple[Tensor, Tensor]:
        E, N = self.topo.num_edges, self.topo.num_joints
        if x_e.ndim != 4 or x_n.ndim != 4:
            raise ValueError(f"{self.name}: expected 4-d edge and node inputs")
        if x_e.shape[1] != self.c_in or x_n.shape[1] != self.c_in:
            raise ValueError(f"{self.name}: channel mismatch, edges {x_e.shape[1]}, nodes {x_n.shape[1]}, "
                             f"layer expects {self.c_in}")
        if x_e.shape[3] != E or x_n.shape[3] != N:
            raise ValueError(f"{self.name}: inputs carry {x_e.shape[3]} edges / {x_n.shape[3]} nodes, "
                             f"topology {self.topo.name} has {E} / {N}")
        if x_e.shape[:3] != x_n.shape[:3]:
            raise ValueError(f"{self.name}: edge and node inputs disagree on batch/time: {x_e.shape} vs {x_n.shape}")
        _check_finite(x_e, f"{self.name} edge input")
        _check_finite(x_n, f"{self.name} node input")
        nodes_at_edges = tn.matmul(x_n, self._gather_nodes)
        edges_at_nodes = tn.matmul(x_e, self._gather_edges)
        y_e = tn.add(tn.conv_temporal(x_e, self.w_ee), tn.conv_temporal(nodes_at_edges, self.w_ne))
        y_n = tn.add(tn.conv_temporal(x_n, self.w_nn), tn.conv_temporal(edges_at_nodes, self.w_en))
        return y_e, y_n


def shared_conv_forward(x_e: Tensor, x_n: Tensor, layer: SharedConv) -> tuple[Tensor, Tensor]:
    return layer(x_e, x_n)


class BatchNorm:
    def __init__(self, channels: int, name: str = "bn", momentum: float = 0.9, eps: float = 1e-5,
                 dtype=np.float64):
        self.name = name
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype), name=f"{name}.scale")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), name=f"{name}.shift")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return tn.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training, self.momentum, self.eps)


class Dense:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None, name: str = "fc",
                 dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(tn.glorot_uniform(rng, (d_out, d_in), d_in, d_out, dtype), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out, dtype=dtype), name=f"{name}.bias")

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return tn.linear(x, self.weight, self.bias)
