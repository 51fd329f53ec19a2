"""Literal per-neighbor summation of the graph convolutions.

These loops certify the matrix-based layers in ``layers``. They walk every
root unit, output frame, temporal tap and neighbor, look up the spatio-temporal
label ``l' = l + k * K`` (k = tap index in [0, K_t)), divide by the count of
same-label neighbors of the root and accumulate. They are slow on purpose and
refuse large instances.
"""
from __future__ import annotations

import numpy as np

from .layers import GraphConv, SharedConv
from .skeleton import NUM_LABELS, SkeletonTopology
from .tensor import Tensor, conv_output_length

DEFAULT_MAX_WORK = 5_000_000


class OracleTooLarge(ValueError):
    pass


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def factorized_weight_table(layer: GraphConv) -> np.ndarray:
    """Weights indexed by spatio-temporal label: table[l + k*K] = S_l @ W_t[:, :, k]."""
    K_t = layer.kernel_size
    table = np.zeros((NUM_LABELS * K_t, layer.c_out, layer.c_in))
    for k in range(K_t):
        for l in range(NUM_LABELS):
            table[l + k * NUM_LABELS] = layer.spatial[l].data[:, :, 0] @ layer.temporal.data[:, :, k]
    return table


def _direct(x: np.ndarray, table: np.ndarray, neighbors: list[list[int]], labels: dict, kernel_size: int,
            stride: int, max_work: int) -> np.ndarray:
    N, C_in, T, S = x.shape
    C_out = table.shape[1]
    radius = (kernel_size - 1) // 2
    T_out = conv_output_length(T, kernel_size, stride, radius)
    work = N * C_out * C_in * T_out * kernel_size * sum(len(h) for h in neighbors)
    if work > max_work:
        raise OracleTooLarge(f"direct summation would take ~{work} multiply-adds (limit {max_work})")
    out = np.zeros((N, C_out, T_out, S))
    for p in range(S):
        hood = neighbors[p]
        Z = {}
        for q in hood:
            Z[labels[(p, q)]] = Z.get(labels[(p, q)], 0) + 1
        for t_out in range(T_out):
            tau1 = t_out * stride
            for tau2 in range(tau1 - radius, tau1 + radius + 1):
                if tau2 < 0 or tau2 >= T:
                    continue
                k = tau2 - tau1 + radius
                for q in hood:
                    l = labels[(p, q)]
                    w = table[l + k * NUM_LABELS]
                    out[:, :, t_out, p] += (x[:, :, tau2, q] @ w.T) / Z[l]
    return out


def edge_conv_direct(x, layer: GraphConv, topo: SkeletonTopology, weights: np.ndarray | None = None,
                     max_work: int = DEFAULT_MAX_WORK) -> np.ndarray:
    """Edge convolution by direct summation.

    With ``weights=None`` the layer's factorized weights are used, so the result
    must equal ``layer(x)``. Passing a (K * K_t, C_out, C_in) table instead gives
    the unconstrained form with an independent weight per spatio-temporal label;
    that variant is for study only and has no fast counterpart.
    """
    x = _data(x)
    E = topo.num_edges
    if x.shape[3] != E:
        raise ValueError(f"input has {x.shape[3]} edges, topology has {E}")
    # distance <= 1 means the same bone or a bone sharing a joint
    neighbors = [[q for q in range(E) if q == p or set(topo.bones[p]) & set(topo.bones[q])] for p in range(E)]
    table = factorized_weight_table(layer) if weights is None else np.asarray(weights)
    if table.shape[0] != NUM_LABELS * layer.kernel_size:
        raise ValueError(f"weight table needs {NUM_LABELS * layer.kernel_size} entries, got {table.shape[0]}")
    return _direct(x, table, neighbors, layer.partition.labels, layer.kernel_size, layer.stride, max_work)


def node_conv_direct(x, layer: GraphConv, topo: SkeletonTopology, weights: np.ndarray | None = None,
                     max_work: int = DEFAULT_MAX_WORK) -> np.ndarray:
    """Node analogue: neighbors of a joint are itself and every joint sharing a bone with it."""
    x = _data(x)
    V = topo.num_joints
    if x.shape[3] != V:
        raise ValueError(f"input has {x.shape[3]} joints, topology has {V}")
    neighbors = []
    for j in range(V):
        hood = {j}
        for a, b in topo.bones:
            if a == j:
                hood.add(b)
            elif b == j:
                hood.add(a)
        neighbors.append(sorted(hood))
    table = factorized_weight_table(layer) if weights is None else np.asarray(weights)
    return _direct(x, table, neighbors, layer.partition.labels, layer.kernel_size, layer.stride, max_work)


def shared_conv_direct(x_e, x_n, layer: SharedConv) -> tuple[np.ndarray, np.ndarray]:
    """Per-element receptive fields: bone (a, b) <- itself, joints a and b;
    joint i <- itself and every bone touching i."""
    x_e, x_n = _data(x_e), _data(x_n)
    topo = layer.topo
    w_ee, w_ne = layer.w_ee.data[:, :, 0], layer.w_ne.data[:, :, 0]
    w_nn, w_en = layer.w_nn.data[:, :, 0], layer.w_en.data[:, :, 0]
    N, _, T, _ = x_e.shape
    y_e = np.zeros((N, layer.c_out, T, topo.num_edges))
    y_n = np.zeros((N, layer.c_out, T, topo.num_joints))
    for t in range(T):
        for e, (a, b) in enumerate(topo.bones):
            y_e[:, :, t, e] = x_e[:, :, t, e] @ w_ee.T + ((x_n[:, :, t, a] + x_n[:, :, t, b]) / 2) @ w_ne.T
        for i in range(topo.num_joints):
            touching = [e for e, bone in enumerate(topo.bones) if i in bone]
            acc = np.zeros((N, x_e.shape[1]))
            for e in touching:
                acc += x_e[:, :, t, e]
            y_n[:, :, t, i] = x_n[:, :, t, i] @ w_nn.T + (acc / len(touching)) @ w_en.T
    return y_e, y_n


def random_tree(rng: np.random.Generator, num_edges: int) -> SkeletonTopology:
    """Uniformly grown random tree with ``num_edges`` bones, rooted at joint 0."""
    bones = [(int(rng.integers(0, j)), j) for j in range(1, num_edges + 1)]
    return SkeletonTopology(name=f"tree{num_edges}", num_joints=num_edges + 1, bones=tuple(bones))
