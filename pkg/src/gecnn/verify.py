"""Verification suites: fast-vs-direct equivalence and finite-difference gradients."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import rng as rngs
from . import tensor as tn
from .gradcheck import GradCheckReport, finite_diff_check
from .layers import GraphConv, SharedConv
from .models import Batch, build_model, make_config
from .oracle import edge_conv_direct, node_conv_direct, random_tree, shared_conv_direct
from .skeleton import TemplatePose, edge_partition, node_partition, resolve_topology
from .tensor import Parameter, Tensor

FRAMES = (1, 2, 7, 16)
KERNELS = (1, 3, 9)
STRIDES = (1, 2)


@dataclass
class OracleCase:
    kind: str
    num_edges: int
    frames: int
    kernel_size: int
    stride: int
    max_abs_deviation: float


def _instance_topology(rng, i: int, trials: int, topology: str | None):
    if topology is not None:
        return resolve_topology(topology)[:2]
    # sweep tree sizes from 1 to 24 edges across the trials
    num_edges = 1 + (23 * i) // max(trials - 1, 1)
    topo = random_tree(rng, num_edges)
    return topo, TemplatePose(rng.normal(size=(topo.num_joints, 3)))


def oracle_suite(trials: int = 24, seed: int = 0, topology: str | None = None) -> list[OracleCase]:
    """Compare every layer kind against its direct summation on ``trials`` random instances each.

    Frame counts, kernel sizes and strides cycle through every combination of
    FRAMES x KERNELS x STRIDES.
    """
    combos = list(itertools.product(FRAMES, KERNELS, STRIDES))
    cases = []
    for i in range(trials):
        rng = rngs.stream(seed, "oracle", i)
        T, K, stride = combos[i % len(combos)]
        topo, template = _instance_topology(rng, i, trials, topology)
        c_in, c_out, n = int(rng.integers(1, 5)), int(rng.integers(1, 5)), 2

        layer = GraphConv(edge_partition(topo, template), c_in, c_out, K, stride, rng, name="edge")
        x = rng.normal(size=(n, c_in, T, topo.num_edges))
        dev = np.abs(layer(Tensor(x)).data - edge_conv_direct(x, layer, topo)).max()
        cases.append(OracleCase("edge", topo.num_edges, T, K, stride, float(dev)))

        layer = GraphConv(node_partition(topo, template), c_in, c_out, K, stride, rng, name="node")
        x = rng.normal(size=(n, c_in, T, topo.num_joints))
        dev = np.abs(layer(Tensor(x)).data - node_conv_direct(x, layer, topo)).max()
        cases.append(OracleCase("node", topo.num_edges, T, K, stride, float(dev)))

        shared = SharedConv(topo, c_in, c_out, rng)
        x_e = rng.normal(size=(n, c_in, T, topo.num_edges))
        x_n = rng.normal(size=(n, c_in, T, topo.num_joints))
        y_e, y_n = shared(Tensor(x_e), Tensor(x_n))
        d_e, d_n = shared_conv_direct(x_e, x_n, shared)
        dev = max(np.abs(y_e.data - d_e).max(), np.abs(y_n.data - d_n).max())
        cases.append(OracleCase("shared", topo.num_edges, T, 1, 1, float(dev)))
    return cases


def _toy_batch(model, n: int, frames: int, rng) -> Batch:
    from .bones import JOINT_CHANNELS, bone_features

    topo = model.topo
    mode = model.cfg.mode
    joints = rng.normal(size=(n, JOINT_CHANNELS[mode], frames, topo.num_joints, 1))
    labels = np.arange(n) % model.cfg.num_classes
    return Batch(labels, joints, bone_features(joints, topo, mode))


def model_gradcheck(name: str, seed: int = 0, frames: int = 8, batch: int = 3, coords: int = 3,
                    h: float = 1e-4, rel_tol: float = 1e-4, topology: str = "kinetics18") -> GradCheckReport:
    """Finite-difference check of a whole model's cross-entropy loss at sampled coordinates."""
    model = build_model(make_config(name, num_classes=3, topology=topology, seed=seed))
    rng = rngs.stream(seed, "gradcheck")
    data = _toy_batch(model, batch, frames, rng)
    # nonzero dense bias so the check also covers that path
    model.fc.bias.data[:] = rng.normal(size=model.fc.bias.shape)

    def loss():
        return tn.softmax_cross_entropy(model(data, training=True), data.labels)

    return finite_diff_check(loss, model.parameters(), h=h, rel_tol=rel_tol, max_coords=coords,
                             rng=rngs.stream(seed, "gradcheck-coords"))


def operator_gradchecks(seed: int = 0, h: float = 1e-4, rel_tol: float = 1e-4) -> dict[str, GradCheckReport]:
    """One finite-difference check per differentiable operator on small random shapes."""
    rng = rngs.stream(seed, "operators")

    def P(*shape, name=""):
        return Parameter(rng.normal(size=shape), name=name)

    def weighted(t: Tensor) -> Tensor:
        # random projection to a scalar so every output element matters
        w = Tensor(rngs.stream(seed, "projection", t.data.size).normal(size=t.shape))
        return tn.sum_all(tn.mul(t, w))

    topo, template, _ = resolve_topology("kinetics18")
    a, b = P(3, 4, name="a"), P(3, 4, name="b")
    m1, m2 = P(2, 3, 4, name="lhs"), P(4, 5, name="rhs")
    m3 = P(2, 4, 5, name="rhs_batched")
    x4 = P(2, 3, 7, 5, name="x")
    w3 = P(4, 3, 3, name="w")
    w1 = P(4, 3, 1, name="w1")
    logits = P(5, 4, name="logits")
    gamma, beta = Parameter(rng.uniform(0.5, 1.5, 3), name="gamma"), P(3, name="beta")
    xin, wl, bl = P(6, 4, name="x"), P(3, 4, name="weight"), P(3, name="bias")
    edge_layer = GraphConv(edge_partition(topo, template), 2, 3, 3, 2, rng, name="edge_conv")
    node_layer = GraphConv(node_partition(topo, template), 2, 3, 3, 1, rng, name="node_conv")
    x_e, x_n = P(2, 2, 5, topo.num_edges, name="x_edges"), P(2, 2, 5, topo.num_joints, name="x_nodes")
    shared = SharedConv(topo, 2, 3, rng, name="shared")
    labels = np.array([0, 3, 1, 2, 3])
    running = (np.zeros(3), np.ones(3))
    eval_stats = (rng.normal(size=3), rng.uniform(0.5, 2.0, 3))

    def relu_input():
        # keep entries away from the kink so differences are smooth
        p = P(3, 4, name="x")
        p.data[:] = np.sign(p.data) * (np.abs(p.data) + 0.1)
        return p

    r = relu_input()
    checks = {
        "add": (lambda: weighted(tn.add(a, b)), [a, b]),
        "mul": (lambda: weighted(tn.mul(a, b)), [a, b]),
        "scale": (lambda: weighted(tn.scale(a, -2.5)), [a]),
        "relu": (lambda: weighted(tn.relu(r)), [r]),
        "sum": (lambda: tn.sum_all(tn.mul(a, a)), [a]),
        "reshape": (lambda: weighted(tn.reshape(m1, (6, 4))), [m1]),
        "transpose": (lambda: weighted(tn.transpose(m1, (2, 0, 1))), [m1]),
        "concat": (lambda: weighted(tn.concat([a, b], axis=1)), [a, b]),
        "split": (lambda: weighted(tn.split(x4, [1, 2], axis=1)[1]), [x4]),
        "mean": (lambda: weighted(tn.mean(x4, (2, 3))), [x4]),
        "matmul_shared_rhs": (lambda: weighted(tn.matmul(m1, m2)), [m1, m2]),
        "matmul_batched": (lambda: weighted(tn.matmul(m1, m3)), [m1, m3]),
        "linear": (lambda: weighted(tn.linear(xin, wl, bl)), [xin, wl, bl]),
        "conv_temporal": (lambda: weighted(tn.conv_temporal(x4, w3)), [x4, w3]),
        "conv_temporal_stride2": (lambda: weighted(tn.conv_temporal(x4, w3, stride=2)), [x4, w3]),
        "conv_pointwise": (lambda: weighted(tn.conv_temporal(x4, w1)), [x4, w1]),
        "batch_norm_train": (lambda: weighted(tn.batch_norm(x4, gamma, beta, *running, training=True)),
                             [x4, gamma, beta]),
        "batch_norm_eval": (lambda: weighted(tn.batch_norm(x4, gamma, beta, *eval_stats, training=False)),
                            [x4, gamma, beta]),
        "softmax_cross_entropy": (lambda: tn.softmax_cross_entropy(logits, labels), [logits]),
        "edge_conv": (lambda: weighted(edge_layer(x_e)), [x_e, *edge_layer.parameters()]),
        "node_conv": (lambda: weighted(node_layer(x_n)), [x_n, *node_layer.parameters()]),
        "shared_conv": (lambda: tn.add(weighted(shared(x_e, x_n)[0]), weighted(shared(x_e, x_n)[1])),
                        [x_e, x_n, *shared.parameters()]),
    }
    return {name: finite_diff_check(f, params, h=h, rel_tol=rel_tol, max_coords=None,
                                    rng=rngs.stream(seed, "coords", i))
            for i, (name, (f, params)) in enumerate(checks.items())}
