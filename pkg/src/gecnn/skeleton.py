"""Skeleton topologies, edge distances and spatial-configuration partitions.

Edges (bones) are indexed by their position in ``SkeletonTopology.bones``; that
order is the canonical edge axis for every tensor downstream.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NUM_LABELS = 3
TOPOLOGY_SCHEMA = "gecnn-topology"
TOPOLOGY_VERSION = 1
KNOWN_TOPOLOGIES = ("kinetics18", "ntu25")
DEFAULT_TOL = 1e-6


class TopologyError(ValueError):
    pass


def _line_graph_distances(num_joints: int, bones: Sequence[tuple[int, int]]) -> np.ndarray:
    """All-pairs edge distance: number of joints on the shortest connecting path."""
    incident: list[list[int]] = [[] for _ in range(num_joints)]
    for e, (a, b) in enumerate(bones):
        incident[a].append(e)
        incident[b].append(e)
    n = len(bones)
    dist = np.full((n, n), -1, dtype=np.int64)
    for src in range(n):
        dist[src, src] = 0
        queue = deque([src])
        while queue:
            e = queue.popleft()
            for joint in bones[e]:
                for nxt in incident[joint]:
                    if dist[src, nxt] < 0:
                        dist[src, nxt] = dist[src, e] + 1
                        queue.append(nxt)
    return dist


@dataclass(frozen=True)
class SkeletonTopology:
    name: str
    num_joints: int
    bones: tuple[tuple[int, int], ...]
    root: int = 0
    joint_names: tuple[str, ...] = ()
    _dist: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        bones = tuple((int(a), int(b)) for a, b in self.bones)
        object.__setattr__(self, "bones", bones)
        if self.num_joints < 1:
            raise TopologyError("topology needs at least one joint")
        if not bones:
            raise TopologyError("topology needs at least one bone")
        seen = set()
        for a, b in bones:
            if not (0 <= a < self.num_joints and 0 <= b < self.num_joints):
                raise TopologyError(f"bone ({a}, {b}) references a joint outside [0, {self.num_joints})")
            if a == b:
                raise TopologyError(f"bone ({a}, {b}) is a self-loop")
            key = frozenset((a, b))
            if key in seen:
                raise TopologyError(f"duplicate bone ({a}, {b})")
            seen.add(key)
        # connectivity over joints: every joint must be reachable through bones
        adj: list[list[int]] = [[] for _ in range(self.num_joints)]
        for a, b in bones:
            adj[a].append(b)
            adj[b].append(a)
        reached = {bones[0][0]}
        queue = deque(reached)
        while queue:
            j = queue.popleft()
            for k in adj[j]:
                if k not in reached:
                    reached.add(k)
                    queue.append(k)
        if len(reached) != self.num_joints:
            raise TopologyError(f"skeleton graph is disconnected ({len(reached)} of {self.num_joints} joints reachable)")
        object.__setattr__(self, "_dist", _line_graph_distances(self.num_joints, bones))

    @property
    def num_edges(self) -> int:
        return len(self.bones)

    @property
    def edge_distances(self) -> np.ndarray:
        return self._dist.copy()

    def joint_neighbors(self, joint: int) -> list[int]:
        out = []
        for a, b in self.bones:
            if a == joint:
                out.append(b)
            elif b == joint:
                out.append(a)
        return out

    def incident_edges(self, joint: int) -> list[int]:
        return [e for e, (a, b) in enumerate(self.bones) if joint in (a, b)]


@dataclass(frozen=True)
class TemplatePose:
    joint_coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.joint_coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[0] == 0:
            raise TopologyError("template pose needs a (num_joints, dim) coordinate array with at least one joint")
        coords.setflags(write=False)
        object.__setattr__(self, "joint_coords", coords)

    @property
    def dim(self) -> int:
        return self.joint_coords.shape[1]


@dataclass(frozen=True)
class LabelPartition:
    """Spatial labels for every (root, neighbor) pair plus the normalized operators.

    ``adjacency[l, p, q]`` is the weight root ``p`` gives neighbor ``q`` under label ``l``.
    """

    labels: dict[tuple[int, int], int]
    adjacency: np.ndarray | None = None
    K: int = NUM_LABELS

    @property
    def size(self) -> int:
        return 1 + max(p for p, _ in self.labels)


# -- construction ------------------------------------------------------------

def _data_path(name: str):
    return resources.files("gecnn").joinpath("data").joinpath(f"{name}.json")


def load_topology_file(path) -> tuple[SkeletonTopology, TemplatePose, str]:
    """Read a topology + template file; returns (topology, template, mode)."""
    if isinstance(path, str):
        path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (OSError, ValueError) as exc:
        raise TopologyError(f"cannot parse topology file {path}: {exc}") from exc
    if doc.get("schema") != TOPOLOGY_SCHEMA:
        raise TopologyError(f"{path}: not a topology file (schema={doc.get('schema')!r})")
    if doc.get("version") != TOPOLOGY_VERSION:
        raise TopologyError(f"{path}: unsupported topology schema version {doc.get('version')!r}")
    try:
        topo = SkeletonTopology(
            name=doc["name"],
            num_joints=int(doc["num_joints"]),
            bones=tuple(tuple(b) for b in doc["bones"]),
            root=int(doc.get("root", 0)),
            joint_names=tuple(doc.get("joint_names", ())),
        )
        coords = np.asarray(doc["template"]["coords"], dtype=np.float64)
        mode = doc["mode"]
    except KeyError as exc:
        raise TopologyError(f"{path}: missing field {exc}") from exc
    if coords.shape[0] != topo.num_joints:
        raise TopologyError(f"{path}: template has {coords.shape[0]} joints, topology has {topo.num_joints}")
    if coords.shape[1] != doc["template"].get("dim", coords.shape[1]):
        raise TopologyError(f"{path}: template dim field disagrees with coordinates")
    return topo, TemplatePose(coords), mode


def save_topology_file(path, topo: SkeletonTopology, template: TemplatePose, mode: str) -> None:
    doc = {
        "schema": TOPOLOGY_SCHEMA,
        "version": TOPOLOGY_VERSION,
        "name": topo.name,
        "mode": mode,
        "num_joints": topo.num_joints,
        "root": topo.root,
        "joint_names": list(topo.joint_names),
        "bones": [list(b) for b in topo.bones],
        "template": {"dim": template.dim, "coords": template.joint_coords.tolist()},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def build_topology(spec: str | Iterable[tuple[int, int]], num_joints: int | None = None,
                   name: str = "custom") -> SkeletonTopology:
    """Build a topology from a known name or an explicit bone list.

    >>> build_topology("kinetics18").num_edges
    17
    >>> build_topology([(0, 1)], num_joints=2).num_edges
    1
    """
    if isinstance(spec, str):
        if spec not in KNOWN_TOPOLOGIES:
            raise TopologyError(f"unknown topology {spec!r}; known: {', '.join(KNOWN_TOPOLOGIES)}")
        return load_topology_file(_data_path(spec))[0]
    bones = [tuple(b) for b in spec]
    if num_joints is None:
        num_joints = 1 + max((max(b) for b in bones), default=-1)
    return SkeletonTopology(name=name, num_joints=num_joints, bones=tuple(bones))


def load_template(name: str) -> TemplatePose:
    if name not in KNOWN_TOPOLOGIES:
        raise TopologyError(f"no shipped template for {name!r}")
    return load_topology_file(_data_path(name))[1]


def topology_mode(name: str) -> str:
    return load_topology_file(_data_path(name))[2]


def resolve_topology(ref: str) -> tuple[SkeletonTopology, TemplatePose, str]:
    """Known name or path to a topology file."""
    if ref in KNOWN_TOPOLOGIES:
        return load_topology_file(_data_path(ref))
    return load_topology_file(Path(ref))


# -- distances and neighborhoods -----------------------------------------------

def _check_edge(topo: SkeletonTopology, e: int) -> None:
    if not 0 <= e < topo.num_edges:
        raise IndexError(f"edge index {e} out of range [0, {topo.num_edges})")


def edge_distance(topo: SkeletonTopology, e1: int, e2: int) -> int:
    _check_edge(topo, e1)
    _check_edge(topo, e2)
    return int(topo._dist[e1, e2])


def edge_neighborhood(topo: SkeletonTopology, e: int, R: int = 1) -> set[int]:
    _check_edge(topo, e)
    if R < 0:
        raise ValueError("R must be non-negative")
    return {int(q) for q in np.flatnonzero(topo._dist[e] <= R)}


def gravity_center(pose: TemplatePose | np.ndarray) -> np.ndarray:
    coords = pose.joint_coords if isinstance(pose, TemplatePose) else np.asarray(pose, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[0] == 0:
        raise TopologyError("gravity center of an empty pose is undefined")
    return coords.mean(axis=0)


def edge_centers(topo: SkeletonTopology, pose: TemplatePose) -> np.ndarray:
    coords = pose.joint_coords
    a = np.array([b[0] for b in topo.bones])
    b = np.array([b[1] for b in topo.bones])
    return 0.5 * (coords[a] + coords[b])


# -- labeling ----------------------------------------------------------------

def _label(root_dist: float, other_dist: float, tol: float) -> int:
    if abs(other_dist - root_dist) <= tol:
        return 0
    return 1 if other_dist < root_dist else 2


def _label_units(neighborhoods: Sequence[Iterable[int]], dists: np.ndarray, tol: float) -> dict[tuple[int, int], int]:
    labels = {}
    for p, hood in enumerate(neighborhoods):
        for q in hood:
            labels[(p, q)] = 0 if p == q else _label(dists[p], dists[q], tol)
    return labels


def _check_pose(topo: SkeletonTopology, pose: TemplatePose) -> None:
    if pose.joint_coords.shape[0] != topo.num_joints:
        raise TopologyError(f"pose has {pose.joint_coords.shape[0]} joints, topology {topo.name} has {topo.num_joints}")


def spatial_labels(topo: SkeletonTopology, pose: TemplatePose, tol: float = DEFAULT_TOL) -> LabelPartition:
    """Label each edge's R=1 neighbors as equal (0), closer (1) or farther (2) from the gravity center."""
    if tol < 0:
        raise ValueError("tol must be non-negative")
    _check_pose(topo, pose)
    gc = gravity_center(pose)
    dists = np.linalg.norm(edge_centers(topo, pose) - gc, axis=1)
    hoods = [sorted(edge_neighborhood(topo, p, 1)) for p in range(topo.num_edges)]
    return LabelPartition(_label_units(hoods, dists, tol))


def node_labels(topo: SkeletonTopology, pose: TemplatePose, tol: float = DEFAULT_TOL) -> LabelPartition:
    """Same rule over joints: neighbors are the joint itself plus joints sharing a bone."""
    if tol < 0:
        raise ValueError("tol must be non-negative")
    _check_pose(topo, pose)
    gc = gravity_center(pose)
    dists = np.linalg.norm(pose.joint_coords - gc, axis=1)
    hoods = [sorted({j, *topo.joint_neighbors(j)}) for j in range(topo.num_joints)]
    return LabelPartition(_label_units(hoods, dists, tol))


def partition_adjacency(labels: LabelPartition | dict, size: int | None = None) -> np.ndarray:
    """Normalized per-label operators of shape (K, size, size); rows are roots."""
    table = labels.labels if isinstance(labels, LabelPartition) else labels
    n = size if size is not None else 1 + max(p for p, _ in table)
    counts = np.zeros((n, NUM_LABELS), dtype=np.int64)
    for (p, _), l in table.items():
        counts[p, l] += 1
    if np.any(counts.sum(axis=1) == 0):
        missing = [int(p) for p in np.flatnonzero(counts.sum(axis=1) == 0)]
        raise TopologyError(f"no label entries for roots {missing}")
    A = np.zeros((NUM_LABELS, n, n))
    for (p, q), l in table.items():
        A[l, p, q] = 1.0 / counts[p, l]
    return A


def edge_partition(topo: SkeletonTopology, pose: TemplatePose, tol: float = DEFAULT_TOL) -> LabelPartition:
    labels = spatial_labels(topo, pose, tol)
    expected = {(p, q) for p in range(topo.num_edges) for q in edge_neighborhood(topo, p, 1)}
    if set(labels.labels) != expected:
        raise TopologyError("label table does not cover every distance<=1 pair")
    A = partition_adjacency(labels, topo.num_edges)
    A.setflags(write=False)
    return LabelPartition(labels.labels, A)


def node_partition(topo: SkeletonTopology, pose: TemplatePose, tol: float = DEFAULT_TOL) -> LabelPartition:
    labels = node_labels(topo, pose, tol)
    A = partition_adjacency(labels, topo.num_joints)
    A.setflags(write=False)
    return LabelPartition(labels.labels, A)


def incidence_operators(topo: SkeletonTopology) -> tuple[np.ndarray, np.ndarray]:
    """(edge_from_nodes E x N, node_from_edges N x E), each row-normalized to sum 1."""
    E, N = topo.num_edges, topo.num_joints
    B = np.zeros((E, N))
    for e, (a, b) in enumerate(topo.bones):
        B[e, a] = 1.0
        B[e, b] = 1.0
    edge_from_nodes = B / B.sum(axis=1, keepdims=True)
    node_from_edges = B.T / B.T.sum(axis=1, keepdims=True)
    return edge_from_nodes, node_from_edges


def permute_partition(partition: LabelPartition, perm: Sequence[int]) -> LabelPartition:
    """Relabel units so that new index i is old index perm[i]."""
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    labels = {(int(inv[p]), int(inv[q])): l for (p, q), l in partition.labels.items()}
    A = None
    if partition.adjacency is not None:
        A = partition.adjacency[:, perm][:, :, perm]
    return LabelPartition(labels, A)
