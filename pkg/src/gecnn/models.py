"""GECNN, the node-only network and the two node/edge hybrids."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import rng as rngs
from . import tensor as tn
from .bones import BONE_CHANNELS, JOINT_CHANNELS, MODE_OF_TOPOLOGY, normalize_input
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .layers import BatchNorm, Dense, GraphConv, NonFiniteError, SharedConv
from .skeleton import edge_partition, node_partition, resolve_topology
from .tensor import Parameter, Tensor

KINDS = ("gecnn", "nodenet", "slhm", "bplhm")
CONFIG_SCHEMA = "gecnn-model"
CONFIG_VERSION = 1


def default_plan(c_in: int) -> list[tuple[int, int, int]]:
    """Nine layers: 64, 64, 64, 128, 128, 128, 256, 256, 256 channels; stride 2 at layers 4 and 7."""
    widths = [64, 64, 64, 128, 128, 128, 256, 256, 256]
    strides = [1, 1, 1, 2, 1, 1, 2, 1, 1]
    ins = [c_in] + widths[:-1]
    return list(zip(ins, widths, strides))


def toy_plan(c_in: int) -> list[tuple[int, int, int]]:
    return [(c_in, 16, 1), (16, 16, 1), (16, 32, 2), (32, 32, 1)]


def with_input(plan, c_in: int) -> list[tuple[int, int, int]]:
    plan = [tuple(layer) for layer in plan]
    return [(c_in, plan[0][1], plan[0][2]), *plan[1:]]


@dataclass
class ModelConfig:
    kind: str
    plan: list[tuple[int, int, int]]
    kernel_size: int = 9
    num_classes: int = 4
    topology: str = "kinetics18"
    mode: str = "kinetics2d"
    shared_channels: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        self.plan = [tuple(int(v) for v in layer) for layer in self.plan]
        if not self.plan:
            raise ValueError("empty layer plan")
        for i in range(1, len(self.plan)):
            if self.plan[i][0] != self.plan[i - 1][1]:
                raise ValueError(f"layer {i + 1} expects {self.plan[i][0]} channels, layer {i} emits {self.plan[i - 1][1]}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError(f"temporal kernel size must be odd, got {self.kernel_size}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.kind == "bplhm" and self.shared_channels is None:
            self.shared_channels = self.plan[-1][1]

    @property
    def feature_channels(self) -> int:
        return self.plan[-1][1]

    def edge_plan(self):
        return with_input(self.plan, BONE_CHANNELS[self.mode])

    def node_plan(self):
        return with_input(self.plan, JOINT_CHANNELS[self.mode])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["plan"] = [list(layer) for layer in self.plan]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = {k: v for k, v in d.items() if k not in ("schema", "version")}
        return cls(**d)


def make_config(name: str, num_classes: int = 4, topology: str = "kinetics18", mode: str | None = None,
                kernel_size: int = 9, seed: int = 0) -> ModelConfig:
    """Config for ``gecnn``, ``nodenet``, ``slhm``, ``bplhm`` or their ``-toy`` variants."""
    kind, _, size = name.partition("-")
    if kind not in KINDS or size not in ("", "toy"):
        raise ValueError(f"unknown model {name!r}; expected one of {[k + s for k in KINDS for s in ('', '-toy')]}")
    mode = mode or MODE_OF_TOPOLOGY.get(topology, "kinetics2d")
    c_in = JOINT_CHANNELS[mode] if kind == "nodenet" else BONE_CHANNELS[mode]
    plan = toy_plan(c_in) if size == "toy" else default_plan(c_in)
    return ModelConfig(kind, plan, kernel_size, num_classes, topology, mode, seed=seed)


def save_config(path, cfg: ModelConfig) -> None:
    doc = {"schema": CONFIG_SCHEMA, "version": CONFIG_VERSION, **cfg.to_dict()}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_config(path) -> ModelConfig:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema") != CONFIG_SCHEMA:
        raise ValueError(f"{path}: not a model config")
    if doc.get("version") != CONFIG_VERSION:
        raise ValueError(f"{path}: unsupported model config version {doc.get('version')!r}")
    return ModelConfig.from_dict(doc)


@dataclass
class Batch:
    labels: np.ndarray
    joints: np.ndarray | None = None
    bones: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)


class Stream:
    """Input normalization followed by graph conv -> batch norm -> relu layers."""

    def __init__(self, partition, plan, kernel_size: int, rng, name: str):
        self.name = name
        self.input_norm = BatchNorm(plan[0][0], name=f"{name}.input_norm")
        self.convs, self.norms = [], []
        for i, (c_in, c_out, stride) in enumerate(plan, start=1):
            self.convs.append(GraphConv(partition, c_in, c_out, kernel_size, stride, rng, name=f"{name}.conv{i}"))
            self.norms.append(BatchNorm(c_out, name=f"{name}.bn{i}"))

    def parameters(self) -> list[Parameter]:
        out = self.input_norm.parameters()
        for conv, norm in zip(self.convs, self.norms):
            out += conv.parameters() + norm.parameters()
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = self.input_norm.buffers()
        for norm in self.norms:
            out.update(norm.buffers())
        return out

    def features(self, x: np.ndarray | Tensor, training: bool) -> Tensor:
        """(N, C, T, S, M) input -> (N*M, C_last, T', S) features."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 5:
            raise ValueError(f"{self.name}: expected (N, C, T, S, M) input, got {x.shape}")
        N, C, T, S, M = x.shape
        h = normalize_input(x, self.input_norm, training)
        h = tn.reshape(tn.transpose(h, (0, 4, 1, 2, 3)), (N * M, C, T, S))
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms), start=1):
            try:
                h = tn.relu(norm(conv(h), training))
            except NonFiniteError as exc:
                raise NonFiniteError(f"{self.name} layer {i}: {exc}") from exc
            if not np.all(np.isfinite(h.data)):
                raise NonFiniteError(f"{self.name} layer {i}: non-finite output")
        return h


def pool(h: Tensor, n: int, m: int) -> Tensor:
    """Average over time and space, then over bodies: (N*M, C, T, S) -> (N, C)."""
    pooled = tn.mean(h, (2, 3))
    return tn.mean(tn.reshape(pooled, (n, m, pooled.shape[1])), 1)


class Model:
    cfg: ModelConfig

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def buffers(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def pooled(self, batch: Batch, training: bool = False) -> Tensor:
        raise NotImplementedError

    def forward(self, batch: Batch, training: bool = False) -> Tensor:
        return self.fc(self.pooled(batch, training))

    __call__ = forward

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters().items()}
        out.update(self.buffers())
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params, bufs = self.named_parameters(), self.buffers()
        missing = (set(params) | set(bufs)) - set(state)
        if missing:
            raise CheckpointError(f"checkpoint lacks {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise CheckpointError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
            p.data[...] = state[name]
        for name, buf in bufs.items():
            buf[...] = state[name]


def _input(batch: Batch, which: str, n_channels: int) -> np.ndarray:
    x = getattr(batch, which)
    if x is None:
        raise ValueError(f"model needs {which} input")
    if x.ndim != 5 or x.shape[1] != n_channels:
        raise ValueError(f"{which} input must be (N, {n_channels}, T, S, M), got {x.shape}")
    return x


class GECNN(Model):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        topo, template, _ = resolve_topology(cfg.topology)
        self.topo = topo
        init = rngs.stream(cfg.seed, "init")
        self.stream = Stream(edge_partition(topo, template), cfg.edge_plan(), cfg.kernel_size, init, "edge")
        self.fc = Dense(cfg.feature_channels, cfg.num_classes, init, name="fc")

    def parameters(self):
        return self.stream.parameters() + self.fc.parameters()

    def buffers(self):
        return self.stream.buffers()

    def pooled(self, batch, training=False):
        x = _input(batch, "bones", BONE_CHANNELS[self.cfg.mode])
        if x.shape[3] != self.topo.num_edges:
            raise ValueError(f"bones input has {x.shape[3]} edges, topology has {self.topo.num_edges}")
        return pool(self.stream.features(x, training), x.shape[0], x.shape[4])


class NodeNet(Model):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        topo, template, _ = resolve_topology(cfg.topology)
        self.topo = topo
        init = rngs.stream(cfg.seed, "init")
        self.stream = Stream(node_partition(topo, template), cfg.node_plan(), cfg.kernel_size, init, "node")
        self.fc = Dense(cfg.feature_channels, cfg.num_classes, init, name="fc")

    def parameters(self):
        return self.stream.parameters() + self.fc.parameters()

    def buffers(self):
        return self.stream.buffers()

    def pooled(self, batch, training=False):
        x = _input(batch, "joints", JOINT_CHANNELS[self.cfg.mode])
        if x.shape[3] != self.topo.num_joints:
            raise ValueError(f"joints input has {x.shape[3]} joints, topology has {self.topo.num_joints}")
        return pool(self.stream.features(x, training), x.shape[0], x.shape[4])


class _TwoStream(Model):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        topo, template, _ = resolve_topology(cfg.topology)
        self.topo = topo
        init = rngs.stream(cfg.seed, "init")
        self.edge = Stream(edge_partition(topo, template), cfg.edge_plan(), cfg.kernel_size, init, "edge")
        self.node = Stream(node_partition(topo, template), cfg.node_plan(), cfg.kernel_size, init, "node")
        self._init = init

    def _stream_features(self, batch, training):
        bones = _input(batch, "bones", BONE_CHANNELS[self.cfg.mode])
        joints = _input(batch, "joints", JOINT_CHANNELS[self.cfg.mode])
        if bones.shape[0] != joints.shape[0] or bones.shape[4] != joints.shape[4]:
            raise ValueError("bones and joints inputs must describe the same samples")
        return self.edge.features(bones, training), self.node.features(joints, training), bones.shape[0], bones.shape[4]


class SLHM(_TwoStream):
    """Pooled edge features and pooled node features, concatenated into one dense layer."""

    def __init__(self, cfg):
        super().__init__(cfg)
        self.fc = Dense(2 * cfg.feature_channels, cfg.num_classes, self._init, name="fc")

    def parameters(self):
        return self.edge.parameters() + self.node.parameters() + self.fc.parameters()

    def buffers(self):
        return {**self.edge.buffers(), **self.node.buffers()}

    def pooled(self, batch, training=False):
        h_e, h_n, n, m = self._stream_features(batch, training)
        return tn.concat([pool(h_e, n, m), pool(h_n, n, m)], axis=1)


class BPLHM(_TwoStream):
    """Unpooled edge and node features exchanged through two shared node/edge layers."""

    num_shared = 2

    def __init__(self, cfg):
        super().__init__(cfg)
        c = cfg.shared_channels
        self.shared, self.shared_norms = [], []
        c_in = cfg.feature_channels
        for i in range(1, self.num_shared + 1):
            self.shared.append(SharedConv(self.topo, c_in, c, self._init, name=f"shared{i}"))
            self.shared_norms.append((BatchNorm(c, name=f"shared{i}.bn_edge"), BatchNorm(c, name=f"shared{i}.bn_node")))
            c_in = c
        self.fc = Dense(c, cfg.num_classes, self._init, name="fc")

    def parameters(self):
        out = self.edge.parameters() + self.node.parameters()
        for layer, (bn_e, bn_n) in zip(self.shared, self.shared_norms):
            out += layer.parameters() + bn_e.parameters() + bn_n.parameters()
        return out + self.fc.parameters()

    def buffers(self):
        out = {**self.edge.buffers(), **self.node.buffers()}
        for bn_e, bn_n in self.shared_norms:
            out.update(bn_e.buffers())
            out.update(bn_n.buffers())
        return out

    def shared_features(self, batch, training=False) -> tuple[Tensor, Tensor, int, int]:
        h_e, h_n, n, m = self._stream_features(batch, training)
        if h_e.shape[1] != h_n.shape[1]:
            raise ValueError(f"stream widths differ: edges {h_e.shape[1]}, nodes {h_n.shape[1]}")
        if h_e.shape[2] != h_n.shape[2]:
            raise ValueError(f"stream lengths differ: edges {h_e.shape[2]}, nodes {h_n.shape[2]}")
        for layer, (bn_e, bn_n) in zip(self.shared, self.shared_norms):
            y_e, y_n = layer(h_e, h_n)
            h_e, h_n = tn.relu(bn_e(y_e, training)), tn.relu(bn_n(y_n, training))
        return h_e, h_n, n, m

    def pooled(self, batch, training=False):
        h_e, h_n, n, m = self.shared_features(batch, training)
        return pool(tn.concat([h_e, h_n], axis=3), n, m)


@dataclass
class ClassScores:
    logits: np.ndarray

    @property
    def probabilities(self) -> np.ndarray:
        return tn.softmax(self.logits)

    @property
    def predicted(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)


def _scores(model: Model, batch: Batch, kind: str) -> ClassScores:
    if model.cfg.kind != kind:
        raise ValueError(f"expected a {kind} model, got {model.cfg.kind}")
    with tn.no_grad():
        return ClassScores(model(batch).data)


def gecnn_forward(bones: np.ndarray, model: "GECNN") -> ClassScores:
    return _scores(model, Batch(np.zeros(len(bones), dtype=np.int64), bones=bones), "gecnn")


def node_net_forward(joints: np.ndarray, model: "NodeNet") -> ClassScores:
    return _scores(model, Batch(np.zeros(len(joints), dtype=np.int64), joints=joints), "nodenet")


def slhm_forward(joints: np.ndarray, bones: np.ndarray, model: "SLHM") -> ClassScores:
    return _scores(model, Batch(np.zeros(len(joints), dtype=np.int64), joints, bones), "slhm")


def bplhm_forward(joints: np.ndarray, bones: np.ndarray, model: "BPLHM") -> ClassScores:
    return _scores(model, Batch(np.zeros(len(joints), dtype=np.int64), joints, bones), "bplhm")


_CLASSES = {"gecnn": GECNN, "nodenet": NodeNet, "slhm": SLHM, "bplhm": BPLHM}


def build_model(cfg: ModelConfig) -> Model:
    return _CLASSES[cfg.kind](cfg)


def save_model(path, model: Model, extra: dict | None = None) -> None:
    meta = {"config": model.cfg.to_dict(), **(extra or {})}
    save_tensors(path, model.state(), meta)


def load_model(path) -> tuple[Model, dict]:
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state, meta = load_tensors(path)
    if "config" not in meta:
        raise CheckpointError(f"{path}: checkpoint carries no model config")
    model = build_model(ModelConfig.from_dict(meta["config"]))
    model.load_state(state)
    return model, meta
