"""Joint-to-bone feature transform, synthetic motion datasets and sequence files.

Sequence tensors are laid out (C, T, V, M) per sample: channels, frames,
joints (or bones), bodies. Batches prepend a sample axis.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import rng as rngs
from .skeleton import SkeletonTopology, TemplatePose, build_topology, load_template

MODES = ("kinetics2d", "ntu3d")
JOINT_CHANNELS = {"kinetics2d": 3, "ntu3d": 3}
BONE_CHANNELS = {"kinetics2d": 5, "ntu3d": 6}
COORD_DIMS = {"kinetics2d": 2, "ntu3d": 3}
MODE_OF_TOPOLOGY = {"kinetics18": "kinetics2d", "ntu25": "ntu3d"}

SEQ_MAGIC = b"GECNNSEQ"
SEQ_VERSION = 1
SEQ_HEADER = struct.Struct("<8sHHIQ")
SEQ_HEADER_SIZE = 64
MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA = "gecnn-dataset"
MANIFEST_VERSION = 1


class SequenceFormatError(ValueError):
    pass


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


@dataclass
class JointSequence:
    data: np.ndarray
    label: int
    mode: str
    topology: str = ""

    def __post_init__(self):
        _check_mode(self.mode)
        if self.data.ndim != 4:
            raise ValueError(f"joint sequence must be (C, T, V, M), got shape {self.data.shape}")
        if self.data.shape[0] != JOINT_CHANNELS[self.mode]:
            raise ValueError(f"{self.mode} joints carry {JOINT_CHANNELS[self.mode]} channels, got {self.data.shape[0]}")
        if self.data.shape[1] < 1 or self.data.shape[3] < 1:
            raise ValueError("need at least one frame and one body")


@dataclass
class BoneSequence:
    data: np.ndarray
    label: int
    mode: str
    topology: str = ""

    def __post_init__(self):
        _check_mode(self.mode)
        if self.data.ndim != 4:
            raise ValueError(f"bone sequence must be (C, T, E, M), got shape {self.data.shape}")
        if self.data.shape[0] != BONE_CHANNELS[self.mode]:
            raise ValueError(f"{self.mode} bones carry {BONE_CHANNELS[self.mode]} channels, got {self.data.shape[0]}")


# -- joints -> bones -----------------------------------------------------------

def bone_features(joints: np.ndarray, topo: SkeletonTopology, mode: str) -> np.ndarray:
    """Array form of the transform; channel axis is -4, joint axis -2.

    Centers are joint midpoints, orientation is joint_a - joint_b for bone
    (a, b), and in kinetics2d the bone confidence is the mean of the two
    joint confidences.
    """
    _check_mode(mode)
    if joints.shape[-2] != topo.num_joints:
        raise ValueError(f"sequence has {joints.shape[-2]} joints, topology {topo.name} has {topo.num_joints}")
    a = np.array([b[0] for b in topo.bones])
    b = np.array([b[1] for b in topo.bones])
    ja = np.take(joints, a, axis=-2)
    jb = np.take(joints, b, axis=-2)
    half = joints.dtype.type(0.5)
    d = COORD_DIMS[mode]
    coords = slice(0, d)
    center = (ja[..., coords, :, :, :] + jb[..., coords, :, :, :]) * half
    orient = ja[..., coords, :, :, :] - jb[..., coords, :, :, :]
    parts = [center]
    if mode == "kinetics2d":
        parts.append((ja[..., 2:3, :, :, :] + jb[..., 2:3, :, :, :]) * half)
    parts.append(orient)
    return np.concatenate(parts, axis=-4)


def joints_to_bones(seq: JointSequence, topo: SkeletonTopology) -> BoneSequence:
    if seq.topology and seq.topology != topo.name:
        raise ValueError(f"sequence is bound to topology {seq.topology!r}, not {topo.name!r}")
    expected_mode = MODE_OF_TOPOLOGY.get(topo.name)
    if expected_mode is not None and expected_mode != seq.mode:
        raise ValueError(f"topology {topo.name} is {expected_mode}, sequence is {seq.mode}")
    return BoneSequence(bone_features(seq.data, topo, seq.mode), seq.label, seq.mode, topo.name)


def normalize_input(x, norm, training: bool):
    """Per-channel batch normalization of a (N, C, T, S, M) batch tensor."""
    if x.shape[0] == 0:
        raise ValueError("cannot normalize an empty batch")
    return norm(x, training)


# -- synthetic data ----------------------------------------------------------

# (pivot joint, first moving joint): the moving set is the subtree below the pivot
_LIMBS = {
    "kinetics18": [(2, 3), (5, 6), (8, 9), (11, 12)],
    "ntu25": [(8, 9), (4, 5), (16, 17), (12, 13)],
}


def _subtree(topo: SkeletonTopology, parent: int, child: int) -> list[int]:
    out, stack = [], [child]
    seen = {parent}
    while stack:
        j = stack.pop()
        if j in seen:
            continue
        seen.add(j)
        out.append(j)
        stack.extend(topo.joint_neighbors(j))
    return sorted(out)


def limb_groups(topo: SkeletonTopology) -> list[tuple[int, list[int]]]:
    """(pivot, moving joints) per swinging limb."""
    pairs = _LIMBS.get(topo.name)
    if pairs is None:
        pairs = [(a, b) for a, b in topo.bones if 1 <= len(_subtree(topo, a, b)) <= topo.num_joints // 2] or [topo.bones[0]]
        pairs = pairs[:4]
    return [(p, _subtree(topo, p, c)) for p, c in pairs]


@dataclass
class SynthDataset:
    sequences: list[JointSequence]
    class_names: list[str]
    mode: str
    topology: str

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sequences], dtype=np.int64)

    def joints(self) -> np.ndarray:
        return np.stack([s.data for s in self.sequences])


def _rotate(points: np.ndarray, pivot: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rotate (T, J, D) points about ``pivot`` in the first two coordinates by per-frame ``angle`` (T,)."""
    rel = points - pivot
    c, s = np.cos(angle)[:, None], np.sin(angle)[:, None]
    out = rel.copy()
    out[..., 0] = c * rel[..., 0] - s * rel[..., 1]
    out[..., 1] = s * rel[..., 0] + c * rel[..., 1]
    return out + pivot


def synth_dataset(num_classes: int, samples_per_class: int, frames: int, topology: str | SkeletonTopology,
                  mode: str | None = None, seed: int = 0, noise: float = 0.02, bodies: int = 1,
                  style: str = "limbs", template: TemplatePose | None = None) -> SynthDataset:
    """Deterministic labeled motion sequences built from a template pose.

    ``style="limbs"``: class c swings limb ``c % L`` at ``1 + (c // L) % 3`` cycles
    per sequence. ``style="tempo"``: every class swings the same limb with the
    same amplitude and only the swing frequency differs (2, 3, 4, ... cycles),
    so single frames carry almost no class information.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if samples_per_class < 1 or frames < 1 or bodies < 1:
        raise ValueError("samples_per_class, frames and bodies must be positive")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    if style not in ("limbs", "tempo"):
        raise ValueError(f"unknown style {style!r}")
    topo = build_topology(topology) if isinstance(topology, str) else topology
    mode = mode or MODE_OF_TOPOLOGY.get(topo.name)
    if mode is None:
        raise ValueError(f"mode required for custom topology {topo.name}")
    _check_mode(mode)
    if template is None:
        template = load_template(topo.name)
    dims = COORD_DIMS[mode]
    if template.dim != dims:
        raise ValueError(f"template is {template.dim}-d but mode {mode} needs {dims}-d coordinates")
    limbs = limb_groups(topo)
    rng = rngs.stream(seed, "dataset")
    t = np.arange(frames) / frames
    base = template.joint_coords
    sequences, names = [], []
    for c in range(num_classes):
        if style == "limbs":
            limb = c % len(limbs)
            cycles = 1 + (c // len(limbs)) % 3
            amp = 0.6
        else:
            limb, cycles, amp = 0, 2 + c, 0.5
        pivot_joint, moving = limbs[limb]
        names.append(f"class{c}_limb{limb}_x{cycles}")
        for _ in range(samples_per_class):
            phase = rng.uniform(0, 2 * np.pi)
            angle = amp * np.sin(2 * np.pi * cycles * t + phase)
            pose = np.broadcast_to(base, (frames, *base.shape)).copy()
            pose[:, moving] = _rotate(pose[:, moving], base[pivot_joint], angle)
            data = np.zeros((JOINT_CHANNELS[mode], frames, topo.num_joints, bodies))
            for m in range(bodies):
                body = pose + np.array([1.5 * m] + [0.0] * (dims - 1))
                if noise > 0:
                    body = body + rng.normal(0.0, noise, size=body.shape)
                data[:dims, :, :, m] = body.transpose(2, 0, 1)
            if mode == "kinetics2d":
                data[2] = 1.0
            sequences.append(JointSequence(data.astype(np.float32), c, mode, topo.name))
    return SynthDataset(sequences, names, mode, topo.name)


# -- sequence files --------------------------------------------------------------

def save_sequence(path, seq: JointSequence | BoneSequence) -> None:
    kind = "joints" if isinstance(seq, JointSequence) else "bones"
    payload = np.ascontiguousarray(seq.data, dtype="<f4")
    meta = json.dumps({
        "kind": kind, "mode": seq.mode, "topology": seq.topology, "label": int(seq.label),
        "shape": list(payload.shape), "dtype": "<f4",
    }).encode("utf-8")
    header = SEQ_HEADER.pack(SEQ_MAGIC, SEQ_VERSION, 0, len(meta), payload.nbytes)
    with open(path, "wb") as fh:
        fh.write(header.ljust(SEQ_HEADER_SIZE, b"\0"))
        fh.write(meta)
        fh.write(payload.tobytes())


def load_sequence(path) -> JointSequence | BoneSequence:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < SEQ_HEADER_SIZE:
        raise SequenceFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, _, meta_len, payload_len = SEQ_HEADER.unpack_from(raw)
    if magic != SEQ_MAGIC:
        raise SequenceFormatError(f"{path}: not a sequence file")
    if version != SEQ_VERSION:
        raise SequenceFormatError(f"{path}: unsupported sequence version {version} (expected {SEQ_VERSION})")
    body = raw[SEQ_HEADER_SIZE:]
    if len(body) != meta_len + payload_len:
        raise SequenceFormatError(f"{path}: expected {meta_len + payload_len} bytes after header, found {len(body)}")
    try:
        meta = json.loads(body[:meta_len].decode("utf-8"))
        shape = tuple(int(s) for s in meta["shape"])
        kind, mode, label = meta["kind"], meta["mode"], int(meta["label"])
    except (ValueError, KeyError, TypeError) as exc:
        raise SequenceFormatError(f"{path}: malformed metadata block: {exc}") from exc
    if int(np.prod(shape)) * 4 != payload_len:
        raise SequenceFormatError(f"{path}: payload of {payload_len} bytes does not match shape {shape}")
    data = np.frombuffer(body, dtype="<f4", offset=meta_len).reshape(shape).astype(np.float32)
    cls = JointSequence if kind == "joints" else BoneSequence
    try:
        return cls(data, label, mode, meta.get("topology", ""))
    except ValueError as exc:
        raise SequenceFormatError(f"{path}: {exc}") from exc


@dataclass
class SampleRecord:
    path: str
    label: int
    frames: int


@dataclass
class DatasetManifest:
    root: Path
    samples: list[SampleRecord]
    class_names: list[str]
    mode: str
    topology: str
    kind: str = "joints"
    extra: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.samples)


def save_dataset(directory, sequences: Sequence[JointSequence | BoneSequence], class_names: Sequence[str],
                 topology: str, mode: str, extra: dict | None = None) -> DatasetManifest:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    kinds = {"joints" if isinstance(s, JointSequence) else "bones" for s in sequences}
    if len(kinds) != 1:
        raise ValueError("a dataset holds either joint or bone sequences, not both")
    records = []
    for i, seq in enumerate(sequences):
        if seq.mode != mode:
            raise ValueError(f"sample {i} is {seq.mode}, dataset is {mode}")
        if not 0 <= seq.label < len(class_names):
            raise ValueError(f"sample {i} label {seq.label} outside [0, {len(class_names)})")
        name = f"{i:06d}.seq"
        save_sequence(directory / name, seq)
        records.append(SampleRecord(name, int(seq.label), int(seq.data.shape[1])))
    manifest = DatasetManifest(directory, records, list(class_names), mode, topology, kinds.pop(), dict(extra or {}))
    write_manifest(manifest)
    return manifest


def write_manifest(manifest: DatasetManifest) -> None:
    doc = {
        "schema": MANIFEST_SCHEMA, "version": MANIFEST_VERSION, "kind": manifest.kind,
        "mode": manifest.mode, "topology": manifest.topology, "class_names": manifest.class_names,
        "extra": manifest.extra,
        "samples": [{"path": r.path, "label": r.label, "frames": r.frames} for r in manifest.samples],
    }
    (Path(manifest.root) / MANIFEST_NAME).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_manifest(directory) -> DatasetManifest:
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise SequenceFormatError(f"{path}: {exc}") from exc
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise SequenceFormatError(f"{path}: not a dataset manifest")
    if doc.get("version") != MANIFEST_VERSION:
        raise SequenceFormatError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    samples = [SampleRecord(s["path"], int(s["label"]), int(s["frames"])) for s in doc["samples"]]
    manifest = DatasetManifest(directory, samples, list(doc["class_names"]), doc["mode"], doc["topology"],
                               doc.get("kind", "joints"), doc.get("extra", {}))
    for s in samples:
        if not 0 <= s.label < manifest.num_classes:
            raise SequenceFormatError(f"{path}: label {s.label} outside [0, {manifest.num_classes})")
    return manifest


def iter_sequences(manifest: DatasetManifest) -> Iterator[JointSequence | BoneSequence]:
    """Stream samples one file at a time."""
    for record in manifest.samples:
        seq = load_sequence(Path(manifest.root) / record.path)
        if seq.mode != manifest.mode:
            raise SequenceFormatError(f"{record.path}: mode {seq.mode} differs from manifest mode {manifest.mode}")
        yield seq


def load_sequences(manifest: DatasetManifest) -> list[JointSequence | BoneSequence]:
    return list(iter_sequences(manifest))
