"""Motion sequences: containers, MSEQ/CSV I/O, resampling, windowing and synthetic skeletons."""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadMagicError, DataError, TruncatedFileError, VersionMismatchError

MSEQ_MAGIC = b"MSEQ"
MSEQ_VERSION = 1
# Synthetic skeletons are laid out in metres and stored in decimetres so that
# joint coordinates sit near unit scale for the embedders.
SYNTH_UNITS_PER_METRE = 10.0

_MSEQ_HEADER = struct.Struct("<IIIQi")  # fps, joints, coords, frames, class_label
MSEQ_HEADER_SIZE = len(MSEQ_MAGIC) + 1 + _MSEQ_HEADER.size


@dataclass
class MotionSequence:
    """A frames x joints x coords trajectory sampled at ``fps``."""

    coords: np.ndarray
    fps: int
    class_label: int | None = None
    name: str = ""

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float32)
        if c.ndim != 3:
            raise DataError(f"coords must be frames x joints x coords, got shape {c.shape}")
        if c.shape[0] < 2:
            raise DataError("a motion sequence needs at least 2 frames")
        if c.shape[1] < 1 or c.shape[2] < 1:
            raise DataError(f"joint and coordinate counts must be positive, got {c.shape}")
        if not np.isfinite(c).all():
            raise DataError("coordinates must be finite")
        if int(self.fps) <= 0:
            raise DataError("fps must be positive")
        self.coords = c
        self.fps = int(self.fps)

    @property
    def frames(self) -> int:
        return self.coords.shape[0]

    @property
    def joint_count(self) -> int:
        return self.coords.shape[1]

    @property
    def coord_count(self) -> int:
        return self.coords.shape[2]


@dataclass
class SampleWindow:
    past: np.ndarray
    future: np.ndarray
    source: str = ""
    start: int = 0
    label: int | None = None


@dataclass
class SkeletonSpec:
    """Kinematic tree; ``offsets[j]`` is the rest-pose bone vector from parent to joint j."""

    names: list
    parents: list
    offsets: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        n = len(self.names)
        if n == 0:
            raise DataError("skeleton has no joints")
        if len(self.parents) != n or self.offsets.shape != (n, 3):
            raise DataError("names, parents and offsets must describe the same joints")
        roots = [j for j, p in enumerate(self.parents) if p == -1]
        if len(roots) != 1:
            raise DataError(f"skeleton needs exactly one root, found {len(roots)}")
        for j, p in enumerate(self.parents):
            if p != -1 and not 0 <= p < n:
                raise DataError(f"joint {j} has invalid parent {p}")
        self.order = self._topological_order()

    def _topological_order(self) -> list:
        children = {j: [] for j in range(len(self.parents))}
        for j, p in enumerate(self.parents):
            if p >= 0:
                children[p].append(j)
        order, stack = [], [self.parents.index(-1)]
        while stack:
            j = stack.pop()
            order.append(j)
            stack.extend(reversed(children[j]))
        if len(order) != len(self.parents):
            raise DataError("parent indices contain a cycle")
        return order

    @property
    def joint_count(self) -> int:
        return len(self.names)

    @property
    def root(self) -> int:
        return self.order[0]

    @property
    def bone_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.offsets, axis=1)

    @classmethod
    def humanoid22(cls) -> "SkeletonSpec":
        joints = [
            ("pelvis", -1, (0, 0, 0)),
            ("r_hip", 0, (-0.10, 0, 0)), ("r_knee", 1, (0, -0.45, 0)),
            ("r_ankle", 2, (0, -0.42, 0)), ("r_toe", 3, (0, -0.05, 0.12)),
            ("l_hip", 0, (0.10, 0, 0)), ("l_knee", 5, (0, -0.45, 0)),
            ("l_ankle", 6, (0, -0.42, 0)), ("l_toe", 7, (0, -0.05, 0.12)),
            ("spine", 0, (0, 0.22, 0)), ("thorax", 9, (0, 0.25, 0)),
            ("neck", 10, (0, 0.10, 0)), ("head", 11, (0, 0.12, 0.02)),
            ("head_top", 12, (0, 0.10, 0)),
            ("l_shoulder", 10, (0.17, 0.03, 0)), ("l_elbow", 14, (0.28, 0, 0)),
            ("l_wrist", 15, (0.25, 0, 0)), ("l_hand", 16, (0.08, 0, 0)),
            ("r_shoulder", 10, (-0.17, 0.03, 0)), ("r_elbow", 18, (-0.28, 0, 0)),
            ("r_wrist", 19, (-0.25, 0, 0)), ("r_hand", 20, (-0.08, 0, 0)),
        ]
        return cls._from_rows(joints)

    @classmethod
    def humanoid10(cls) -> "SkeletonSpec":
        joints = [
            ("pelvis", -1, (0, 0, 0)),
            ("r_knee", 0, (-0.10, -0.45, 0)), ("r_foot", 1, (0, -0.45, 0.05)),
            ("l_knee", 0, (0.10, -0.45, 0)), ("l_foot", 3, (0, -0.45, 0.05)),
            ("thorax", 0, (0, 0.50, 0)),
            ("l_elbow", 5, (0.40, 0.02, 0)), ("l_hand", 6, (0.30, 0, 0)),
            ("r_elbow", 5, (-0.40, 0.02, 0)), ("r_hand", 8, (-0.30, 0, 0)),
        ]
        return cls._from_rows(joints)

    @classmethod
    def named(cls, name: str) -> "SkeletonSpec":
        builders = {"humanoid22": cls.humanoid22, "humanoid10": cls.humanoid10}
        if name not in builders:
            raise DataError(f"unknown skeleton {name!r}; choose from {sorted(builders)}")
        return builders[name]()

    @classmethod
    def _from_rows(cls, rows) -> "SkeletonSpec":
        names, parents, offsets = zip(*rows)
        offsets = np.array(offsets, dtype=np.float64) * SYNTH_UNITS_PER_METRE
        return cls(list(names), list(parents), offsets)


# ---------------------------------------------------------------------------
# binary and CSV I/O

def write_sequence(path, seq: MotionSequence) -> None:
    label = -1 if seq.class_label is None else int(seq.class_label)
    header = MSEQ_MAGIC + bytes([MSEQ_VERSION]) + _MSEQ_HEADER.pack(
        seq.fps, seq.joint_count, seq.coord_count, seq.frames, label)
    payload = np.ascontiguousarray(seq.coords, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_sequence(path) -> MotionSequence:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MSEQ_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MSEQ_MAGIC!r}")
    if len(raw) < MSEQ_HEADER_SIZE:
        raise TruncatedFileError(
            f"{path}: header needs {MSEQ_HEADER_SIZE} bytes, file has {len(raw)}")
    if raw[4] != MSEQ_VERSION:
        raise VersionMismatchError(f"{path}: version {raw[4]}, expected {MSEQ_VERSION}")
    fps, joints, k, frames, label = _MSEQ_HEADER.unpack_from(raw, 5)
    need = frames * joints * k * 4
    have = len(raw) - MSEQ_HEADER_SIZE
    if have < need:
        raise TruncatedFileError(
            f"{path}: payload at byte offset {MSEQ_HEADER_SIZE} should span {need} bytes "
            f"(to offset {MSEQ_HEADER_SIZE + need}) but file ends at offset {len(raw)}")
    coords = np.frombuffer(raw, dtype="<f4", count=frames * joints * k, offset=MSEQ_HEADER_SIZE)
    return MotionSequence(coords.reshape(frames, joints, k).astype(np.float32), fps,
                          None if label < 0 else label, name=Path(path).stem)


def sequence_io(path, mode: str, seq: MotionSequence | None = None):
    """Read or write one MSEQ file; ``mode`` is ``"read"`` or ``"write"``."""
    if mode == "read":
        return read_sequence(path)
    if mode == "write":
        if seq is None:
            raise ValueError("write mode needs a sequence")
        write_sequence(path, seq)
        return None
    raise ValueError(f"mode must be 'read' or 'write', got {mode!r}")


def csv_import(path, fps: int, joints: int, coords: int = 3, class_label: int | None = None) -> MotionSequence:
    """Load one-frame-per-row CSV with joint-major columns. A non-numeric first row is a header."""
    width = joints * coords
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                values = [float(cell) for cell in row]
            except ValueError:
                if i == 0:
                    continue
                raise DataError(f"{path}: non-numeric cell in row {i}") from None
            if len(values) != width:
                raise DataError(f"{path}: ragged row {i} has {len(values)} fields, expected {width}")
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64).reshape(len(rows), joints, coords)
    return MotionSequence(arr, fps, class_label, name=Path(path).stem)


def write_dataset(directory, sequences: Sequence[MotionSequence]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for i, seq in enumerate(sequences):
        fname = f"seq_{i:05d}.mseq"
        write_sequence(directory / fname, seq)
        index.append({"file": fname, "label": seq.class_label})
    (directory / "index.json").write_text(json.dumps(index, indent=1) + "\n")
    return directory / "index.json"


def read_dataset(directory) -> list:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.is_file():
        raise DataError(f"no dataset index at {index_path}")
    sequences = []
    for entry in json.loads(index_path.read_text()):
        seq = read_sequence(directory / entry["file"])
        seq.class_label = entry.get("label")
        sequences.append(seq)
    return sequences


# ---------------------------------------------------------------------------
# preprocessing

def downsample(seq: MotionSequence, target_fps: int) -> MotionSequence:
    if target_fps <= 0 or seq.fps % target_fps:
        raise DataError(f"cannot downsample {seq.fps} fps to {target_fps} fps with an integer stride")
    stride = seq.fps // target_fps
    return MotionSequence(seq.coords[::stride].copy(), target_fps, seq.class_label, seq.name)


def window_split(seq: MotionSequence, past: int, future: int, stride: int = 1) -> list:
    """Cut contiguous (past, future) windows at offsets 0, stride, 2*stride, ..."""
    if past < 2 or future < 1 or stride < 1:
        raise DataError("need past >= 2, future >= 1 and stride >= 1")
    span = past + future
    if seq.frames < span:
        return []
    out = []
    for start in range(0, seq.frames - span + 1, stride):
        block = seq.coords[start:start + span]
        out.append(SampleWindow(block[:past].copy(), block[past:].copy(), seq.name, start, seq.class_label))
    return out


def center_window(window: SampleWindow, root: int = 0) -> SampleWindow:
    """Subtract the root position of the last past frame from every frame of the window."""
    anchor = window.past[-1, root].copy()
    return SampleWindow(window.past - anchor, window.future - anchor, window.source, window.start, window.label)


def stack_windows(windows: Sequence[SampleWindow]) -> tuple:
    past = np.stack([w.past for w in windows])
    future = np.stack([w.future for w in windows])
    labels = np.array([-1 if w.label is None else w.label for w in windows])
    return past, future, labels


def valid_horizons(fps: int, upto: int = 1000) -> list:
    period = 1000 // math.gcd(1000, fps)
    return list(range(period, max(upto, period) + 1, period))


def ms_to_frame(ms: int, fps: int) -> int:
    """Map a horizon in milliseconds to a 1-based index into the future window."""
    if fps <= 0 or ms <= 0 or (ms * fps) % 1000:
        raise DataError(f"{ms} ms is not aligned to {fps} fps frames; valid horizons: "
                        f"{valid_horizons(fps, max(int(ms), 1000)) if fps > 0 else []}")
    return ms * fps // 1000


def split_sequences(sequences: Sequence[MotionSequence], test_fraction: float, seed: int) -> tuple:
    """Stratified-by-label split of whole sequences into (train, test)."""
    rng = np.random.default_rng(seed)
    groups: dict = {}
    for i, s in enumerate(sequences):
        groups.setdefault(s.class_label, []).append(i)
    train, test = [], []
    for label in sorted(groups, key=lambda x: (x is None, x)):
        idx = np.array(groups[label])
        rng.shuffle(idx)
        n_test = int(round(test_fraction * len(idx)))
        test.extend(idx[:n_test].tolist())
        train.extend(idx[n_test:].tolist())
    return [sequences[i] for i in sorted(train)], [sequences[i] for i in sorted(test)]


# ---------------------------------------------------------------------------
# synthetic generator

def _rotations(angles: np.ndarray) -> np.ndarray:
    """(..., 3) xyz Euler angles -> (..., 3, 3) matrices Rz @ Ry @ Rx."""
    cx, cy, cz = np.cos(angles[..., 0]), np.cos(angles[..., 1]), np.cos(angles[..., 2])
    sx, sy, sz = np.sin(angles[..., 0]), np.sin(angles[..., 1]), np.sin(angles[..., 2])
    r = np.empty(angles.shape[:-1] + (3, 3))
    r[..., 0, 0] = cz * cy
    r[..., 0, 1] = cz * sy * sx - sz * cx
    r[..., 0, 2] = cz * sy * cx + sz * sx
    r[..., 1, 0] = sz * cy
    r[..., 1, 1] = sz * sy * sx + cz * cx
    r[..., 1, 2] = sz * sy * cx - cz * sx
    r[..., 2, 0] = -sy
    r[..., 2, 1] = cy * sx
    r[..., 2, 2] = cy * cx
    return r


def forward_kinematics(spec: SkeletonSpec, local_rot: np.ndarray, root_pos: np.ndarray) -> np.ndarray:
    """(F, J, 3, 3) local rotations + (F, 3) root path -> (F, J, 3) joint positions."""
    frames = local_rot.shape[0]
    glob = np.empty_like(local_rot)
    pos = np.empty((frames, spec.joint_count, 3))
    for j in spec.order:
        p = spec.parents[j]
        if p < 0:
            glob[:, j] = local_rot[:, j]
            pos[:, j] = root_pos + np.einsum("fab,b->fa", glob[:, j], spec.offsets[j])
        else:
            glob[:, j] = glob[:, p] @ local_rot[:, j]
            pos[:, j] = pos[:, p] + np.einsum("fab,b->fa", glob[:, j], spec.offsets[j])
    return pos


def synth_generate(spec: SkeletonSpec, classes: int, per_class: int, frames: int, seed: int,
                   fps: int = 50) -> list:
    """Deterministic periodic skeleton motions with one frequency/amplitude signature per class.

    Each class fixes a base frequency, a set of active joints with per-axis
    swing amplitudes and phases, and a walking speed. Each sequence perturbs
    these slightly and draws a fresh global phase and heading, then poses the
    skeleton by forward kinematics, so bone lengths hold exactly.
    """
    if spec.joint_count == 0:
        raise DataError("skeleton has no joints")
    if classes < 1 or per_class < 1 or frames < 2:
        raise DataError("need classes >= 1, per_class >= 1 and frames >= 2")
    J = spec.joint_count
    base_freq = np.linspace(0.6, 1.8, classes) if classes > 1 else np.array([1.0])
    t = np.arange(frames) / fps
    out = []
    for c in range(classes):
        crng = np.random.default_rng([seed, 0, c])
        active = crng.random(J) < 0.6
        active[spec.root] = False
        amp = crng.uniform(0.15, 0.7, size=(J, 3)) * active[:, None] * (crng.random((J, 3)) < 0.7)
        phase = crng.uniform(0, 2 * np.pi, size=(J, 3))
        speed = crng.uniform(0.0, 0.6) * SYNTH_UNITS_PER_METRE
        bob = crng.uniform(0.0, 0.05) * SYNTH_UNITS_PER_METRE
        for i in range(per_class):
            srng = np.random.default_rng([seed, 1, c, i])
            freq = base_freq[c] * (1.0 + 0.05 * srng.standard_normal())
            jitter = 1.0 + 0.1 * srng.standard_normal((J, 3))
            psi = srng.uniform(0, 2 * np.pi)
            heading = srng.uniform(0, 2 * np.pi)
            wt = 2 * np.pi * freq * t[:, None, None] + phase[None] + psi
            angles = amp[None] * jitter[None] * np.sin(wt)
            angles[:, spec.root] = 0.0
            angles[:, spec.root, 1] = heading + 0.1 * np.sin(2 * np.pi * 0.25 * t + psi)
            direction = np.array([np.sin(heading), 0.0, np.cos(heading)])
            root = (speed * t[:, None] * direction[None]
                    + np.array([0.0, 1.0, 0.0]) * bob * np.sin(4 * np.pi * freq * t + psi)[:, None])
            coords = forward_kinematics(spec, _rotations(angles), root)
            out.append(MotionSequence(coords, fps, c, name=f"c{c}_s{i}"))
    return out


def prepare_windows(sequences: Sequence[MotionSequence], past: int, future: int, fps: int,
                    stride: int = 1, center: bool = True) -> list:
    """Resample every sequence to ``fps`` and cut (optionally root-centred) windows."""
    out = []
    for seq in sequences:
        if seq.fps != fps:
            seq = downsample(seq, fps)
        for w in window_split(seq, past, future, stride):
            out.append(center_window(w) if center else w)
    return out
