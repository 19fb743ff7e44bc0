"""Skeleton motion data model, text formats, metrics and self-supervised input builders.

Coordinates are millimeters throughout. Arrays are ``float64`` with shape
``(T, N, 3)``; frame ``t`` joint ``j`` lives at ``frames[t, j]``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

MSEQ_MAGIC = "MSEQ v1"
SKEL_MAGIC = "SKEL v1"


class FormatError(ValueError):
    """Malformed MSEQ / SKEL / manifest text."""


class ShapeError(ValueError):
    """Array shapes disagree with a declared or required shape."""


@dataclass(frozen=True)
class SkeletonTopology:
    n_joints: int
    bones: tuple[tuple[int, int], ...]
    neighbors: dict[int, frozenset[int]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_joints < 1:
            raise ValueError(f"n_joints must be positive, got {self.n_joints}")
        bones = tuple((int(p), int(c)) for p, c in self.bones)
        adj: dict[int, set[int]] = {j: set() for j in range(self.n_joints)}
        for p, c in bones:
            if not (0 <= p < self.n_joints and 0 <= c < self.n_joints):
                raise ValueError(f"bone ({p}, {c}) out of range for {self.n_joints} joints")
            if p == c:
                raise ValueError(f"self-loop bone at joint {p}")
            adj[p].add(c)
            adj[c].add(p)
        object.__setattr__(self, "bones", bones)
        object.__setattr__(self, "neighbors", {j: frozenset(s) for j, s in adj.items()})

    @property
    def parents(self) -> np.ndarray:
        """Index array of bone parents, shape (n_bones,)."""
        return np.array([p for p, _ in self.bones], dtype=np.int64)

    @property
    def children(self) -> np.ndarray:
        return np.array([c for _, c in self.bones], dtype=np.int64)

    def permuted(self, perm: Iterable[int]) -> "SkeletonTopology":
        """Relabel joints so that old joint ``perm[k]`` becomes new joint ``k``."""
        perm = list(perm)
        inv = {old: new for new, old in enumerate(perm)}
        return SkeletonTopology(self.n_joints, tuple((inv[p], inv[c]) for p, c in self.bones))


@dataclass
class MotionSequence:
    frames: np.ndarray
    fps: float = 25.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[2] != 3 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ShapeError(f"frames must have shape (T>=1, N>=1, 3), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("frames contain non-finite coordinates")
        if not (self.fps > 0 and math.isfinite(self.fps)):
            raise ValueError(f"fps must be positive, got {self.fps}")
        self.frames = frames

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_joints(self) -> int:
        return self.frames.shape[1]

    def __eq__(self, other):
        if not isinstance(other, MotionSequence):
            return NotImplemented
        return self.fps == other.fps and np.array_equal(self.frames, other.frames)

    def slice(self, start: int, stop: int) -> "MotionSequence":
        return MotionSequence(self.frames[start:stop].copy(), self.fps)


@dataclass
class SampleTask:
    """One (observation, target) pair with its self-supervised companions."""

    observation: MotionSequence
    target: MotionSequence
    scrambled: MotionSequence
    scramble_label: int
    corrupted: MotionSequence
    corruption_mask: np.ndarray
    subject_id: str = ""
    category_id: str = ""
    name: str = ""


@dataclass
class DatasetManifest:
    entries: list[tuple[str, str, str]]
    topology_path: str
    root: str = "."

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.root, path)

    def subjects(self) -> list[str]:
        return sorted({s for _, s, _ in self.entries})

    def categories(self) -> list[str]:
        return sorted({c for _, _, c in self.entries})

    def subset(self, entries: list[tuple[str, str, str]]) -> "DatasetManifest":
        return DatasetManifest(list(entries), self.topology_path, self.root)


# ---------------------------------------------------------------------------
# Text formats


def _fmt(x: float) -> str:
    # repr() is the shortest string that parses back to the same double
    return repr(float(x))


def _fmt_fps(fps: float) -> str:
    return str(int(fps)) if float(fps).is_integer() else _fmt(fps)


def write_motion_file(seq: MotionSequence) -> bytes:
    T, N, _ = seq.frames.shape
    lines = [MSEQ_MAGIC, f"{T} {N} {_fmt_fps(seq.fps)}"]
    for row in seq.frames.reshape(T, N * 3):
        lines.append(" ".join(_fmt(v) for v in row))
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_motion_file(data: bytes | str) -> MotionSequence:
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2 or lines[0].strip() != MSEQ_MAGIC:
        raise FormatError(f"expected '{MSEQ_MAGIC}' header line")
    head = lines[1].split()
    if len(head) != 3:
        raise FormatError(f"expected 'T N FPS' on line 2, got {lines[1]!r}")
    try:
        T, N = int(head[0]), int(head[1])
        fps = float(head[2])
    except ValueError as exc:
        raise FormatError(f"bad header values {lines[1]!r}") from exc
    if T < 1 or N < 1 or not (fps > 0 and math.isfinite(fps)):
        raise FormatError(f"bad header values {lines[1]!r}")
    rows = lines[2:]
    if len(rows) != T:
        raise ShapeError(f"header declares T={T} rows, found {len(rows)}")
    frames = np.empty((T, 3 * N), dtype=np.float64)
    for t, row in enumerate(rows):
        tokens = row.split()
        if len(tokens) != 3 * N:
            raise ShapeError(f"row {t} has {len(tokens)} values, expected {3 * N}")
        try:
            frames[t] = [float(tok) for tok in tokens]
        except ValueError as exc:
            raise FormatError(f"row {t}: {exc}") from exc
    if not np.all(np.isfinite(frames)):
        raise ValueError("non-finite coordinate in motion file")
    return MotionSequence(frames.reshape(T, N, 3), fps)


def write_skeleton_file(topo: SkeletonTopology) -> bytes:
    lines = [SKEL_MAGIC, str(topo.n_joints)] + [f"{p} {c}" for p, c in topo.bones]
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_skeleton_file(data: bytes | str) -> SkeletonTopology:
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2 or lines[0].strip() != SKEL_MAGIC:
        raise FormatError(f"expected '{SKEL_MAGIC}' header line")
    try:
        n = int(lines[1])
        bones = []
        for ln in lines[2:]:
            p, c = ln.split()
            bones.append((int(p), int(c)))
    except ValueError as exc:
        raise FormatError(f"bad skeleton file: {exc}") from exc
    return SkeletonTopology(n, tuple(bones))


MANIFEST_NAME = "manifest.tsv"
SKELETON_NAME = "skeleton.skel"


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = [f"{p}\t{s}\t{c}" for p, s, c in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a manifest; ``path`` may be the TSV file or its directory.

    The topology is expected as ``skeleton.skel`` next to the manifest.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    for lineno, ln in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not ln.strip() or ln.startswith("#"):
            continue
        parts = ln.split("\t")
        if len(parts) != 3 or not all(parts):
            raise FormatError(f"{path}:{lineno}: expected path<TAB>subject<TAB>category")
        entries.append((parts[0], parts[1], parts[2]))
    root = str(path.parent)
    return DatasetManifest(entries, os.path.join(root, SKELETON_NAME), root)


def read_motion(path: str | Path) -> MotionSequence:
    return parse_motion_file(Path(path).read_bytes())


def read_skeleton(path: str | Path) -> SkeletonTopology:
    return parse_skeleton_file(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Metrics


def _frames(x) -> np.ndarray:
    return x.frames if isinstance(x, MotionSequence) else np.asarray(x, dtype=np.float64)


def mpjpe(pred, gt) -> float:
    """Mean per-joint position error, in the units of the inputs (mm)."""
    a, b = _frames(pred), _frames(gt)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.linalg.norm(a - b, axis=-1)))


def mpjpe_per_frame(pred, gt) -> np.ndarray:
    a, b = _frames(pred), _frames(gt)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return np.linalg.norm(a - b, axis=-1).mean(axis=-1)


def bone_lengths(x, topo: SkeletonTopology) -> np.ndarray:
    """Per-frame bone lengths, shape (T, n_bones)."""
    f = _frames(x)
    return np.linalg.norm(f[:, topo.children] - f[:, topo.parents], axis=-1)


def bone_length_loss(a, b, topo: SkeletonTopology) -> float:
    fa, fb = _frames(a), _frames(b)
    if fa.shape != fb.shape:
        raise ShapeError(f"shape mismatch {fa.shape} vs {fb.shape}")
    if fa.shape[1] != topo.n_joints:
        raise ShapeError(f"sequence has {fa.shape[1]} joints, topology {topo.n_joints}")
    if not topo.bones:
        return 0.0
    return float(np.mean(np.abs(bone_lengths(fa, topo) - bone_lengths(fb, topo))))


# ---------------------------------------------------------------------------
# Self-supervised constructors


def scramble_permutation(n_frames: int, rng: np.random.Generator) -> np.ndarray | None:
    """Draw the scramble decision: ``None`` for the intact branch, else a non-identity permutation."""
    if n_frames < 2:
        raise ValueError("scrambling needs at least 2 frames")
    if rng.random() < 0.5:
        return None
    identity = np.arange(n_frames)
    while True:
        perm = rng.permutation(n_frames)
        if not np.array_equal(perm, identity):
            return perm


def make_scrambled(obs: MotionSequence, rng: np.random.Generator) -> tuple[MotionSequence, int]:
    perm = scramble_permutation(obs.n_frames, rng)
    if perm is None:
        return MotionSequence(obs.frames.copy(), obs.fps), 0
    return MotionSequence(obs.frames[perm], obs.fps), 1


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_corrupted(
    obs: MotionSequence, ratio: float, rng: np.random.Generator
) -> tuple[MotionSequence, np.ndarray]:
    if not 0 <= ratio < 1:
        raise ValueError(f"corruption ratio must lie in [0, 1), got {ratio}")
    T, N, _ = obs.frames.shape
    k = round_half_up(ratio * T * N)
    mask = np.zeros(T * N, dtype=bool)
    if k:
        mask[rng.choice(T * N, size=k, replace=False)] = True
    mask = mask.reshape(T, N)
    frames = obs.frames.copy()
    frames[mask] = 0.0
    return MotionSequence(frames, obs.fps), mask


def pad_with_seed(obs: MotionSequence, horizon: int) -> MotionSequence:
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    tail = np.repeat(obs.frames[-1:], horizon, axis=0)
    return MotionSequence(np.concatenate([obs.frames, tail], axis=0), obs.fps)


def make_task(
    observation: MotionSequence,
    target: MotionSequence,
    rng: np.random.Generator,
    corruption_ratio: float = 0.2,
    subject_id: str = "",
    category_id: str = "",
    name: str = "",
) -> SampleTask:
    """Build a SampleTask; the scramble draw comes first, then the corruption draw."""
    scrambled, label = make_scrambled(observation, rng)
    corrupted, mask = make_corrupted(observation, corruption_ratio, rng)
    return SampleTask(
        observation=observation,
        target=target,
        scrambled=scrambled,
        scramble_label=label,
        corrupted=corrupted,
        corruption_mask=mask,
        subject_id=subject_id,
        category_id=category_id,
        name=name,
    )


def split_sequence(seq: MotionSequence, obs_len: int, horizon: int) -> tuple[MotionSequence, MotionSequence]:
    """Cut a stored clip into (observation, target); the clip must hold obs_len + horizon frames."""
    if seq.n_frames < obs_len + horizon:
        raise ShapeError(f"clip has {seq.n_frames} frames, need {obs_len + horizon}")
    return seq.slice(0, obs_len), seq.slice(obs_len, obs_len + horizon)
