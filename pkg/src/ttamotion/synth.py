"""Forward-kinematics oscillator corpus standing in for real motion capture.

A category fixes per-bone oscillation amplitudes, phases, rest posture and a
dominant frequency; a subject fixes bone-length scaling and a rhythm
multiplier. Each clip is a random time window of the resulting motion.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .motion import (
    MANIFEST_NAME,
    SKELETON_NAME,
    DatasetManifest,
    MotionSequence,
    SkeletonTopology,
    write_motion_file,
    write_skeleton_file,
)

# 17-joint layout in the usual hip-rooted ordering; y is up, millimetres
H36M_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)
H36M_OFFSETS = np.array([
    [0, 0, 0],
    [-130, 0, 0], [0, -450, 0], [0, -440, 0],
    [130, 0, 0], [0, -450, 0], [0, -440, 0],
    [0, 230, 0], [0, 250, 0], [0, 110, 0], [0, 110, 0],
    [150, 0, 0], [0, -280, 0], [0, -250, 0],
    [-150, 0, 0], [0, -280, 0], [0, -250, 0],
], dtype=np.float64)

# dominant frequencies (Hz) handed out to categories in order
BASE_FREQS = (0.6, 1.3, 2.0, 2.7, 3.4, 4.1, 0.95, 1.65, 2.35, 3.05, 3.75)


@dataclass
class SynthSpec:
    n_categories: int = 4
    n_subjects: int = 3
    seqs_per_pair: int = 20
    n_joints: int = 17
    T: int = 25
    horizon: int = 25
    fps: float = 25.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_categories", "n_subjects", "seqs_per_pair", "n_joints", "T", "horizon"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.fps <= 0:
            raise ValueError("fps must be positive")


def skeleton_for(n_joints: int, rng: np.random.Generator) -> tuple[tuple[int, ...], np.ndarray]:
    """Parent array and rest offsets; the 17-joint case uses the fixed human layout."""
    if n_joints == 17:
        return H36M_PARENTS, H36M_OFFSETS.copy()
    parents = (-1,) + tuple((j - 1) // 2 for j in range(1, n_joints))
    dirs = rng.normal(size=(n_joints, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    offsets = dirs * rng.uniform(150, 400, size=(n_joints, 1))
    offsets[0] = 0
    return parents, offsets


def topology_from_parents(parents) -> SkeletonTopology:
    return SkeletonTopology(len(parents), tuple((p, j) for j, p in enumerate(parents) if p >= 0))


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def forward_kinematics(parents, offsets: np.ndarray, angles: np.ndarray, root: np.ndarray) -> np.ndarray:
    """Joint positions ``(T, N, 3)`` from per-joint (x, z) local angles ``(T, N, 2)``.

    Joint j's bone is its rest offset rotated by the accumulated rotation down to j,
    so every bone keeps its rest length exactly.
    """
    T, N = angles.shape[:2]
    pos = np.zeros((T, N, 3))
    rot = np.zeros((T, N, 3, 3))
    for j in range(N):
        local = _rot_x(angles[:, j, 0]) @ _rot_z(angles[:, j, 1])
        p = parents[j]
        if p < 0:
            rot[:, j] = local
            pos[:, j] = root
        else:
            rot[:, j] = rot[:, p] @ local
            pos[:, j] = pos[:, p] + rot[:, j] @ offsets[j]
    return pos


@dataclass
class _Category:
    freq: float
    amp: np.ndarray      # (N, 2)
    phase: np.ndarray    # (N, 2)
    phase2: np.ndarray   # (N, 2)
    posture: np.ndarray  # (N, 2)
    bob: float


@dataclass
class _Subject:
    scale: np.ndarray    # (N,)
    rhythm: float


def _category(k: int, n: int, rng) -> _Category:
    freq = BASE_FREQS[k % len(BASE_FREQS)] + 0.05 * (k // len(BASE_FREQS))
    return _Category(
        freq=freq,
        amp=rng.uniform(0.1, 0.5, size=(n, 2)),
        phase=rng.uniform(0, 2 * np.pi, size=(n, 2)),
        phase2=rng.uniform(0, 2 * np.pi, size=(n, 2)),
        posture=rng.uniform(-0.3, 0.3, size=(n, 2)),
        bob=rng.uniform(10, 40),
    )


def _subject(n: int, rng) -> _Subject:
    return _Subject(scale=rng.uniform(0.85, 1.15) * rng.uniform(0.95, 1.05, size=n),
                    rhythm=rng.uniform(0.8, 1.2))


def render_clip(parents, offsets, cat: _Category, subj: _Subject, t0: float, n_frames: int, fps: float) -> np.ndarray:
    t = t0 + np.arange(n_frames) / fps
    w = 2 * np.pi * cat.freq * subj.rhythm * t[:, None, None]
    angles = cat.posture + cat.amp * np.sin(w + cat.phase) + 0.3 * cat.amp * np.sin(2 * w + cat.phase2)
    angles[:, 0] = 0.0
    root = np.zeros((n_frames, 3))
    root[:, 1] = cat.bob * np.sin(2 * np.pi * cat.freq * subj.rhythm * t)
    return forward_kinematics(parents, offsets * subj.scale[:, None], angles, root)


def gen_synthetic(spec: SynthSpec, out_dir=None) -> tuple[DatasetManifest, dict[str, bytes]]:
    """Generate the corpus; returns the manifest and ``{relative path: file bytes}``.

    Files (skeleton, clips, manifest) are also written under ``out_dir`` when given.
    """
    rng = np.random.default_rng(spec.seed)
    parents, offsets = skeleton_for(spec.n_joints, rng)
    topo = topology_from_parents(parents)
    cats = [_category(k, spec.n_joints, rng) for k in range(spec.n_categories)]
    subjects = [_subject(spec.n_joints, rng) for _ in range(spec.n_subjects)]
    n_frames = spec.T + spec.horizon

    files: dict[str, bytes] = {SKELETON_NAME: write_skeleton_file(topo)}
    entries = []
    for ci, cat in enumerate(cats):
        for si, subj in enumerate(subjects):
            for m in range(spec.seqs_per_pair):
                t0 = float(rng.uniform(0, 20))
                frames = render_clip(parents, offsets, cat, subj, t0, n_frames, spec.fps)
                path = f"clips/C{ci + 1}_S{si + 1}_{m:03d}.mseq"
                files[path] = write_motion_file(MotionSequence(frames, spec.fps))
                entries.append((path, f"S{si + 1}", f"C{ci + 1}"))
    manifest = DatasetManifest(entries, SKELETON_NAME, ".")
    lines = "".join(f"{p}\t{s}\t{c}\n" for p, s, c in entries)
    files[MANIFEST_NAME] = lines.encode("utf-8")
    if out_dir is not None:
        out = Path(out_dir)
        (out / "clips").mkdir(parents=True, exist_ok=True)
        for rel, data in files.items():
            (out / rel).write_bytes(data)
        manifest = DatasetManifest(entries, str(out / SKELETON_NAME), str(out))
    return manifest, files
