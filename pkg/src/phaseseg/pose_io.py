"""Pose sequence loading, validation, normalization, windowing and corruption."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

NUM_JOINTS = 16
PHASE_NAMES = ("steps", "drive", "throw", "recovery")

JOINT_NAMES = (
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "pelvis", "thorax",
    "upper_neck", "head_top", "r_wrist", "r_elbow", "r_shoulder", "l_shoulder",
    "l_elbow", "l_wrist",
)
PELVIS = 6
THORAX = 7

MPII_EDGES = (
    (0, 1), (1, 2), (2, 6), (5, 4), (4, 3), (3, 6),
    (6, 7), (7, 8), (8, 9),
    (10, 11), (11, 12), (12, 7), (15, 14), (14, 13), (13, 7),
)

_KNOWN_FIELDS = {"video_id", "fps", "keypoints", "labels"}


class DatasetError(ValueError):
    """Malformed or inconsistent dataset content."""


@dataclass(frozen=True, eq=False)
class PoseSequence:
    video_id: str
    frames: np.ndarray
    labels: np.ndarray | None = None
    fps: float | None = None

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[1:] != (NUM_JOINTS, 2):
            raise DatasetError(f"{self.video_id}: frames must be T x {NUM_JOINTS} x 2, got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            bad = int(np.argwhere(~np.isfinite(frames))[0, 0])
            raise DatasetError(f"{self.video_id}: non-finite coordinate at frame {bad}")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (frames.shape[0],):
                raise DatasetError(f"{self.video_id}: {labels.shape[0] if labels.ndim else 0} labels for {frames.shape[0]} frames")
            if labels.size and labels.min() < 0:
                raise DatasetError(f"{self.video_id}: negative label at frame {int(np.argmin(labels))}")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)
        if self.fps is not None and not self.fps > 0:
            raise DatasetError(f"{self.video_id}: fps must be positive")

    def __len__(self):
        return self.frames.shape[0]


@dataclass(frozen=True, eq=False)
class SkeletonGraph:
    joint_count: int = NUM_JOINTS
    edges: tuple = MPII_EDGES
    adjacency: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        adj = np.zeros((self.joint_count, self.joint_count))
        for a, b in self.edges:
            if a == b:
                raise ValueError(f"self loop at joint {a}")
            adj[a, b] = adj[b, a] = 1.0
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)

    def is_connected(self) -> bool:
        seen = {0}
        stack = [0]
        while stack:
            i = stack.pop()
            for j in np.flatnonzero(self.adjacency[i]):
                if j not in seen:
                    seen.add(int(j))
                    stack.append(int(j))
        return len(seen) == self.joint_count


MPII_GRAPH = SkeletonGraph()


@dataclass(frozen=True, eq=False)
class WindowBatch:
    windows: np.ndarray  # B x W x J x 2
    origins: list  # (video_id, start_frame) per window

    def __post_init__(self):
        if self.windows.ndim != 4 or len(self.origins) != self.windows.shape[0]:
            raise ValueError("windows must be B x W x J x 2 with one origin per window")

    def __len__(self):
        return self.windows.shape[0]


def _parse_labels(raw, video_id, num_classes):
    labels = []
    for t, v in enumerate(raw):
        if isinstance(v, str):
            try:
                v = PHASE_NAMES.index(v.lower())
            except ValueError:
                raise DatasetError(f"{video_id}: unknown phase name {v!r} at frame {t}") from None
        if isinstance(v, bool) or not isinstance(v, int):
            raise DatasetError(f"{video_id}: label at frame {t} is not an integer")
        if not 0 <= v < num_classes:
            raise DatasetError(f"{video_id}: label {v} out of range [0, {num_classes}) at frame {t}")
        labels.append(v)
    return np.asarray(labels, dtype=np.int64)


def parse_video(doc: dict, num_classes: int = len(PHASE_NAMES), source="<memory>") -> PoseSequence:
    if not isinstance(doc, dict) or "video_id" not in doc or "keypoints" not in doc:
        raise DatasetError(f"{source}: record needs 'video_id' and 'keypoints'")
    video_id = str(doc["video_id"])
    unknown = set(doc) - _KNOWN_FIELDS
    if unknown:
        log.warning("%s: ignoring unknown fields %s", video_id, sorted(unknown))
    kp = doc["keypoints"]
    if not isinstance(kp, list):
        raise DatasetError(f"{video_id}: keypoints must be a list of frames")
    for t, frame in enumerate(kp):
        if not isinstance(frame, list) or len(frame) != NUM_JOINTS:
            n = len(frame) if isinstance(frame, list) else "non-list"
            raise DatasetError(f"{video_id}: frame {t} has {n} joints, expected {NUM_JOINTS}")
        for j, pt in enumerate(frame):
            if not isinstance(pt, list) or len(pt) != 2:
                raise DatasetError(f"{video_id}: frame {t} joint {j} is not an (x, y) pair")
    frames = np.asarray(kp, dtype=np.float64).reshape(len(kp), NUM_JOINTS, 2)
    labels = None
    if doc.get("labels") is not None:
        labels = _parse_labels(doc["labels"], video_id, num_classes)
        if len(labels) != len(frames):
            raise DatasetError(f"{video_id}: {len(labels)} labels for {len(frames)} frames")
    fps = doc.get("fps")
    return PoseSequence(video_id, frames, labels, None if fps is None else float(fps))


def load_dataset(path, num_classes: int = len(PHASE_NAMES)) -> list[PoseSequence]:
    """Load every video listed by a manifest.

    ``path`` may be a manifest file, a directory holding ``manifest.json``, or a
    single video document.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    doc = json.loads(path.read_text())
    if isinstance(doc, dict) and "videos" in doc:
        num_classes = int(doc.get("num_classes", num_classes))
        seqs = []
        for rel in doc["videos"]:
            vpath = path.parent / rel
            if not vpath.exists():
                raise FileNotFoundError(f"video file not found: {vpath}")
            seqs.append(parse_video(json.loads(vpath.read_text()), num_classes, source=str(vpath)))
    else:
        seqs = [parse_video(doc, num_classes, source=str(path))]
    ids = [s.video_id for s in seqs]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate video_id in dataset")
    return sorted(seqs, key=lambda s: s.video_id)


def video_document(seq: PoseSequence) -> dict:
    doc = {"video_id": seq.video_id}
    if seq.fps is not None:
        doc["fps"] = seq.fps
    doc["keypoints"] = seq.frames.tolist()
    if seq.labels is not None:
        doc["labels"] = seq.labels.tolist()
    return doc


def write_dataset(seqs, directory, num_classes: int = len(PHASE_NAMES)) -> Path:
    """Write one JSON per video plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    (directory / "videos").mkdir(parents=True, exist_ok=True)
    rels = []
    for seq in sorted(seqs, key=lambda s: s.video_id):
        rel = f"videos/{seq.video_id}.json"
        (directory / rel).write_text(json.dumps(video_document(seq)))
        rels.append(rel)
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"version": 1, "num_classes": num_classes, "videos": rels}, indent=2))
    return manifest


def normalize_sequence(seq: PoseSequence) -> PoseSequence:
    """Center each frame on the pelvis and scale by the pelvis-thorax length."""
    frames = seq.frames - seq.frames[:, PELVIS:PELVIS + 1, :]
    torso = np.linalg.norm(frames[:, THORAX, :], axis=-1)
    bad = np.flatnonzero(~(torso > 0))
    if bad.size:
        raise DatasetError(f"{seq.video_id}: zero torso length at frame {int(bad[0])}")
    frames = frames / torso[:, None, None]
    return replace(seq, frames=frames)


def window_starts(T: int, W: int, stride: int) -> list[int]:
    if W < 2:
        raise ValueError(f"window length must be >= 2, got {W}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if T <= W:
        return [0]
    starts = list(range(0, T - W + 1, stride))
    if starts[-1] + stride < T:
        # trailing partial window, padded by repeating the last frame
        starts.append(starts[-1] + stride)
    return starts


def make_windows(seq: PoseSequence, W: int, stride: int) -> WindowBatch:
    T = len(seq)
    starts = window_starts(T, W, stride)
    idx = np.minimum(np.asarray(starts)[:, None] + np.arange(W)[None, :], T - 1)
    return WindowBatch(seq.frames[idx], [(seq.video_id, s) for s in starts])


def concat_batches(batches) -> WindowBatch:
    batches = list(batches)
    return WindowBatch(np.concatenate([b.windows for b in batches]), [o for b in batches for o in b.origins])


def corrupt(batch: WindowBatch, noise_factor: float, seed: int) -> WindowBatch:
    if noise_factor < 0:
        raise ValueError("noise_factor must be nonnegative")
    rng = np.random.default_rng(seed)
    noisy = batch.windows + noise_factor * rng.standard_normal(batch.windows.shape)
    return WindowBatch(noisy, list(batch.origins))


def sample_bins(T: int, n_bins: int, seed) -> np.ndarray:
    """Draw one frame uniformly from each of ``n_bins`` equal temporal bins."""
    if not 1 <= n_bins <= T:
        raise ValueError(f"need 1 <= n_bins <= T, got n_bins={n_bins}, T={T}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    edges = (np.arange(n_bins + 1) * T) // n_bins
    return np.array([rng.integers(edges[i], edges[i + 1]) for i in range(n_bins)], dtype=np.int64)
