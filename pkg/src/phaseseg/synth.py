"""Synthetic labelled pose sequences with phase-specific joint oscillations."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .pose_io import NUM_JOINTS, PoseSequence

# Rough upright MPII pose in torso units (y up), pelvis at the origin.
BASE_POSE = np.array([
    [-0.25, -1.9], [-0.25, -1.0], [-0.2, 0.0], [0.2, 0.0], [0.25, -1.0], [0.25, -1.9],
    [0.0, 0.0], [0.0, 1.0], [0.0, 1.25], [0.0, 1.6],
    [-0.5, 0.2], [-0.5, 0.6], [-0.35, 1.0], [0.35, 1.0], [0.5, 0.6], [0.5, 0.2],
])

LIMB_JOINTS = np.array([0, 1, 4, 5, 9, 10, 11, 14, 15])


@dataclass(frozen=True)
class SynthSpec:
    num_videos: int = 20
    frames_per_phase: tuple = (25, 25)
    num_classes: int = 4
    amplitude: float = 0.2
    base_frequency: float = 0.04
    posture_shift: float = 0.6
    noise: float = 0.01
    seed: int = 0
    camera: bool = True  # random pixel scale/offset per video; False keeps torso units

    def __post_init__(self):
        lo, hi = self.frames_per_phase
        object.__setattr__(self, "frames_per_phase", (int(lo), int(hi)))
        if self.num_classes < 2:
            raise ValueError("need at least 2 phases")
        if not 1 <= lo <= hi:
            raise ValueError("frames_per_phase must be a nonempty range (lo <= hi)")
        if self.num_videos < 1:
            raise ValueError("num_videos must be >= 1")
        if self.noise < 0 or self.amplitude < 0:
            raise ValueError("noise and amplitude must be nonnegative")

    def to_dict(self):
        d = asdict(self)
        d["frames_per_phase"] = list(self.frames_per_phase)
        return d


def _phase_motions(spec: SynthSpec):
    """Per-phase posture offset, oscillation amplitude and frequency (shared by all videos).

    Amplitudes are common to all phases so limb speed grows with the phase's
    frequency; postures differ by a random limb offset.
    """
    rng = np.random.default_rng([spec.seed, 0xC0FFEE])
    amp = np.zeros((NUM_JOINTS, 2))
    amp[LIMB_JOINTS] = rng.uniform(0.5, 1.0, (len(LIMB_JOINTS), 2)) * spec.amplitude
    motions = []
    for k in range(spec.num_classes):
        offset = np.zeros((NUM_JOINTS, 2))
        offset[LIMB_JOINTS] = rng.uniform(-1, 1, (len(LIMB_JOINTS), 2)) * spec.posture_shift
        motions.append((offset, amp, spec.base_frequency * (k + 1)))
    return motions


def generate(spec: SynthSpec = SynthSpec()) -> list[PoseSequence]:
    motions = _phase_motions(spec)
    lo, hi = spec.frames_per_phase
    seqs = []
    for v in range(spec.num_videos):
        rng = np.random.default_rng([spec.seed, v])
        lengths = rng.integers(lo, hi + 1, spec.num_classes)
        labels = np.repeat(np.arange(spec.num_classes), lengths)
        frames = []
        for k, n in enumerate(lengths):
            offset, amp, freq = motions[k]
            phi = rng.uniform(0, 2 * np.pi, (NUM_JOINTS, 2))
            t = np.arange(n)[:, None, None]
            frames.append(BASE_POSE + offset + amp * np.sin(2 * np.pi * freq * t + phi))
        frames = np.concatenate(frames)
        frames = frames + spec.noise * rng.standard_normal(frames.shape)
        # camera placement; removed again by normalization
        scale = rng.uniform(40.0, 80.0)
        shift = rng.uniform(100.0, 400.0, 2)
        if spec.camera:
            frames = frames * np.array([1.0, -1.0]) * scale + shift
        seqs.append(PoseSequence(f"synth_{v:03d}", frames, labels, fps=25.0))
    return seqs
