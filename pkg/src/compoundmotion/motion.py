"""Motion sequences and their on-disk JSON form."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .skeleton import JOINT_NAMES, NUM_JOINTS, ROOT

MOTION_FORMAT = "compoundmotion-motion-v1"


@dataclass
class MotionSequence:
    """float32 joint positions [frames, 22, 3] plus the capture rate."""

    data: np.ndarray
    fps: float = 20.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[1:] != (NUM_JOINTS, 3):
            raise ValueError(f"expected [frames, 22, 3], got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise ValueError("motion needs at least one frame")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("motion contains non-finite values")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    def pad_or_crop(self, frames: int) -> "MotionSequence":
        """Crop to ``frames`` or pad by repeating the final pose."""
        if self.frames == frames:
            return MotionSequence(self.data.copy(), self.fps)
        if self.frames > frames:
            return MotionSequence(self.data[:frames].copy(), self.fps)
        tail = np.repeat(self.data[-1:], frames - self.frames, axis=0)
        return MotionSequence(np.concatenate([self.data, tail], axis=0), self.fps)

    def root_displacement(self) -> float:
        return float(np.linalg.norm(self.data[-1, ROOT] - self.data[0, ROOT]))

    def save(self, path) -> None:
        payload = {
            "format": MOTION_FORMAT,
            "fps": float(self.fps),
            "joint_names": JOINT_NAMES,
            "frames": np.asarray(self.data, dtype=np.float64).round(7).tolist(),
        }
        Path(path).write_text(json.dumps(payload, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> "MotionSequence":
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != MOTION_FORMAT:
            raise ValueError(f"{path}: unknown motion format {payload.get('format')!r}")
        if payload.get("joint_names") != JOINT_NAMES:
            raise ValueError(f"{path}: joint names do not match the skeleton")
        return cls(np.asarray(payload["frames"], dtype=np.float32), float(payload["fps"]))


def motion_energy(data: np.ndarray) -> np.ndarray:
    """Per-joint summed squared frame deltas, measured root-relative.

    Non-root joints are recentred on the root before differencing so a clip
    travelling through space does not light up every joint; the root itself is
    measured on its world trajectory.
    """
    data = np.asarray(data, dtype=np.float64)
    rel = data - data[:, ROOT : ROOT + 1]
    deltas = np.diff(rel, axis=0)
    energy = np.sum(deltas**2, axis=(0, 2))
    root_deltas = np.diff(data[:, ROOT], axis=0)
    energy[ROOT] = np.sum(root_deltas**2)
    return energy


def moving_joint_labels(data: np.ndarray, rel_threshold: float = 0.1) -> np.ndarray:
    """Boolean labels: joints whose motion energy exceeds ``rel_threshold`` of
    the maximum joint energy."""
    energy = motion_energy(data)
    peak = energy.max()
    if peak <= 0:
        raise ValueError("motion has zero energy; labels are undefined")
    return energy > rel_threshold * peak
