"""22-joint skeleton: graph structure, region table, pooling hierarchy, and
position-space body-part recombination.

Joint order follows the usual 22-joint humanoid convention (pelvis root, legs,
spine chain, arms hanging off the upper spine).  Three resolutions exist:
22 joints, 11 merged segments, and 5 body regions (left/right arm, left/right
leg, torso+root).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

JOINT_NAMES = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
]

PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19]

NUM_JOINTS = 22
ROOT = 0

REGIONS = ["LeftArm", "RightArm", "LeftLeg", "RightLeg", "TorsoRoot"]

REGION_JOINTS = {
    "LeftArm": [13, 16, 18, 20],
    "RightArm": [14, 17, 19, 21],
    "LeftLeg": [1, 4, 7, 10],
    "RightLeg": [2, 5, 8, 11],
    "TorsoRoot": [0, 3, 6, 9, 12, 15],
}

# 22 -> 11 segment grouping: limbs pair adjacent joints, the torso splits into
# pelvis+spine1 / spine2+spine3 / neck+head.
GROUPS_22_TO_11 = [
    [0, 3],    # pelvis + spine1
    [6, 9],    # spine2 + spine3
    [12, 15],  # neck + head
    [13, 16],  # left collar + shoulder
    [18, 20],  # left elbow + wrist
    [14, 17],  # right collar + shoulder
    [19, 21],  # right elbow + wrist
    [1, 4],    # left hip + knee
    [7, 10],   # left ankle + foot
    [2, 5],    # right hip + knee
    [8, 11],   # right ankle + foot
]

# 11 -> 5 grouping lands exactly on the five regions, in REGIONS order.
GROUPS_11_TO_5 = [
    [3, 4],     # LeftArm
    [5, 6],     # RightArm
    [7, 8],     # LeftLeg
    [9, 10],    # RightLeg
    [0, 1, 2],  # TorsoRoot
]

# Joints above the lowest spine joint ride the upper body in fk_compose.
_ANCHOR = 3  # spine1
UPPER_FK_JOINTS = [6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21]
LOWER_FK_JOINTS = [0, 1, 2, 3, 4, 5, 7, 8, 10, 11]


@dataclass(frozen=True)
class PoolingMap:
    """Grouping between two joint resolutions."""

    fine: int
    coarse: int
    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        flat = sorted(j for g in self.groups for j in g)
        if flat != list(range(self.fine)):
            raise ValueError("groups must partition the fine joint set")
        if len(self.groups) != self.coarse:
            raise ValueError("group count must equal the coarse joint count")

    @property
    def coarse_of(self) -> np.ndarray:
        out = np.empty(self.fine, dtype=np.int64)
        for c, g in enumerate(self.groups):
            out[list(g)] = c
        return out

    @property
    def group_arrays(self) -> list[np.ndarray]:
        return [np.asarray(g, dtype=np.int64) for g in self.groups]


def normalize_adjacency(adj: np.ndarray) -> np.ndarray:
    """Symmetric degree normalization D^-1/2 A D^-1/2 (A already has self loops)."""
    adj = np.asarray(adj, dtype=np.float64)
    deg = adj.sum(axis=1)
    if np.any(deg <= 0):
        raise ValueError("isolated joint in adjacency")
    d = 1.0 / np.sqrt(deg)
    return (adj * d[:, None] * d[None, :]).astype(np.float32)


def coarsen_adjacency(adj: np.ndarray, pmap: PoolingMap) -> np.ndarray:
    """Coarse graph: groups are adjacent iff any member joints are."""
    coarse = np.zeros((pmap.coarse, pmap.coarse), dtype=np.float32)
    for a, ga in enumerate(pmap.groups):
        for b, gb in enumerate(pmap.groups):
            if a == b or np.any(adj[np.ix_(list(ga), list(gb))] > 0):
                coarse[a, b] = 1.0
    return coarse


@dataclass(frozen=True, eq=False)
class SkeletonGraph:
    """Joint names, parent tree, symmetric adjacency with self loops, region
    table and the 22/11/5 pooling hierarchy."""

    joint_names: tuple[str, ...]
    parents: tuple[int, ...]
    adjacency: np.ndarray
    pool_22_11: PoolingMap
    pool_11_5: PoolingMap
    levels: tuple[int, ...] = (22, 11, 5)
    _region_of: dict[int, str] = field(default_factory=dict, repr=False)

    def region_of(self, joint: int) -> str:
        if joint not in self._region_of:
            raise ValueError(f"joint index {joint} out of range")
        return self._region_of[joint]

    def region_indices(self, region: str) -> list[int]:
        if region not in REGION_JOINTS:
            raise ValueError(f"unknown region {region!r}")
        return list(REGION_JOINTS[region])

    def adjacency_at(self, level: int) -> np.ndarray:
        """Raw (unnormalized, self-looped) adjacency at a pooling level."""
        if level == 22:
            return self.adjacency
        a11 = coarsen_adjacency(self.adjacency, self.pool_22_11)
        if level == 11:
            return a11
        if level == 5:
            return coarsen_adjacency(a11, self.pool_11_5)
        raise ValueError(f"no pooling level with {level} joints")

    def to_json(self) -> str:
        payload = {
            "format": "compoundmotion-skeleton-v1",
            "joint_names": list(self.joint_names),
            "parents": list(self.parents),
            "regions": {r: REGION_JOINTS[r] for r in REGIONS},
            "levels": list(self.levels),
            "groups_22_to_11": [list(g) for g in self.pool_22_11.groups],
            "groups_11_to_5": [list(g) for g in self.pool_11_5.groups],
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def build_skeleton() -> SkeletonGraph:
    adj = np.eye(NUM_JOINTS, dtype=np.float32)
    for child, parent in enumerate(PARENTS):
        if parent >= 0:
            adj[child, parent] = 1.0
            adj[parent, child] = 1.0
    region_of = {}
    for region, joints in REGION_JOINTS.items():
        for j in joints:
            region_of[j] = region
    return SkeletonGraph(
        joint_names=tuple(JOINT_NAMES),
        parents=tuple(PARENTS),
        adjacency=adj,
        pool_22_11=PoolingMap(22, 11, tuple(tuple(g) for g in GROUPS_22_TO_11)),
        pool_11_5=PoolingMap(11, 5, tuple(tuple(g) for g in GROUPS_11_TO_5)),
        _region_of=region_of,
    )


def fk_compose(upper: np.ndarray, lower: np.ndarray) -> np.ndarray:
    """Recombine two clips: lower body + root trajectory from ``lower``,
    upper body re-rooted at the lowest spine joint from ``upper``.

    Both inputs are [frames, 22, 3] position arrays with matching frame
    counts.  Joints at or below spine1 copy straight from ``lower``; joints
    above it keep their offsets relative to spine1 from ``upper`` and ride the
    lower clip's spine1 trajectory.  No smoothing is applied.
    """
    upper = np.asarray(upper)
    lower = np.asarray(lower)
    if upper.shape != lower.shape:
        raise ValueError(f"frame/shape mismatch: {upper.shape} vs {lower.shape}")
    if upper.ndim != 3 or upper.shape[1] != NUM_JOINTS or upper.shape[2] != 3:
        raise ValueError(f"expected [frames, 22, 3] positions, got {upper.shape}")
    out = lower.copy()
    anchor_l = lower[:, _ANCHOR : _ANCHOR + 1]
    anchor_u = upper[:, _ANCHOR : _ANCHOR + 1]
    out[:, UPPER_FK_JOINTS] = anchor_l + (upper[:, UPPER_FK_JOINTS] - anchor_u)
    return out
