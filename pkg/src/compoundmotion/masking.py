"""Structural body-part masks derived from mid-bottleneck attention maps.

Pipeline per action token: min-max normalize its attention column over the
five region nodes, threshold strictly at 0.9, apply the structural grouping
constraints (arms move together; legs bind the torso/root), then expand the
five region booleans to the 22-joint skeleton.  A step-window policy decides
when masks are freshly extracted, reused, or not applied at all.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .kernels import AttentionMaps
from .skeleton import NUM_JOINTS, REGIONS, SkeletonGraph

MASK_THRESHOLD = 0.9

_ARM_REGIONS = (0, 1)      # LeftArm, RightArm in REGIONS order
_LEG_REGIONS = (2, 3)      # LeftLeg, RightLeg
_TORSO_REGION = 4          # TorsoRoot


class DegenerateMapError(ValueError):
    """An attention column was constant, so min-max normalization is undefined."""


class MaskPhase(enum.Enum):
    FRESH_EXTRACTION = "fresh_extraction"
    FROZEN = "frozen"
    DISABLED = "disabled"


@dataclass(frozen=True)
class MaskWindow:
    """Step thresholds: extract fresh masks while t >= extract_until, keep
    applying the frozen capture while t >= apply_until, do nothing below."""

    extract_until: int = 750
    apply_until: int = 250
    total_steps: int = 1000

    def __post_init__(self):
        if not self.total_steps >= self.extract_until >= self.apply_until >= 0:
            raise ValueError(
                "window must satisfy total_steps >= extract_until >= apply_until >= 0, "
                f"got {self.total_steps} >= {self.extract_until} >= {self.apply_until}"
            )


def phase_of(t: int, window: MaskWindow | None = None) -> MaskPhase:
    window = window or MaskWindow()
    if not 0 <= t <= window.total_steps:
        raise ValueError(f"t={t} outside [0, {window.total_steps}]")
    if t >= window.extract_until:
        return MaskPhase.FRESH_EXTRACTION
    if t >= window.apply_until:
        return MaskPhase.FROZEN
    return MaskPhase.DISABLED


@dataclass
class StructuralMask:
    """Boolean joint mask attributed to one action token of a prompt."""

    token_index: int
    token: str
    joints: np.ndarray  # bool [22]
    source_t: int
    regions: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=bool)
        if self.joints.shape != (NUM_JOINTS,):
            raise ValueError(f"joint mask must have shape ({NUM_JOINTS},)")

    def validate(self, skeleton: SkeletonGraph) -> None:
        """Check region coherence and the arm/leg-root grouping invariants."""
        per_region = {}
        for name in REGIONS:
            vals = self.joints[skeleton.region_indices(name)]
            if not (vals.all() or not vals.any()):
                raise ValueError(f"mask splits region {name}")
            per_region[name] = bool(vals.all())
        if per_region["LeftArm"] != per_region["RightArm"]:
            raise ValueError("arm regions must agree")
        if not per_region["LeftLeg"] == per_region["RightLeg"] == per_region["TorsoRoot"]:
            raise ValueError("leg regions and TorsoRoot must agree")

    def to_json(self) -> str:
        return json.dumps(
            {
                "token_index": self.token_index,
                "token": self.token,
                "source_t": self.source_t,
                "joints": [bool(v) for v in self.joints],
                "regions": self.regions,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, payload: str) -> "StructuralMask":
        d = json.loads(payload)
        return cls(
            token_index=d["token_index"],
            token=d["token"],
            joints=np.array(d["joints"], dtype=bool),
            source_t=d["source_t"],
            regions=d.get("regions", {}),
        )


def _as_grid(maps) -> np.ndarray:
    if isinstance(maps, AttentionMaps):
        return maps.head_mean()
    return np.asarray(maps, dtype=np.float64)


def normalize_maps(raw) -> np.ndarray:
    """Min-max normalize each token column of a [nodes, tokens] grid to [0, 1].

    Raises DegenerateMapError when a column is constant.
    """
    grid = _as_grid(raw).astype(np.float64)
    if grid.ndim == 1:
        grid = grid[:, None]
    lo = grid.min(axis=0, keepdims=True)
    hi = grid.max(axis=0, keepdims=True)
    span = hi - lo
    if np.any(span <= 0):
        bad = np.nonzero(span[0] <= 0)[0].tolist()
        raise DegenerateMapError(f"constant attention column(s) {bad}")
    return (grid - lo) / span


def threshold(normalized: np.ndarray) -> np.ndarray:
    """Strictly-greater comparison against 0.9; boolean grid out."""
    normalized = np.asarray(normalized, dtype=np.float64)
    if normalized.min() < 0 or normalized.max() > 1:
        raise ValueError("threshold expects values in [0, 1]")
    return normalized > MASK_THRESHOLD


def apply_constraints(region_bools) -> np.ndarray:
    """Grouping rules over [LeftArm, RightArm, LeftLeg, RightLeg, TorsoRoot].

    Arms activate only jointly; legs activate only jointly and then force
    TorsoRoot on.  TorsoRoot's own raw activation carries no weight.
    """
    raw = np.asarray(region_bools, dtype=bool)
    if raw.shape != (len(REGIONS),):
        raise ValueError(f"expected {len(REGIONS)} region booleans")
    out = np.zeros_like(raw)
    arms = bool(raw[_ARM_REGIONS[0]] and raw[_ARM_REGIONS[1]])
    legs = bool(raw[_LEG_REGIONS[0]] and raw[_LEG_REGIONS[1]])
    out[list(_ARM_REGIONS)] = arms
    out[list(_LEG_REGIONS)] = legs
    out[_TORSO_REGION] = legs
    return out


def expand_mask(region_mask, skeleton: SkeletonGraph) -> np.ndarray:
    """Region booleans -> 22-joint booleans via region membership."""
    region_mask = np.asarray(region_mask, dtype=bool)
    joints = np.zeros(NUM_JOINTS, dtype=bool)
    for r, name in enumerate(REGIONS):
        if region_mask[r]:
            joints[skeleton.region_indices(name)] = True
    return joints


def extract_mask(
    maps,
    token_index: int,
    token: str,
    source_t: int,
    skeleton: SkeletonGraph,
) -> StructuralMask:
    """Full pipeline for one action token's attention column."""
    grid = _as_grid(maps)
    col = normalize_maps(grid[:, [token_index]])[:, 0]
    regions = apply_constraints(threshold(col))
    mask = StructuralMask(
        token_index=token_index,
        token=token,
        joints=expand_mask(regions, skeleton),
        source_t=source_t,
        regions={name: bool(regions[i]) for i, name in enumerate(REGIONS)},
    )
    mask.validate(skeleton)
    return mask


def blend(x: np.ndarray, x_ci: np.ndarray, mask: StructuralMask) -> np.ndarray:
    """Masked joints take x_ci exactly, the rest keep x exactly.

    Accepts [frames, 22, 3] or flattened [frames, 66] states.
    """
    x = np.asarray(x)
    x_ci = np.asarray(x_ci)
    if x.shape != x_ci.shape:
        raise ValueError(f"blend shape mismatch: {x.shape} vs {x_ci.shape}")
    if x.shape[-1] == NUM_JOINTS * 3:
        sel = np.repeat(mask.joints, 3)
        return np.where(sel, x_ci, x)
    if x.shape[-2] != NUM_JOINTS:
        raise ValueError(f"state must carry {NUM_JOINTS} joints, got shape {x.shape}")
    return np.where(mask.joints[:, None], x_ci, x)
