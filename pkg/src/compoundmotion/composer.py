"""Compound sampling: composite denoising plus per-action-token branch steps
whose outputs are blended in through structural masks.

Each step runs the full-prompt denoiser, estimates the clean motion from the
composite noise estimate, feeds that estimate to the adapter to refresh masks
(while the step window allows), then re-denoises under each sub-prompt and
blends the branch result into the masked joints.  One RNG stream drives the
whole run: the composite noise draw comes first, then one draw per action
token in ascending token order, so a seed pins every array bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .adapter import Adapter
from .backbone import FEATURES, FRAMES, Backbone, denoise_step, predict_x0
from .masking import (
    DegenerateMapError,
    MaskPhase,
    MaskWindow,
    StructuralMask,
    blend,
    extract_mask,
    phase_of,
)
from .motion import MotionSequence
from .skeleton import NUM_JOINTS, SkeletonGraph, build_skeleton
from .text import Prompt


@dataclass
class DiffusionState:
    """Normalized sampler state between steps; rng is consumed in place."""

    x: np.ndarray  # float64 [frames, 66]
    t: int
    rng: np.random.Generator
    branch_x: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class StepLog:
    t: int
    phase: str
    masks: list[dict] = field(default_factory=list)
    blends: list[dict] = field(default_factory=list)


@dataclass
class CompositionRun:
    prompt_text: str
    action_indices: tuple[int, ...]
    seed: int
    steps: list[StepLog] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "prompt": self.prompt_text,
                "action_indices": list(self.action_indices),
                "seed": self.seed,
                "warnings": self.warnings,
                "steps": [
                    {
                        "t": s.t,
                        "phase": s.phase,
                        "masks": s.masks,
                        "blends": s.blends,
                    }
                    for s in self.steps
                ],
            },
            sort_keys=True,
        )


class Composer:
    """Binds a trained backbone and adapter to the blending policy."""

    def __init__(
        self,
        backbone: Backbone,
        adapter: Adapter | None,
        *,
        window: MaskWindow | None = None,
        masking_enabled: bool = True,
        branch_mode: str = "shared",
        x0_clamp: float | None = 4.0,
        skeleton: SkeletonGraph | None = None,
        step_inspector=None,
    ):
        if masking_enabled and adapter is None:
            raise ValueError("masking requires an adapter checkpoint")
        if branch_mode not in ("shared", "independent"):
            raise ValueError(f"unknown branch mode {branch_mode!r}")
        self.backbone = backbone
        self.adapter = adapter
        self.window = window or MaskWindow(total_steps=backbone.schedule.steps)
        self.masking_enabled = masking_enabled
        self.branch_mode = branch_mode
        self.x0_clamp = x0_clamp
        self.skeleton = skeleton or build_skeleton()
        # Diagnostics seam: called once per step with the step's arrays so a
        # caller can audit the trace online instead of buffering 196x66 floats
        # per step.  None of the arrays are mutated after the call.
        self.step_inspector = step_inspector

    # -- mask extraction ---------------------------------------------------

    def _masks_from_x0(
        self, prompt: Prompt, x0_norm: np.ndarray, t: int, run: CompositionRun
    ) -> dict[int, StructuralMask]:
        x0 = x0_norm
        if self.x0_clamp is not None:
            x0 = np.clip(x0, -self.x0_clamp, self.x0_clamp)
        world = self.backbone.denormalize(
            x0.reshape(FRAMES, NUM_JOINTS, 3).astype(np.float32)
        )
        _, maps = self.adapter.reconstruct(
            MotionSequence(world), list(prompt.tokens)
        )
        mid = maps[len(maps) // 2]
        masks: dict[int, StructuralMask] = {}
        for pos in prompt.action_indices:
            try:
                masks[pos] = extract_mask(
                    mid, pos, prompt.tokens[pos], t, self.skeleton
                )
            except DegenerateMapError:
                run.warnings.append(
                    f"t={t}: degenerate attention column for token "
                    f"{prompt.tokens[pos]!r}; no mask applied"
                )
        return masks

    # -- one step ----------------------------------------------------------

    def composition_step(
        self,
        prompt: Prompt,
        state: DiffusionState,
        frozen_masks: dict[int, StructuralMask],
        run: CompositionRun,
        cond_cache: dict | None = None,
    ) -> DiffusionState:
        """Advance t -> t-1; mutates frozen_masks on fresh extraction."""
        t = state.t
        if t < 1:
            raise ValueError("composition_step needs t >= 1")
        sched = self.backbone.schedule
        cache = cond_cache if cond_cache is not None else {}

        def cond_for(key, tokens):
            if key not in cache:
                cache[key] = self.backbone.pooled_condition([tuple(tokens)])
            return cache[key]

        eps_c = self.backbone.eps_model(
            state.x[None], t, cond_for("__full__", prompt.tokens)
        )[0]
        z = state.rng.standard_normal(state.x.shape) if t > 1 else None
        x_next = denoise_step(sched, state.x, t, eps_c, z)

        phase = (
            phase_of(t, self.window) if self.masking_enabled else MaskPhase.DISABLED
        )
        log = StepLog(t=t, phase=phase.value)

        if phase is MaskPhase.DISABLED:
            run.steps.append(log)
            if self.step_inspector is not None:
                self.step_inspector({
                    "t": t, "phase": phase.value, "x_in": state.x,
                    "x_out": x_next, "eps": eps_c, "z": z, "applied": {},
                })
            return DiffusionState(x_next, t - 1, state.rng, state.branch_x)

        if phase is MaskPhase.FRESH_EXTRACTION:
            x0_est = predict_x0(sched, state.x, t, eps_c)
            frozen_masks.clear()
            frozen_masks.update(self._masks_from_x0(prompt, x0_est, t, run))
        masks = frozen_masks
        log.masks = [json.loads(m.to_json()) for m in masks.values()]

        claimed = np.zeros(NUM_JOINTS, dtype=bool)
        applied: dict[int, np.ndarray] = {}
        for slot, pos in enumerate(prompt.action_indices):
            z_i = state.rng.standard_normal(state.x.shape) if t > 1 else None
            mask = masks.get(pos)
            if mask is None or not mask.joints.any():
                log.blends.append({"token_index": pos, "applied": False})
                continue
            if bool((claimed & mask.joints).any()):
                run.warnings.append(
                    f"t={t}: mask overlap at token {prompt.tokens[pos]!r}; later token wins"
                )
            claimed |= mask.joints

            if self.branch_mode == "independent":
                branch_x = state.branch_x.get(pos, state.x)
            else:
                branch_x = state.x
            eps_i = self.backbone.eps_model(
                branch_x[None], t, cond_for(pos, prompt.sub_prompts[slot])
            )[0]
            x_i = denoise_step(sched, branch_x, t, eps_i, z_i)
            if self.branch_mode == "independent":
                state.branch_x[pos] = x_i
            x_next = blend(x_next, x_i, mask)
            applied[pos] = mask.joints
            log.blends.append({"token_index": pos, "applied": True})

        run.steps.append(log)
        if self.step_inspector is not None:
            self.step_inspector({
                "t": t, "phase": phase.value, "x_in": state.x,
                "x_out": x_next, "eps": eps_c, "z": z, "applied": applied,
            })
        return DiffusionState(x_next, t - 1, state.rng, state.branch_x)

    # -- full run ----------------------------------------------------------

    def sample_compound(
        self, prompt: Prompt, seed: int
    ) -> tuple[MotionSequence, CompositionRun]:
        sched = self.backbone.schedule
        run = CompositionRun(
            prompt_text=prompt.text,
            action_indices=prompt.action_indices,
            seed=seed,
        )
        rng = np.random.default_rng([seed, 0x5A])
        x = rng.standard_normal((FRAMES, FEATURES))
        state = DiffusionState(x, sched.steps, rng)
        if self.branch_mode == "independent":
            state.branch_x = {pos: x.copy() for pos in prompt.action_indices}
        frozen: dict[int, StructuralMask] = {}
        cache: dict = {}
        while state.t >= 1:
            state = self.composition_step(prompt, state, frozen, run, cache)
        flat = state.x.reshape(FRAMES, NUM_JOINTS, 3).astype(np.float32)
        motion = MotionSequence(self.backbone.denormalize(flat))
        return motion, run
