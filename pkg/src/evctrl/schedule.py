"""Denoising-step schedule: periodic full refreshes plus forced critical steps,
and the closed-form cost model for scheduled runs."""

from __future__ import annotations

import json
from dataclasses import dataclass

from .cache import ZONE_LOCAL, SelectionPolicy, selection_count
from .errors import ParameterError
from .model import CONTROL, MAIN, ModelConfig
from .tensor_ops import full_block_flops, partial_block_flops

MODE_FULL = "F"
MODE_PARTIAL = "P"


@dataclass(frozen=True)
class CachePolicy:
    """Temporal policy: refresh every `interval` steps and at critical steps.

    Step 0 is always a full step (it populates the cache); the final step is
    forced full by default because one extra refresh costs at most 1/T of the
    budget and a stale last step measurably hurts output divergence.
    """

    interval: int
    total_steps: int = 50
    critical_steps: tuple[int, ...] = ()
    force_last: bool = True

    def __post_init__(self):
        if self.total_steps < 1:
            raise ParameterError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.interval < 1:
            raise ParameterError(f"interval must be >= 1, got {self.interval}")
        if self.interval > self.total_steps:
            raise ParameterError(
                f"interval {self.interval} exceeds total steps {self.total_steps}"
            )
        cleaned = tuple(sorted(set(int(s) for s in self.critical_steps)))
        for step in cleaned:
            if not 0 <= step < self.total_steps:
                raise ParameterError(
                    f"critical step {step} outside [0, {self.total_steps})"
                )
        object.__setattr__(self, "critical_steps", cleaned)


@dataclass(frozen=True)
class StepSchedule:
    """Per-timestep plan; "F" steps recompute and overwrite the cache."""

    modes: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.modes)

    @property
    def full_steps(self) -> tuple[int, ...]:
        return tuple(s for s, m in enumerate(self.modes) if m == MODE_FULL)

    @property
    def full_count(self) -> int:
        return sum(1 for m in self.modes if m == MODE_FULL)

    def to_json(self) -> str:
        return json.dumps({"modes": list(self.modes)})

    @classmethod
    def from_json(cls, text: str) -> "StepSchedule":
        return cls(modes=tuple(json.loads(text)["modes"]))


def build_schedule(policy: CachePolicy) -> StepSchedule:
    """Full at step 0, every interval-th step, every critical step, and
    (when force_last) the final step; everything else is partial."""
    critical = set(policy.critical_steps)
    last = policy.total_steps - 1
    modes = tuple(
        MODE_FULL
        if (s % policy.interval == 0 or s in critical or (policy.force_last and s == last))
        else MODE_PARTIAL
        for s in range(policy.total_steps)
    )
    return StepSchedule(modes)


# ---------------------------------------------------------------------------
# Cost model. These formulas mirror the pipeline exactly: a full step runs
# every block in both branches plus one injection projection per control
# block; a partial step pays only the Local-zone blocks (at the selected
# refresh fraction) plus the same injection projections, which are recomputed
# every step so the conditioning stays live.
# ---------------------------------------------------------------------------


def full_step_flops(config: ModelConfig) -> int:
    """MACs for one fully computed denoising step."""
    n, d = config.tokens, config.hidden_dim
    blocks = config.num_blocks + config.control_blocks
    return blocks * full_block_flops(n, d) + config.control_blocks * n * d * d


def partial_step_flops(config: ModelConfig, selection: SelectionPolicy, zones: dict) -> int:
    """MACs for one partial step under the given zone map and selection."""
    n, d = config.tokens, config.hidden_dim
    refreshed = selection_count(selection.ratio, n)
    local_blocks = sum(
        1 for branch in (MAIN, CONTROL) for z in zones[branch] if z == ZONE_LOCAL
    )
    per_block = partial_block_flops(n, d, refreshed, selection.refresh_mode)
    return local_blocks * per_block + config.control_blocks * n * d * d


def baseline_flops(config: ModelConfig, total_steps: int) -> int:
    """MACs for an uncached all-full run."""
    return total_steps * full_step_flops(config)


def scheduled_flops(
    policy: CachePolicy,
    config: ModelConfig,
    selection: SelectionPolicy,
    zones: dict,
) -> int:
    """MACs for a scheduled run; matches the pipeline's counter exactly."""
    schedule = build_schedule(policy)
    n_full = schedule.full_count
    n_partial = policy.total_steps - n_full
    return n_full * full_step_flops(config) + n_partial * partial_step_flops(
        config, selection, zones
    )


def theoretical_speedup(
    policy: CachePolicy,
    config: ModelConfig,
    selection: SelectionPolicy,
    zones: dict,
) -> float:
    """FLOPs(all-full baseline) / FLOPs(scheduled run); always >= 1."""
    return baseline_flops(config, policy.total_steps) / scheduled_flops(
        policy, config, selection, zones
    )
