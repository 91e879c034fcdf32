"""Denoising loop: a deterministic Euler sampler that consults the step
schedule, runs full forwards on refresh steps, and replays or selectively
refreshes cached block deltas on partial steps.

One run owns one CacheStore and one FlopCounter; runs may execute
concurrently only if they share nothing but immutable weights and configs.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .cache import CacheStore, SelectionPolicy, fallback_zones, validate_zones
from .conditions import ConditionMap, embed_condition
from .errors import ConfigurationError
from .model import (
    CONTROL,
    MAIN,
    ModelConfig,
    ModelWeights,
    branch_inputs,
    build_model,
    forward_full,
    initial_latent,
)
from .schedule import MODE_FULL, CachePolicy, build_schedule
from .tensor_ops import FlopCounter, Tensor2D, matmul

# Fixed decoder seed: the grayscale readout must be one shared projection so
# grids from different runs and policies are directly comparable.
DECODE_SEED = 714025


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; total_steps lives on the cache policy."""

    model: ModelConfig
    condition: ConditionMap
    policy: CachePolicy
    selection: SelectionPolicy = SelectionPolicy()
    zones: dict | None = None  # None -> later-half fallback
    seed: int = 0

    @property
    def total_steps(self) -> int:
        return self.policy.total_steps

    def resolved_zones(self) -> dict[str, list[str]]:
        if self.zones is None:
            return fallback_zones(self.model)
        return validate_zones(self.zones, self.model)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "policy": {
                "interval": self.policy.interval,
                "total_steps": self.policy.total_steps,
                "critical_steps": list(self.policy.critical_steps),
                "force_last": self.policy.force_last,
            },
            "selection": {
                "ratio": self.selection.ratio,
                "refresh_mode": self.selection.refresh_mode,
            },
            "zones": self.resolved_zones(),
            "seed": self.seed,
        }

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class RunResult:
    final_latent: Tensor2D
    grid: np.ndarray               # [side, side] in [0, 1]
    flops: int
    wall_ms: float
    mode_trace: tuple[str, ...] = ()
    cache_stats: dict = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "flops": self.flops,
            "wall_ms": self.wall_ms,
            "mode_trace": "".join(self.mode_trace),
            "cache_stats": self.cache_stats,
        }


def decode_grid(latent: Tensor2D, grid_side: int) -> np.ndarray:
    """Project the latent to one channel and min-max normalize to [0, 1]."""
    rng = np.random.Generator(np.random.PCG64(DECODE_SEED))
    projection = rng.standard_normal(latent.shape[1])
    flat = latent @ projection
    lo, hi = flat.min(), flat.max()
    if hi == lo:
        return np.zeros((grid_side, grid_side))
    return ((flat - lo) / (hi - lo)).reshape(grid_side, grid_side)


def run(config: RunConfig, weights: ModelWeights | None = None) -> RunResult:
    """Execute one scheduled denoising run; deterministic given the config."""
    if weights is None:
        weights = build_model(config.model)
    elif weights.config != config.model:
        raise ConfigurationError("provided weights were built for a different model config")
    schedule = build_schedule(config.policy)
    zones = config.resolved_zones()
    model = config.model

    cond_tokens = embed_condition(config.condition, weights)
    cache = CacheStore(model)
    counter = FlopCounter()
    x = initial_latent(model, config.seed)
    delta = 1.0 / config.total_steps

    started = time.perf_counter()
    for step, mode in enumerate(schedule.modes):
        if mode == MODE_FULL:
            noise, outputs = forward_full(weights, x, cond_tokens, step, counter)
            cache.refresh_full(outputs, step)
        else:
            main_in, control_in = branch_inputs(weights, x, cond_tokens, step)
            injections = []
            h = control_in
            for k in range(model.control_blocks):
                h = cache.apply_partial(
                    weights, k, CONTROL, zones[CONTROL][k], h, config.selection, counter
                )
                injections.append(matmul(h, weights.control_proj[k], counter))
            h = main_in
            for layer in range(model.num_blocks):
                if layer < model.control_blocks:
                    h = h + injections[layer]
                h = cache.apply_partial(
                    weights, layer, MAIN, zones[MAIN][layer], h, config.selection, counter
                )
            noise = h
        x = x - delta * noise
    wall_ms = (time.perf_counter() - started) * 1000.0

    return RunResult(
        final_latent=x,
        grid=decode_grid(x, model.grid_side),
        flops=counter.total,
        wall_ms=wall_ms,
        mode_trace=schedule.modes,
        cache_stats=cache.stats_dict(),
        config_hash=config.config_hash(),
        seed=config.seed,
    )


def run_baseline(config: RunConfig, weights: ModelWeights | None = None) -> RunResult:
    """Uncached reference: the same run with an all-full schedule (interval 1)."""
    baseline_policy = CachePolicy(
        interval=1,
        total_steps=config.policy.total_steps,
        critical_steps=(),
        force_last=config.policy.force_last,
    )
    return run(replace(config, policy=baseline_policy), weights)
