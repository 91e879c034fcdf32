"""Token-wise feature cache: L1-norm scoring, top-fraction selection, and
partial refresh of per-block attention/MLP deltas.

The cached quantity is the pre-residual sublayer delta. Residual streams
evolve from step to step, but deltas transplant cleanly onto the current
stream, which is what makes replaying them well defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import (
    DimensionError,
    IntegrityError,
    ParameterError,
    SchedulingError,
)
from .model import (
    CONTROL,
    MAIN,
    BlockOutput,
    ModelConfig,
    ModelWeights,
    attn_sublayer,
    mlp_sublayer,
)
from .tensor_ops import FlopCounter, Tensor2D

REFRESH_BOTH = "both"
REFRESH_ATTN = "attn"
REFRESH_MLP = "mlp"
REFRESH_MODES = (REFRESH_BOTH, REFRESH_ATTN, REFRESH_MLP)

ZONE_GLOBAL = "Global"
ZONE_LOCAL = "Local"
ZONES = (ZONE_GLOBAL, ZONE_LOCAL)


@dataclass(frozen=True)
class SelectionPolicy:
    """Which tokens get recomputed on partial steps, and in which sublayers.

    ratio is a percentage of the token count; refresh_mode picks the
    sublayers that receive fresh values ("both" refreshes attention and MLP
    together, "attn"/"mlp" refresh one sublayer and replay the other).
    """

    ratio: float = 30.0
    refresh_mode: str = REFRESH_BOTH

    def __post_init__(self):
        if not 0 <= self.ratio <= 100:
            raise ParameterError(f"ratio must be in [0, 100], got {self.ratio}")
        if self.refresh_mode not in REFRESH_MODES:
            raise ParameterError(
                f"refresh_mode must be one of {REFRESH_MODES}, got {self.refresh_mode!r}"
            )


def selection_count(ratio: float, n_tokens: int) -> int:
    """floor(ratio% of n_tokens), computed exactly (no float rounding drift)."""
    return int(math.floor(Fraction(ratio) * n_tokens / 100))


def score_tokens(features: Tensor2D) -> np.ndarray:
    """Per-token L1 norm across channels; higher norm = stronger control carrier."""
    f = np.asarray(features)
    if f.ndim != 2 or f.size == 0:
        raise DimensionError(f"need a non-empty 2-D feature tensor, got shape {f.shape}")
    return np.abs(f).sum(axis=1)


def select_tokens(scores, policy: SelectionPolicy) -> np.ndarray:
    """Indices of the floor(P% * N) largest-norm tokens, ascending.

    Ties break toward the lower index (stable sort on descending score).
    """
    s = np.asarray(scores, dtype=float).ravel()
    if s.size == 0:
        raise DimensionError("empty score vector")
    n = selection_count(policy.ratio, s.size)
    order = np.argsort(-s, kind="stable")
    return np.sort(order[:n])


def fallback_zones(config: ModelConfig) -> dict[str, list[str]]:
    """Later half of each branch labeled Local when no calibration is available."""
    zones = {}
    for branch in (MAIN, CONTROL):
        count = config.block_count(branch)
        local = math.ceil(count / 2)
        zones[branch] = [ZONE_GLOBAL] * (count - local) + [ZONE_LOCAL] * local
    return zones


def all_zone(config: ModelConfig, zone: str) -> dict[str, list[str]]:
    """Uniform zone map (e.g. all-Global for interval-only caching)."""
    if zone not in ZONES:
        raise ParameterError(f"unknown zone {zone!r}")
    return {branch: [zone] * config.block_count(branch) for branch in (MAIN, CONTROL)}


def validate_zones(zones: dict, config: ModelConfig) -> dict[str, list[str]]:
    """Check a zone map covers exactly this model's blocks with known labels."""
    from .errors import ConfigurationError

    for branch in (MAIN, CONTROL):
        labels = zones.get(branch)
        expected = config.block_count(branch)
        if labels is None or len(labels) != expected:
            got = None if labels is None else len(labels)
            raise ConfigurationError(
                f"zone map covers {got} {branch} blocks, model has {expected}"
            )
        for label in labels:
            if label not in ZONES:
                raise ConfigurationError(f"unknown zone label {label!r} in {branch} zones")
    return {branch: list(zones[branch]) for branch in (MAIN, CONTROL)}


@dataclass
class CacheEntry:
    attn_delta: Tensor2D       # [tokens, dim]
    mlp_delta: Tensor2D        # [tokens, dim]
    score_basis: np.ndarray    # [tokens] L1 norms of the block input
    refreshed_at: int          # timestep of the last full refresh


class CacheStore:
    """Per-(branch, layer) cached sublayer deltas plus selection scores.

    Owned by exactly one run. A full refresh must precede any partial
    application; the step schedule guarantees this by forcing step 0 full.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.entries: dict[tuple[str, int], CacheEntry] = {}
        self.stats = {
            key: {"full_refreshes": 0, "partial_rows": 0, "replay_steps": 0}
            for key in self.expected_keys()
        }

    def expected_keys(self) -> list[tuple[str, int]]:
        keys = [(MAIN, layer) for layer in range(self.config.num_blocks)]
        keys += [(CONTROL, layer) for layer in range(self.config.control_blocks)]
        return keys

    def refresh_full(self, outputs: dict[tuple[str, int], BlockOutput], t: int) -> None:
        """Overwrite every entry from a full forward pass at timestep t."""
        missing = [key for key in self.expected_keys() if key not in outputs]
        if missing:
            raise IntegrityError(f"full refresh missing block outputs for {missing}")
        for key in self.expected_keys():
            out = outputs[key]
            self.entries[key] = CacheEntry(
                attn_delta=out.attn_delta.copy(),
                mlp_delta=out.mlp_delta.copy(),
                score_basis=score_tokens(out.hidden_before),
                refreshed_at=int(t),
            )
            self.stats[key]["full_refreshes"] += 1

    def apply_partial(
        self,
        weights: ModelWeights,
        layer: int,
        branch: str,
        zone: str,
        hidden: Tensor2D,
        policy: SelectionPolicy,
        counter: FlopCounter,
    ) -> Tensor2D:
        """Advance one block on a partial step.

        Global zone: replay both cached deltas, no compute. Local zone:
        recompute the selected high-norm rows per the policy's refresh mode,
        update their cache rows and score basis in place, and replay the rest.
        """
        if zone not in ZONES:
            raise ParameterError(f"unknown zone {zone!r}")
        entry = self.entries.get((branch, layer))
        if entry is None:
            raise SchedulingError(
                f"partial step before any full refresh for {branch} block {layer}"
            )
        out = hidden + entry.attn_delta + entry.mlp_delta
        if zone == ZONE_GLOBAL:
            self.stats[(branch, layer)]["replay_steps"] += 1
            return out
        selected = select_tokens(entry.score_basis, policy)
        if selected.size == 0:
            self.stats[(branch, layer)]["replay_steps"] += 1
            return out

        block = weights.block(branch, layer)
        heads = weights.config.heads
        mode = policy.refresh_mode
        if mode == REFRESH_BOTH:
            fresh_attn = attn_sublayer(block, heads, hidden, counter, selected)
            mid = hidden[selected] + fresh_attn
            fresh_mlp = mlp_sublayer(block, mid, counter)
            out[selected] = mid + fresh_mlp
            entry.attn_delta[selected] = fresh_attn
            entry.mlp_delta[selected] = fresh_mlp
        elif mode == REFRESH_ATTN:
            fresh_attn = attn_sublayer(block, heads, hidden, counter, selected)
            out[selected] = hidden[selected] + fresh_attn + entry.mlp_delta[selected]
            entry.attn_delta[selected] = fresh_attn
        else:  # REFRESH_MLP: MLP recomputed on top of the replayed attention delta
            mid = hidden[selected] + entry.attn_delta[selected]
            fresh_mlp = mlp_sublayer(block, mid, counter)
            out[selected] = mid + fresh_mlp
            entry.mlp_delta[selected] = fresh_mlp
        entry.score_basis[selected] = np.abs(hidden[selected]).sum(axis=1)
        self.stats[(branch, layer)]["partial_rows"] += int(selected.size)
        return out

    def stats_dict(self) -> dict[str, dict[str, int]]:
        """JSON-friendly per-layer hit/refresh counters."""
        return {f"{branch}/{layer}": dict(counts) for (branch, layer), counts in self.stats.items()}
