"""Calibration pass: layer norm statistics, Global/Local stratification, and
adjacent-step similarity profiling with critical-step detection.

Calibration runs one uncached sampling trajectory and harvests, per layer,
the distribution of per-token L1 norms plus the overlap between high-norm
tokens and the condition's edge mask. Layers whose norm distribution is
heavy-tailed AND whose high-norm tokens sit on the condition are the
fine-grained control carriers; they become Local and receive token-selective
refreshes. The same trajectory yields the step-to-step cosine similarity
curve whose abrupt dips mark critical steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _scipy_stats

from .cache import ZONE_GLOBAL, ZONE_LOCAL, score_tokens
from .conditions import ConditionMap, edge_mask, embed_condition
from .errors import DimensionError, InsufficientDataError, UndefinedSimilarityError
from .model import CONTROL, MAIN, ModelWeights, forward_full, initial_latent
from .tensor_ops import FlopCounter

DEFAULT_KURTOSIS_MIN = 1.0
DEFAULT_IOU_MIN = 0.3
DEFAULT_KAPPA = 1.5
DEFAULT_MAX_CRITICAL = 3


@dataclass
class LayerProfile:
    """Norm-distribution statistics for one (branch, layer)."""

    branch: str
    layer: int
    norm_mean: float
    norm_std: float
    excess_kurtosis: float
    condition_iou: float
    iou_defined: bool  # False when the condition has no edge tokens at all
    zone: str = ZONE_GLOBAL

    def to_dict(self) -> dict:
        return {
            "branch": self.branch,
            "layer": self.layer,
            "norm_mean": self.norm_mean,
            "norm_std": self.norm_std,
            "excess_kurtosis": self.excess_kurtosis,
            "condition_iou": self.condition_iou,
            "iou_defined": self.iou_defined,
            "zone": self.zone,
        }


@dataclass
class SimilarityProfile:
    """Cosine similarity between adjacent steps' flattened features.

    Scheduling reads the control-branch curve; the main-branch curve is
    recorded for reporting only.
    """

    control: list[float]
    main: list[float]
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        arr = np.asarray(self.control, dtype=float)
        self.mean = float(arr.mean()) if arr.size else 0.0
        self.std = float(arr.std()) if arr.size else 0.0

    def to_dict(self) -> dict:
        return {
            "control": list(self.control),
            "main": list(self.main),
            "mean": self.mean,
            "std": self.std,
        }


def cosine_similarity(a, b) -> float:
    """a.b / (|a||b|), clipped into [-1, 1]; undefined for zero vectors."""
    av = np.asarray(a, dtype=float).ravel()
    bv = np.asarray(b, dtype=float).ravel()
    if av.shape != bv.shape:
        raise DimensionError(f"length mismatch: {av.size} vs {bv.size}")
    na = np.linalg.norm(av)
    nb = np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(av, bv) / (na * nb), -1.0, 1.0))


def excess_kurtosis(samples) -> float:
    """Unbiased sample excess kurtosis.

    G2 = [(n+1) g2 + 6] (n-1) / [(n-2)(n-3)] with g2 = m4/m2^2 - 3;
    scipy.stats.kurtosis(fisher=True, bias=False) implements exactly this.
    """
    arr = np.asarray(samples, dtype=float).ravel()
    if arr.size < 4:
        raise InsufficientDataError(f"kurtosis needs >= 4 samples, got {arr.size}")
    return float(_scipy_stats.kurtosis(arr, fisher=True, bias=False))


def _top_decile_mask(per_token_norms: np.ndarray) -> np.ndarray:
    k = max(1, per_token_norms.size // 10)
    order = np.argsort(-per_token_norms, kind="stable")
    mask = np.zeros(per_token_norms.size, dtype=bool)
    mask[order[:k]] = True
    return mask


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def calibrate(
    weights: ModelWeights,
    condition: ConditionMap,
    total_steps: int = 50,
    seed: int = 0,
) -> tuple[list[LayerProfile], SimilarityProfile]:
    """One full-compute sampling run, profiled.

    Deterministic given (weights, condition, total_steps, seed). Norm
    statistics pool every token over every step; the condition IoU compares
    each layer's top-decile mean-norm tokens against the edge mask. When the
    condition has no edge tokens at all the IoU is reported as 0 with
    iou_defined=False.
    """
    config = weights.config
    cond_tokens = embed_condition(condition, weights)
    mask = edge_mask(condition)
    mask_defined = bool(mask.any())

    keys = [(MAIN, l) for l in range(config.num_blocks)]
    keys += [(CONTROL, l) for l in range(config.control_blocks)]
    norms_per_step: dict[tuple[str, int], list[np.ndarray]] = {key: [] for key in keys}
    control_feats: list[np.ndarray] = []
    main_feats: list[np.ndarray] = []

    counter = FlopCounter()
    x = initial_latent(config, seed)
    delta = 1.0 / total_steps
    for step in range(total_steps):
        noise, outputs = forward_full(weights, x, cond_tokens, step, counter)
        for key in keys:
            norms_per_step[key].append(score_tokens(outputs[key].hidden_after))
        control_feats.append(outputs[(CONTROL, config.control_blocks - 1)].hidden_after.ravel().copy())
        main_feats.append(outputs[(MAIN, config.num_blocks - 1)].hidden_after.ravel().copy())
        x = x - delta * noise

    profiles = []
    for branch, layer in keys:
        stacked = np.stack(norms_per_step[(branch, layer)])  # [steps, tokens]
        pooled = stacked.ravel()
        per_token_mean = stacked.mean(axis=0)
        top_mask = _top_decile_mask(per_token_mean)
        profiles.append(
            LayerProfile(
                branch=branch,
                layer=layer,
                norm_mean=float(pooled.mean()),
                norm_std=float(pooled.std()),
                excess_kurtosis=excess_kurtosis(pooled),
                condition_iou=_iou(top_mask, mask) if mask_defined else 0.0,
                iou_defined=mask_defined,
            )
        )

    control_sims = [
        cosine_similarity(control_feats[s], control_feats[s + 1])
        for s in range(total_steps - 1)
    ]
    main_sims = [
        cosine_similarity(main_feats[s], main_feats[s + 1]) for s in range(total_steps - 1)
    ]
    return profiles, SimilarityProfile(control=control_sims, main=main_sims)


def stratify(
    profiles: list[LayerProfile],
    kurtosis_min: float = DEFAULT_KURTOSIS_MIN,
    iou_min: float = DEFAULT_IOU_MIN,
) -> dict[str, list[str]]:
    """Label each layer Global or Local; mutates profile.zone and returns the map.

    A layer is Local when its norm distribution is heavy-tailed (excess
    kurtosis >= kurtosis_min) AND its high-norm tokens overlap the condition
    (IoU >= iou_min). If no layer at all qualifies, the later half of each
    branch falls back to Local so partial steps still refresh somewhere.
    """
    if not profiles:
        raise InsufficientDataError("stratify needs at least one layer profile")
    counts: dict[str, int] = {}
    for p in profiles:
        counts[p.branch] = max(counts.get(p.branch, 0), p.layer + 1)
    zones = {branch: [ZONE_GLOBAL] * count for branch, count in counts.items()}

    any_local = False
    for p in profiles:
        local = p.excess_kurtosis >= kurtosis_min and p.condition_iou >= iou_min
        p.zone = ZONE_LOCAL if local else ZONE_GLOBAL
        zones[p.branch][p.layer] = p.zone
        any_local = any_local or local

    if not any_local:
        for branch, count in counts.items():
            start = count - math.ceil(count / 2)
            for layer in range(start, count):
                zones[branch][layer] = ZONE_LOCAL
        for p in profiles:
            p.zone = zones[p.branch][p.layer]
    return zones


def detect_critical_steps(
    sim: SimilarityProfile,
    kappa: float = DEFAULT_KAPPA,
    max_count: int = DEFAULT_MAX_CRITICAL,
) -> list[int]:
    """Steps whose arrival similarity drops below mean - kappa*std.

    Returns at most max_count steps, keeping the lowest-similarity ones
    (ties break toward the earlier step). Step s+1 is flagged, never step 0:
    the dip sits between s and s+1 and full compute at s+1 repairs it.
    """
    sims = np.asarray(sim.control, dtype=float)
    if sims.size < 3:
        raise InsufficientDataError(f"need >= 3 step pairs, got {sims.size}")
    threshold = sim.mean - kappa * sim.std
    flagged = [(float(sims[i]), i + 1) for i in range(sims.size) if sims[i] < threshold]
    if len(flagged) > max_count:
        flagged.sort(key=lambda item: (item[0], item[1]))
        flagged = flagged[:max_count]
    return sorted(step for _, step in flagged)
