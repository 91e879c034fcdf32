"""Brute-force oracle suites runnable from the CLI.

Each suite re-derives expected behavior through an independent route
(exhaustive sort, per-step enumeration, bitwise run comparison, direct
formula evaluation) and checks the fast path against it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import (
    ZONE_LOCAL,
    SelectionPolicy,
    all_zone,
    select_tokens,
    selection_count,
)
from .conditions import synth_condition
from .metrics import psnr, ssim
from .model import ModelConfig
from .pipeline import RunConfig, run, run_baseline
from .schedule import MODE_FULL, CachePolicy, build_schedule


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def brute_force_selection(scores, ratio: float) -> list[int]:
    """Exhaustive comparison-sort oracle for top-fraction token selection."""
    n = selection_count(ratio, len(scores))
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(ranked[:n])


def selection_suite(trials: int = 1000, seed: int = 2024) -> list[CheckResult]:
    rng = np.random.Generator(np.random.PCG64(seed))
    ratios = (0, 1, 25, 33, 50, 99, 100)
    failures = 0
    for _ in range(trials):
        size = int(rng.integers(1, 301))
        scores = rng.random(size)
        if rng.random() < 0.5:  # quantize some vectors so ties actually occur
            scores = np.round(scores, 1)
        for ratio in ratios:
            got = select_tokens(scores, SelectionPolicy(ratio=ratio)).tolist()
            want = brute_force_selection(scores.tolist(), ratio)
            if got != want:
                failures += 1
    return [
        CheckResult(
            name=f"selection vs sort oracle ({trials} vectors x {len(ratios)} ratios)",
            passed=failures == 0,
            detail=f"{failures} mismatches" if failures else "exact index-set equality",
        )
    ]


def schedule_suite(fuzz_trials: int = 500, seed: int = 77) -> list[CheckResult]:
    results = []

    policy = CachePolicy(interval=8, total_steps=50, critical_steps=(10,), force_last=True)
    got = set(build_schedule(policy).full_steps)
    want = {s for s in range(50) if s % 8 == 0} | {10, 49}
    results.append(
        CheckResult(
            name="T=50 N=8 critical={10} enumeration",
            passed=got == want,
            detail=f"full steps {sorted(got)}",
        )
    )

    rng = np.random.Generator(np.random.PCG64(seed))
    bad = 0
    for _ in range(fuzz_trials):
        total = int(rng.integers(1, 120))
        interval = int(rng.integers(1, total + 1))
        n_crit = int(rng.integers(0, min(total, 6)))
        critical = tuple(int(v) for v in rng.integers(0, total, size=n_crit))
        force_last = bool(rng.integers(0, 2))
        policy = CachePolicy(interval, total, critical, force_last)
        schedule = build_schedule(policy)
        crit = set(policy.critical_steps)
        for s, mode in enumerate(schedule.modes):
            expect_full = s % interval == 0 or s in crit or (force_last and s == total - 1)
            if (mode == MODE_FULL) != expect_full:
                bad += 1
    results.append(
        CheckResult(
            name=f"schedule predicate fuzz ({fuzz_trials} policies)",
            passed=bad == 0,
            detail=f"{bad} mode mismatches" if bad else "every step matches the predicate",
        )
    )
    return results


def equivalence_suite() -> list[CheckResult]:
    # a reduced model keeps this oracle quick; the equivalences are size-free
    model = ModelConfig(grid_side=8, hidden_dim=32, num_blocks=6, heads=4, seed=11)
    condition = synth_condition("rect", (1, 1, 6, 6), model.grid_side)
    steps = 20
    base = RunConfig(
        model=model,
        condition=condition,
        policy=CachePolicy(interval=4, total_steps=steps),
        selection=SelectionPolicy(ratio=30),
        seed=5,
    )
    results = []

    baseline = run_baseline(base)
    interval_one = run(
        RunConfig(
            model=model,
            condition=condition,
            policy=CachePolicy(interval=1, total_steps=steps),
            selection=base.selection,
            seed=5,
        )
    )
    bitwise = np.array_equal(baseline.final_latent, interval_one.final_latent)
    results.append(
        CheckResult(
            name="interval=1 equals baseline bitwise",
            passed=bitwise,
            detail="identical latents" if bitwise else "latents differ",
        )
    )

    total_refresh = run(
        RunConfig(
            model=model,
            condition=condition,
            policy=CachePolicy(interval=4, total_steps=steps),
            selection=SelectionPolicy(ratio=100),
            zones=all_zone(model, ZONE_LOCAL),
            seed=5,
        )
    )
    err = float(np.max(np.abs(total_refresh.final_latent - baseline.final_latent)))
    results.append(
        CheckResult(
            name="ratio=100 all-Local equals baseline within 1e-9",
            passed=err < 1e-9,
            detail=f"max abs deviation {err:.3e}",
        )
    )
    return results


def metrics_suite() -> list[CheckResult]:
    results = []
    zeros = np.zeros((8, 8))
    ones = np.ones((8, 8))
    results.append(
        CheckResult("psnr(0, 1) == 0 dB", passed=abs(psnr(zeros, ones)) < 1e-12)
    )
    results.append(
        CheckResult(
            "psnr at uniform 0.1 offset == 20 dB",
            passed=abs(psnr(zeros + 0.5, zeros + 0.6) - 20.0) < 1e-9,
        )
    )
    results.append(CheckResult("psnr identical grids capped at 99", passed=psnr(ones, ones) == 99.0))

    rng = np.random.Generator(np.random.PCG64(3)).random((16, 16))
    other = np.random.Generator(np.random.PCG64(4)).random((16, 16))
    results.append(CheckResult("ssim self-identity", passed=abs(ssim(rng, rng) - 1.0) < 1e-12))
    results.append(
        CheckResult("ssim symmetry", passed=abs(ssim(rng, other) - ssim(other, rng)) < 1e-12)
    )
    return results


SUITES = {
    "selection": selection_suite,
    "equivalence": equivalence_suite,
    "schedule": schedule_suite,
    "metrics": metrics_suite,
}


def run_suite(name: str) -> list[CheckResult]:
    return SUITES[name]()
