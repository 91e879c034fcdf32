"""Sweep harness over (policy mode, interval, ratio) with FLOP-accounted
speedups and quality metrics against the uncached baseline."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace

from .cache import (
    REFRESH_ATTN,
    REFRESH_BOTH,
    REFRESH_MLP,
    SelectionPolicy,
    ZONE_GLOBAL,
    all_zone,
)
from .errors import EngineError, ParameterError
from .metrics import PSNR_CAP, psnr, rel_l2, ssim
from .model import build_model
from .pipeline import RunConfig, RunResult, run, run_baseline
from .schedule import CachePolicy

# Policy modes:
#   evctrl        token refresh in Local zones + interval + critical steps
#   wa / wm       token refresh limited to attention / MLP, no critical steps
#   dss-only      interval + critical steps, no token refresh (all Global)
#   interval-only plain periodic caching, nothing else
MODE_EVCTRL = "evctrl"
MODE_INTERVAL_ONLY = "interval-only"
MODE_WA = "wa"
MODE_WM = "wm"
MODE_DSS_ONLY = "dss-only"
POLICY_MODES = (MODE_EVCTRL, MODE_INTERVAL_ONLY, MODE_WA, MODE_WM, MODE_DSS_ONLY)

CSV_HEADER = "mode,N,P,flops,wall_ms,speedup,psnr,ssim,rel_l2"


@dataclass
class BenchReport:
    environment: dict
    rows: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(not row.get("failed") for row in self.rows)

    def to_json_dict(self) -> dict:
        return {"environment": self.environment, "rows": self.rows}

    def csv_lines(self) -> list[str]:
        lines = [CSV_HEADER]
        for row in self.rows:
            lines.append(format_csv_row(row))
        return lines


def format_csv_row(row: dict) -> str:
    if row.get("failed"):
        return f"{row['mode']},{row['N']},{row['P']},,,,,,"
    return (
        f"{row['mode']},{row['N']},{row['P']},{row['flops']},"
        f"{row['wall_ms']:.3f},{row['speedup']:.6f},"
        f"{row['psnr']:.6f},{row['ssim']:.6f},{row['rel_l2']:.6e}"
    )


def derive_run_config(
    base: RunConfig, mode: str, interval: int, ratio: float
) -> RunConfig:
    """Specialize the base run for one benchmark row."""
    if mode not in POLICY_MODES:
        raise ParameterError(f"unknown policy mode {mode!r}, expected one of {POLICY_MODES}")
    critical = base.policy.critical_steps if mode in (MODE_EVCTRL, MODE_DSS_ONLY) else ()
    policy = CachePolicy(
        interval=interval,
        total_steps=base.policy.total_steps,
        critical_steps=critical,
        force_last=base.policy.force_last,
    )
    refresh = {MODE_WA: REFRESH_ATTN, MODE_WM: REFRESH_MLP}.get(mode, REFRESH_BOTH)
    selection = SelectionPolicy(ratio=ratio, refresh_mode=refresh)
    zones = base.resolved_zones()
    if mode in (MODE_DSS_ONLY, MODE_INTERVAL_ONLY):
        zones = all_zone(base.model, ZONE_GLOBAL)
    return replace(base, policy=policy, selection=selection, zones=zones)


def ablation_grid() -> dict:
    """The four-row ablation preset: WA, WM, DSS-only, and the full stack."""
    return {"modes": [MODE_WA, MODE_WM, MODE_DSS_ONLY, MODE_EVCTRL], "N": [8], "P": [30]}


def _metric_row(mode, interval, ratio, result: RunResult, baseline: RunResult, config: RunConfig) -> dict:
    return {
        "mode": mode,
        "N": interval,
        "P": ratio,
        "flops": result.flops,
        "wall_ms": result.wall_ms,
        "speedup": baseline.flops / result.flops,
        "psnr": psnr(result.grid, baseline.grid),
        "ssim": ssim(result.grid, baseline.grid),
        "rel_l2": rel_l2(result.final_latent, baseline.final_latent),
        "critical_steps": list(config.policy.critical_steps),
        "cache_stats": result.cache_stats,
        "config_hash": result.config_hash,
    }


def baseline_row(baseline: RunResult) -> dict:
    return {
        "mode": "baseline",
        "N": 1,
        "P": 100,
        "flops": baseline.flops,
        "wall_ms": baseline.wall_ms,
        "speedup": 1.0,
        "psnr": PSNR_CAP,
        "ssim": 1.0,
        "rel_l2": 0.0,
        "critical_steps": [],
        "cache_stats": baseline.cache_stats,
        "config_hash": baseline.config_hash,
    }


def sweep(base: RunConfig, grid: dict, repeats: int = 1, on_row=None) -> BenchReport:
    """Run the baseline once, then every (mode, N, P) combination.

    Rows are sorted by (mode, N, P). A failing configuration produces a row
    marked failed and the sweep continues. With repeats > 1 the wall time is
    the median over repeats; metric columns come from the first run and are
    deterministic either way. on_row, when given, is called with each row as
    soon as it exists (the CLI uses this for append-per-row report writing).
    """
    modes = list(grid.get("modes", [MODE_EVCTRL]))
    intervals = list(grid.get("N", [8]))
    ratios = list(grid.get("P", [30]))
    if not modes or not intervals or not ratios:
        raise ParameterError("sweep grid must list at least one mode, N, and P")

    weights = build_model(base.model)
    baseline = run_baseline(base, weights)
    report = BenchReport(
        environment={
            "seed": base.seed,
            "config_hash": base.config_hash(),
            "total_steps": base.policy.total_steps,
            "grid": {"modes": modes, "N": intervals, "P": ratios},
        }
    )
    first = baseline_row(baseline)
    report.rows.append(first)
    if on_row:
        on_row(first)

    combos = sorted(
        ((mode, interval, ratio) for mode in modes for interval in intervals for ratio in ratios)
    )
    for mode, interval, ratio in combos:
        try:
            config = derive_run_config(base, mode, interval, ratio)
            result = run(config, weights)
            walls = [result.wall_ms]
            for _ in range(repeats - 1):
                walls.append(run(config, weights).wall_ms)
            row = _metric_row(mode, interval, ratio, result, baseline, config)
            row["wall_ms"] = statistics.median(walls)
        except EngineError as exc:
            row = {"mode": mode, "N": interval, "P": ratio, "failed": True, "error": str(exc)}
        report.rows.append(row)
        if on_row:
            on_row(row)
    return report
