"""Command-line surface: calibrate, generate, bench, oracle.

Exit codes are a stable contract: 0 success, 1 a run or benchmark row
failed, 2 usage/configuration error. Output files are written atomically
(temp + rename), except the benchmark CSV which appends one line per
finished row so an interrupted sweep leaves every prior row valid.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

from .bench import (
    CSV_HEADER,
    POLICY_MODES,
    ablation_grid,
    derive_run_config,
    format_csv_row,
    sweep,
)
from .cache import REFRESH_MODES, SelectionPolicy, ZONE_GLOBAL, ZONE_LOCAL, all_zone, fallback_zones
from .conditions import ConditionMap, parse_condition_spec, pgm_text, sparsity
from .errors import EngineError
from .model import CONTROL, MAIN, ModelConfig, build_model
from .pipeline import RunConfig, run
from .profiler import (
    DEFAULT_IOU_MIN,
    DEFAULT_KAPPA,
    DEFAULT_KURTOSIS_MIN,
    DEFAULT_MAX_CRITICAL,
    calibrate,
    detect_critical_steps,
    stratify,
)
from .schedule import CachePolicy, full_step_flops, theoretical_speedup
from .oracle import SUITES, run_suite

EXIT_OK = 0
EXIT_RUN_FAILURE = 1
EXIT_USAGE = 2

SEED_ENV_VAR = "EVCTRL_SEED"
DEFAULT_CONDITION = "synth:rect:3,3,12,12"


class UsageError(Exception):
    """Raised for config problems that must exit 2 before any compute."""


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from exc


def write_text_atomic(path: Path, text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def dump_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return data


def _merged(args: argparse.Namespace, file_cfg: dict, key: str, fallback):
    """Explicit flags win over the config file, which wins over defaults."""
    flag_value = getattr(args, key.replace("-", "_"), None)
    if flag_value is not None:
        return flag_value
    if key in file_cfg:
        return file_cfg[key]
    return fallback


def _model_from(file_cfg: dict) -> ModelConfig:
    model_cfg = file_cfg.get("model", {})
    if not isinstance(model_cfg, dict):
        raise UsageError("config key 'model' must be an object")
    return ModelConfig.from_dict(model_cfg)


def _resolve_condition(spec: str, grid_side: int) -> ConditionMap:
    return parse_condition_spec(spec, grid_side)


def _load_profile(path: str | None) -> dict | None:
    if path is None:
        return None
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read profile {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"profile {path} is not valid JSON: {exc}") from exc


def _check_profile_matches(profile: dict, model: ModelConfig) -> None:
    stored = profile.get("model", {})
    structural = ("grid_side", "hidden_dim", "num_blocks", "heads", "control_blocks")
    for key in structural:
        if key in stored and stored[key] != getattr(model, key):
            raise UsageError(
                f"profile was calibrated for {key}={stored[key]}, "
                f"run config has {key}={getattr(model, key)}"
            )


def _zones_for(choice: str, profile: dict | None, model: ModelConfig) -> dict:
    if choice == "profile":
        if profile is None:
            return fallback_zones(model)
        zones = profile.get("zones")
        if zones is None:
            raise UsageError("profile has no zone map")
        return zones
    if choice == "later-half":
        return fallback_zones(model)
    if choice == "all-local":
        return all_zone(model, ZONE_LOCAL)
    if choice == "all-global":
        return all_zone(model, ZONE_GLOBAL)
    raise UsageError(f"unknown zones choice {choice!r}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_calibrate(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    model = _model_from(file_cfg)
    seed = int(_merged(args, file_cfg, "seed", _default_seed()))
    steps = int(_merged(args, file_cfg, "steps", 50))
    condition_spec = _merged(args, file_cfg, "condition", DEFAULT_CONDITION)

    condition = _resolve_condition(condition_spec, model.grid_side)
    weights = build_model(model)
    profiles, sim = calibrate(weights, condition, total_steps=steps, seed=seed)
    zones = stratify(profiles, kurtosis_min=args.kurtosis_min, iou_min=args.iou_min)
    critical = detect_critical_steps(sim, kappa=args.kappa, max_count=args.max_critical)

    payload = {
        "model": model.to_dict(),
        "seed": seed,
        "steps": steps,
        "condition": {
            "spec": condition_spec,
            "sparsity": sparsity(condition),
            "edge_tokens": int(round(sparsity(condition) * model.tokens)),
        },
        "layers": [p.to_dict() for p in profiles],
        "zones": zones,
        "similarity": sim.to_dict(),
        "critical_steps": critical,
        "thresholds": {
            "kurtosis_min": args.kurtosis_min,
            "iou_min": args.iou_min,
            "kappa": args.kappa,
            "max_critical": args.max_critical,
        },
    }
    write_text_atomic(Path(args.out), dump_json(payload))

    local_main = sum(1 for z in zones[MAIN] if z == ZONE_LOCAL)
    local_control = sum(1 for z in zones[CONTROL] if z == ZONE_LOCAL)
    print(f"wrote {args.out}")
    print(f"zones: main {local_main}/{len(zones[MAIN])} Local, "
          f"control {local_control}/{len(zones[CONTROL])} Local")
    print(f"critical steps: {critical if critical else 'none'}")
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    model = _model_from(file_cfg)
    seed = int(_merged(args, file_cfg, "seed", _default_seed()))
    steps = int(_merged(args, file_cfg, "steps", 50))
    interval = int(_merged(args, file_cfg, "interval", 8))
    ratio = float(_merged(args, file_cfg, "ratio", 30))
    mode = _merged(args, file_cfg, "mode", "evctrl")
    condition_spec = _merged(args, file_cfg, "condition", DEFAULT_CONDITION)

    profile = _load_profile(args.profile)
    if profile is not None:
        _check_profile_matches(profile, model)
    zones_choice = args.zones or ("profile" if profile is not None else "later-half")
    zones = _zones_for(zones_choice, profile, model)
    critical = tuple(profile.get("critical_steps", ())) if profile is not None else ()

    condition = _resolve_condition(condition_spec, model.grid_side)
    base = RunConfig(
        model=model,
        condition=condition,
        policy=CachePolicy(interval=1, total_steps=steps, critical_steps=critical),
        selection=SelectionPolicy(ratio=ratio),
        zones=zones,
        seed=seed,
    )
    config = derive_run_config(base, mode, interval, ratio)
    result = run(config)

    analytic_baseline = steps * full_step_flops(model)
    speedup = analytic_baseline / result.flops
    predicted = theoretical_speedup(
        config.policy, model, config.selection, config.resolved_zones()
    )

    out_prefix = Path(args.out)
    pgm_path = out_prefix.with_suffix(".pgm")
    json_path = out_prefix.with_suffix(".json")
    payload = result.to_json_dict()
    payload.update(
        {
            "mode": mode,
            "interval": interval,
            "ratio": ratio,
            "steps": steps,
            "condition": condition_spec,
            "zones": config.resolved_zones(),
            "critical_steps": list(config.policy.critical_steps),
            "analytic_baseline_flops": analytic_baseline,
            "speedup": speedup,
            "theoretical_speedup": predicted,
        }
    )
    grid_map = ConditionMap(result.grid)
    tmp = json_path.parent
    tmp.mkdir(parents=True, exist_ok=True)
    save_pgm(grid_map, pgm_path)
    write_text_atomic(json_path, dump_json(payload))
    print(f"wrote {pgm_path} and {json_path}")
    print(f"flops: {result.flops}")
    print(f"speedup vs analytic baseline: {speedup:.4f}x (model predicts {predicted:.4f}x)")
    return EXIT_OK


def parse_grid_spec(spec: str) -> dict:
    """Parse "N=1,2,4;P=10,30;mode=evctrl,dss-only" (or the "ablation" preset)."""
    if spec == "ablation":
        return ablation_grid()
    grid: dict = {}
    for clause in spec.split(";"):
        clause = clause.strip()
        if not clause:
            continue
        if "=" not in clause:
            raise UsageError(f"malformed grid clause {clause!r} (expected key=v1,v2,...)")
        key, _, raw = clause.partition("=")
        key = key.strip()
        values = [v.strip() for v in raw.split(",") if v.strip()]
        if not values:
            raise UsageError(f"grid clause {clause!r} lists no values")
        if key == "N":
            try:
                grid["N"] = [int(v) for v in values]
            except ValueError as exc:
                raise UsageError(f"bad N value in {clause!r}") from exc
        elif key == "P":
            try:
                grid["P"] = [float(v) for v in values]
            except ValueError as exc:
                raise UsageError(f"bad P value in {clause!r}") from exc
        elif key == "mode":
            for v in values:
                if v not in POLICY_MODES:
                    raise UsageError(f"unknown mode {v!r} in grid (expected {POLICY_MODES})")
            grid["modes"] = values
        else:
            raise UsageError(f"unknown grid key {key!r} (expected N, P, or mode)")
    if not grid:
        raise UsageError(f"grid spec {spec!r} selects nothing")
    return grid


def cmd_bench(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    model = _model_from(file_cfg)
    seed = int(_merged(args, file_cfg, "seed", _default_seed()))
    steps = int(_merged(args, file_cfg, "steps", 50))
    condition_spec = _merged(args, file_cfg, "condition", DEFAULT_CONDITION)
    grid = parse_grid_spec(args.grid)

    profile = _load_profile(args.profile)
    if profile is not None:
        _check_profile_matches(profile, model)
    zones = _zones_for("profile", profile, model)
    critical = tuple(profile.get("critical_steps", ())) if profile is not None else ()

    condition = _resolve_condition(condition_spec, model.grid_side)
    base = RunConfig(
        model=model,
        condition=condition,
        policy=CachePolicy(
            interval=max(grid.get("N", [1])), total_steps=steps, critical_steps=critical
        ),
        zones=zones,
        seed=seed,
    )

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "report.csv"
    json_path = out_dir / "report.json"

    rows_so_far: list[dict] = []
    csv_file = open(csv_path, "w", encoding="utf-8")
    csv_file.write(CSV_HEADER + "\n")
    csv_file.flush()

    def on_row(row: dict) -> None:
        # CSV appends per finished row; the JSON is atomically rewritten each
        # time so both stay valid if the sweep dies mid-flight.
        rows_so_far.append(row)
        csv_file.write(format_csv_row(row) + "\n")
        csv_file.flush()
        write_text_atomic(
            json_path,
            dump_json({"environment": environment, "rows": rows_so_far}),
        )

    environment = {
        "seed": seed,
        "config_hash": base.config_hash(),
        "total_steps": steps,
        "grid": grid,
    }
    try:
        report = sweep(base, grid, repeats=args.repeats, on_row=on_row)
    finally:
        csv_file.close()

    print(f"wrote {json_path} and {csv_path} ({len(report.rows)} rows)")
    failed = [row for row in report.rows if row.get("failed")]
    for row in failed:
        print(f"row failed: mode={row['mode']} N={row['N']} P={row['P']}: {row['error']}")
    return EXIT_OK if not failed else EXIT_RUN_FAILURE


def cmd_oracle(args: argparse.Namespace) -> int:
    results = run_suite(args.suite)
    all_ok = True
    for check in results:
        status = "PASS" if check.passed else "FAIL"
        detail = f" ({check.detail})" if check.detail else ""
        print(f"[{status}] {check.name}{detail}")
        all_ok = all_ok and check.passed
    return EXIT_OK if all_ok else EXIT_RUN_FAILURE


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evctrl",
        description="Cached DiT-ControlNet inference engine and benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate", help="profile layers and detect critical steps")
    cal.add_argument("--config", help="JSON config file (flags win over file values)")
    cal.add_argument("--condition", help="PGM path or synth:kind:params")
    cal.add_argument("--seed", type=int)
    cal.add_argument("--steps", type=int)
    cal.add_argument("--kurtosis-min", type=float, default=DEFAULT_KURTOSIS_MIN)
    cal.add_argument("--iou-min", type=float, default=DEFAULT_IOU_MIN)
    cal.add_argument("--kappa", type=float, default=DEFAULT_KAPPA)
    cal.add_argument("--max-critical", type=int, default=DEFAULT_MAX_CRITICAL)
    cal.add_argument("--out", default="profile.json")
    cal.set_defaults(func=cmd_calibrate)

    gen = sub.add_parser("generate", help="run the cached sampler and write PGM + JSON")
    gen.add_argument("--config")
    gen.add_argument("--profile", help="profile.json from calibrate")
    gen.add_argument("--condition")
    gen.add_argument("--interval", type=int, dest="interval")
    gen.add_argument("--ratio", type=float, dest="ratio")
    gen.add_argument("--mode", choices=POLICY_MODES)
    gen.add_argument("--zones", choices=["profile", "later-half", "all-local", "all-global"])
    gen.add_argument("--seed", type=int)
    gen.add_argument("--steps", type=int)
    gen.add_argument("--out", default="out/generated")
    gen.set_defaults(func=cmd_generate)

    ben = sub.add_parser("bench", help="sweep (mode, N, P) and write report.json/.csv")
    ben.add_argument("--config")
    ben.add_argument("--profile")
    ben.add_argument("--condition")
    ben.add_argument("--grid", default="N=1,2,4,8;P=30;mode=evctrl",
                     help='e.g. "N=1,2,4,8;P=10,30;mode=evctrl,dss-only" or "ablation"')
    ben.add_argument("--seed", type=int)
    ben.add_argument("--steps", type=int)
    ben.add_argument("--repeats", type=int, default=1, help="timing repeats (median reported)")
    ben.add_argument("--out", default="bench_out")
    ben.set_defaults(func=cmd_bench)

    orc = sub.add_parser("oracle", help="run a brute-force verification suite")
    orc.add_argument("--suite", required=True, choices=sorted(SUITES))
    orc.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
