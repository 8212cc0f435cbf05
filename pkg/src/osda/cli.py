"""Command-line entry point.

Subcommands: gen-data, train, eval, sweep, ablate, grad-check.  Configs
are flat JSON documents using exactly the TrainConfig / SyntheticTaskSpec
field names; unknown keys are hard errors because silent typos corrupt
experiments.  Command-line flags override file values.

Exit codes: 0 success, 1 run failure (divergence, dimension or I/O
problems), 2 usage error (bad flags, bad config keys, malformed files).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

from . import __version__
from .data import (
    FeatureDataset,
    LabelSpaceConfig,
    SyntheticTaskSpec,
    generate_synthetic_task,
    load_features_csv,
    save_features_csv,
)
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    ParseError,
)
from .evaluate import (
    SWEEP_AXES,
    RunResult,
    emit_report,
    evaluate,
    merge_results,
    run_variants,
    sweep_cell,
    write_weight_trace,
)
from .gradcheck import format_suite, run_suite
from .model import load_model, save_model
from .train import VARIANTS, TrainConfig, train_run

USAGE_ERROR = 2
RUN_ERROR = 1


def _load_json(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return payload


def _from_flat(cls, payload: dict, path: str):
    """Build a config dataclass, rejecting unknown keys by name."""
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - fields)
    if unknown:
        raise ConfigError(f"{path}: unknown {cls.__name__} key(s): {', '.join(unknown)}")
    coerced = dict(payload)
    if "shift_translation" in coerced and coerced["shift_translation"] is not None:
        coerced["shift_translation"] = tuple(coerced["shift_translation"])
    try:
        return cls(**coerced)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_train_config(path: str | None, overrides: dict) -> TrainConfig:
    payload: dict = {}
    if path is not None:
        payload = _load_json(path)
        if "train_config" in payload:  # accept a manifest as config source
            payload = payload["train_config"]
    payload.update({k: v for k, v in overrides.items() if v is not None})
    return _from_flat(TrainConfig, payload, path or "<flags>")


def load_task_spec(path: str | None, overrides: dict) -> SyntheticTaskSpec:
    payload: dict = {}
    if path is not None:
        payload = _load_json(path)
    payload.update({k: v for k, v in overrides.items() if v is not None})
    return _from_flat(SyntheticTaskSpec, payload, path or "<flags>")


def _write_manifest(out_dir: Path, entries: dict, no_timestamps: bool) -> None:
    manifest = {"tool_version": __version__, **entries}
    if not no_timestamps:
        manifest["written_at_unix"] = time.time()
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _label_space(args, dataset: FeatureDataset) -> LabelSpaceConfig:
    if getattr(args, "labels", None):
        return LabelSpaceConfig.from_json(args.labels)
    return dataset.observed_label_space()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    overrides = {
        "n_shared": args.n_shared,
        "n_target_private": args.n_target_private,
        "samples_per_class": args.samples_per_class,
        "seed": args.seed,
    }
    spec = load_task_spec(args.spec, overrides)
    dataset, label_space = generate_synthetic_task(spec)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_features_csv(dataset, out_dir / "dataset.csv")
    label_space.to_json(out_dir / "label_space.json")
    _write_manifest(out_dir, {"task_spec": asdict(spec),
                              "artifacts": ["dataset.csv", "label_space.json"]},
                    args.no_timestamps)
    print(f"wrote {len(dataset.ids)} rows to {out_dir / 'dataset.csv'}")
    return 0


def cmd_train(args) -> int:
    cfg = load_train_config(args.config, {"seed": args.seed, "variant": args.variant,
                                          "max_iterations": args.max_iterations})
    dataset = load_features_csv(args.data)
    label_space = _label_space(args, dataset)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(out_dir, {
        "train_config": asdict(cfg),
        "root_seed": cfg.seed,
        "dataset": str(args.data),
        "artifacts": ["params.json", "traces.csv"],
    }, args.no_timestamps)
    model, state = train_run(dataset, label_space, cfg)
    save_model(model, out_dir / "params.json")
    write_weight_trace(state, out_dir / "traces.csv")
    final_loss = state.log[-1].loss if state.log else {}
    print(f"trained variant={cfg.variant} for {state.iteration} iterations; "
          f"final losses {final_loss}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.params)
    dataset = load_features_csv(args.data)
    label_space = _label_space(args, dataset)
    report = evaluate(model, dataset, label_space)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = RunResult(
        variant=args.variant_name,
        task_id=Path(args.data).stem,
        seed=args.seed if args.seed is not None else 0,
        report=report,
        iterations=0,
        wall_seconds=0.0,
    )
    emit_report([result], out_dir / "report.csv", out_dir / "report.txt",
                include_timing=not args.no_timestamps)
    print(f"OS={report.os_score:.4f} OS*={report.os_star:.4f} "
          f"unknown={report.unknown_acc:.4f}")
    return 0


def cmd_sweep(args) -> int:
    payload = _load_json(args.config)
    for key in ("axis", "values"):
        if key not in payload:
            raise ConfigError(f"{args.config}: missing required key {key!r}")
    unknown = sorted(set(payload) - {"axis", "values", "variants", "task", "train"})
    if unknown:
        raise ConfigError(f"{args.config}: unknown sweep key(s): {', '.join(unknown)}")
    axis = payload["axis"]
    if axis not in SWEEP_AXES:
        raise ConfigError(f"{args.config}: axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = [int(v) for v in payload["values"]]
    variants = payload.get("variants", ["proposed", "source_only"])
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"{args.config}: unknown variant {v!r}")
    spec = _from_flat(SyntheticTaskSpec, payload.get("task", {}), args.config)
    cfg = _from_flat(TrainConfig, payload.get("train", {}), args.config)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
        cfg = dataclasses.replace(cfg, seed=args.seed)

    cells = list(enumerate(values))
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            chunks = pool.map(
                _sweep_worker,
                [(spec, axis, i, value, tuple(variants), cfg) for i, value in cells],
            )
            results = [r for chunk in chunks for r in chunk]
    else:
        results = []
        for i, value in cells:
            results.extend(sweep_cell(spec, axis, i, value, variants, cfg))
    results = merge_results(results)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emit_report(results, out_dir / "sweep.csv", out_dir / "sweep.txt",
                include_timing=not args.no_timestamps)
    _write_manifest(out_dir, {"sweep": {"axis": axis, "values": values, "variants": variants},
                              "task_spec": asdict(spec), "train_config": asdict(cfg),
                              "artifacts": ["sweep.csv", "sweep.txt"]},
                    args.no_timestamps)
    print(f"swept {axis} over {values}: {len(results)} rows -> {out_dir / 'sweep.csv'}")
    return 0


def _sweep_worker(job) -> list[RunResult]:
    spec, axis, i, value, variants, cfg = job
    return sweep_cell(spec, axis, i, value, variants, cfg)


ABLATION_VARIANTS = ("proposed", "wo_d1", "wo_d2", "osbp", "source_only")


def cmd_ablate(args) -> int:
    cfg = load_train_config(args.config, {"seed": args.seed,
                                          "max_iterations": args.max_iterations})
    dataset = load_features_csv(args.data)
    label_space = _label_space(args, dataset)
    results = run_variants(dataset, label_space, cfg, ABLATION_VARIANTS,
                           task_id=Path(args.data).stem)
    results = merge_results(results)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emit_report(results, out_dir / "ablation.csv", out_dir / "ablation.txt",
                include_timing=not args.no_timestamps)
    _write_manifest(out_dir, {"train_config": asdict(cfg), "dataset": str(args.data),
                              "variants": list(ABLATION_VARIANTS),
                              "artifacts": ["ablation.csv", "ablation.txt"]},
                    args.no_timestamps)
    for r in results:
        print(f"{r.variant:12s} OS={r.report.os_score:.4f} OS*={r.report.os_star:.4f}")
    return 0


def cmd_grad_check(args) -> int:
    results = run_suite(seed=args.seed if args.seed is not None else 0,
                        cases_per_check=args.cases, corrupt_op=args.corrupt_op)
    print(format_suite(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="osda",
        description="Desk-scale open-set domain adaptation experiments",
    )
    parser.add_argument("--version", action="version", version=f"osda {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, seed_help: str = "root seed override"):
        p.add_argument("--seed", type=int, default=None, help=seed_help)
        p.add_argument("--no-timestamps", action="store_true",
                       help="omit timestamps/timing so outputs are byte-reproducible")

    p = sub.add_parser("gen-data", help="generate a synthetic open-set task")
    p.add_argument("--spec", help="SyntheticTaskSpec JSON file")
    p.add_argument("--n-shared", type=int, dest="n_shared")
    p.add_argument("--n-target-private", type=int, dest="n_target_private")
    p.add_argument("--samples-per-class", type=int, dest="samples_per_class")
    p.add_argument("--out-dir", required=True)
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant on a dataset")
    p.add_argument("--config", help="TrainConfig JSON file (or a manifest)")
    p.add_argument("--data", required=True, help="feature CSV path")
    p.add_argument("--labels", help="label-space JSON (default: derived from data)")
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--max-iterations", type=int, dest="max_iterations")
    p.add_argument("--out-dir", required=True)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved params on a dataset")
    p.add_argument("--params", required=True, help="params.json from train")
    p.add_argument("--data", required=True)
    p.add_argument("--labels")
    p.add_argument("--variant-name", default="eval", help="variant column value")
    p.add_argument("--out-dir", required=True)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="openness sweep over a task axis")
    p.add_argument("--config", required=True, help="sweep JSON config")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for cells")
    p.add_argument("--out-dir", required=True)
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="run all five variants on one dataset")
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument("--data", required=True)
    p.add_argument("--labels")
    p.add_argument("--max-iterations", type=int, dest="max_iterations")
    p.add_argument("--out-dir", required=True)
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="run the finite-difference gradient suite")
    p.add_argument("--cases", type=int, default=100, help="random cases per check")
    p.add_argument("--corrupt-op", default=None,
                   help="test hook: corrupt the named check's analytic gradient")
    common(p)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (ContractError, DimensionError, DivergenceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUN_ERROR


if __name__ == "__main__":
    sys.exit(main())
