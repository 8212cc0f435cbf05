"""Open-set metrics, sweeps, and report files.

The headline numbers are macro-averaged per-class recalls: OS averages
over the shared classes plus the unified unknown class, OS* over the
shared classes only.  Known classes with no target rows are excluded
from the averages rather than counted as zero, so sweep cells with
missing classes are not penalized; every report records how many classes
actually entered each mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    TARGET,
    FeatureDataset,
    LabelSpaceConfig,
    SyntheticTaskSpec,
    generate_synthetic_task,
)
from .errors import ContractError
from .model import AdaptationModel, predict
from .rng import STREAM_SWEEP_CELL, derive_seed
from .train import TrainConfig, TrainState, train_run

UNKNOWN_NAME = "unknown"


@dataclass(frozen=True)
class MetricsReport:
    """Per-class recalls and their macro averages for one evaluation."""

    class_order: tuple[str, ...]  # row/column labels; last entry is "unknown"
    confusion: np.ndarray  # [k+1, k+1] counts, rows true, columns predicted
    per_class: dict[str, float]  # recall per evaluated class
    os_score: float  # mean recall over evaluated known classes + unknown
    os_star: float  # mean recall over evaluated known classes
    unknown_acc: float  # recall of the unified unknown class (nan if absent)
    n_known_evaluated: int


def evaluate(
    model: AdaptationModel, dataset: FeatureDataset, label_space: LabelSpaceConfig
) -> MetricsReport:
    """Score the model on the dataset's target rows.

    Target-private classes are unified into one unknown row before
    counting; predictions never see the true labels, so unifying before
    or after prediction gives the same matrix.
    """
    target_x, target_y = dataset.domain_slice(TARGET)
    if target_x.shape[0] == 0:
        raise ContractError("evaluate: dataset contains no target rows")
    n_known = len(label_space.source_labels)
    if model.config.n_known != n_known:
        raise ContractError(
            f"evaluate: model has {model.config.n_known} known classes, "
            f"label space has {n_known}"
        )
    shared = list(label_space.shared)
    pred_idx = predict(model.class_probs_np(model.features_np(target_x)), n_known)

    k = len(shared)
    shared_row = {label: i for i, label in enumerate(shared)}
    confusion = np.zeros((k + 1, k + 1), dtype=np.int64)
    source_labels = list(label_space.source_labels)
    for true_label, p in zip(target_y.tolist(), pred_idx.tolist()):
        row = shared_row.get(true_label, k)
        if p == n_known:
            col = k
        else:
            pred_label = source_labels[p]
            if pred_label in shared_row:
                col = shared_row[pred_label]
            else:
                # Prediction of a source-private class: a known-class error
                # for every target row. Park it in a deterministic
                # off-diagonal cell so recalls stay exact.
                col = 0 if row != 0 else (1 if k >= 2 else k)
        confusion[row, col] += 1

    per_class: dict[str, float] = {}
    known_recalls: list[float] = []
    for i, label in enumerate(shared):
        total = confusion[i].sum()
        if total > 0:
            recall = confusion[i, i] / total
            per_class[str(label)] = float(recall)
            known_recalls.append(float(recall))
    unknown_total = confusion[k].sum()
    unknown_acc = float(confusion[k, k] / unknown_total) if unknown_total > 0 else float("nan")
    if unknown_total > 0:
        per_class[UNKNOWN_NAME] = unknown_acc

    os_star = float(np.mean(known_recalls)) if known_recalls else float("nan")
    included = known_recalls + ([unknown_acc] if unknown_total > 0 else [])
    os_score = float(np.mean(included)) if included else float("nan")

    return MetricsReport(
        class_order=tuple(str(c) for c in shared) + (UNKNOWN_NAME,),
        confusion=confusion,
        per_class=per_class,
        os_score=os_score,
        os_star=os_star,
        unknown_acc=unknown_acc,
        n_known_evaluated=len(known_recalls),
    )


def negative_transfer_delta(method: MetricsReport, source_only: MetricsReport) -> float:
    """OS(method) - OS(source-only); negative values flag negative transfer."""
    return method.os_score - source_only.os_score


@dataclass
class RunResult:
    """One trained-and-evaluated cell, ready for report emission."""

    variant: str
    task_id: str
    seed: int
    report: MetricsReport
    iterations: int
    wall_seconds: float
    neg_transfer_delta: float = float("nan")
    state: TrainState | None = field(default=None, repr=False)


def run_variants(
    dataset: FeatureDataset,
    label_space: LabelSpaceConfig,
    cfg: TrainConfig,
    variants: Sequence[str],
    task_id: str,
) -> list[RunResult]:
    """Train and evaluate each variant on one dataset with a shared seed.

    When source_only is among the variants, every result gets its
    negative-transfer delta against it.
    """
    results: list[RunResult] = []
    for variant in variants:
        run_cfg = replace(cfg, variant=variant)
        model, state = train_run(dataset, label_space, run_cfg)
        report = evaluate(model, dataset, label_space)
        results.append(
            RunResult(
                variant=variant,
                task_id=task_id,
                seed=cfg.seed,
                report=report,
                iterations=state.iteration,
                wall_seconds=state.wall_seconds,
                state=state,
            )
        )
    baseline = next((r for r in results if r.variant == "source_only"), None)
    if baseline is not None:
        for r in results:
            r.neg_transfer_delta = negative_transfer_delta(r.report, baseline.report)
    return results


SWEEP_AXES = ("target_private_count", "shared_count")
_AXIS_FIELD = {"target_private_count": "n_target_private", "shared_count": "n_shared"}


def sweep_openness(
    base_spec: SyntheticTaskSpec,
    axis: str,
    values: Sequence[int],
    variants: Sequence[str],
    cfg: TrainConfig,
) -> list[RunResult]:
    """Regenerate the task per axis value and run every variant on each cell.

    Each cell draws a fresh seed stream derived from the base spec's
    seed, so the whole table is deterministic per root seed.
    """
    if axis not in _AXIS_FIELD:
        raise ContractError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    results: list[RunResult] = []
    for i, value in enumerate(values):
        results.extend(sweep_cell(base_spec, axis, i, value, variants, cfg))
    return merge_results(results)


def sweep_cell(
    base_spec: SyntheticTaskSpec,
    axis: str,
    cell_index: int,
    value: int,
    variants: Sequence[str],
    cfg: TrainConfig,
) -> list[RunResult]:
    """One sweep cell; module-level so process pools can dispatch it."""
    cell_seed = derive_seed(base_spec.seed, STREAM_SWEEP_CELL, cell_index)
    spec = replace(base_spec, **{_AXIS_FIELD[axis]: value, "seed": cell_seed})
    dataset, label_space = generate_synthetic_task(spec)
    cell_cfg = replace(cfg, seed=cell_seed)
    return run_variants(dataset, label_space, cell_cfg, variants, task_id=f"{axis}={value}")


def merge_results(results: Sequence[RunResult]) -> list[RunResult]:
    """Deterministic report order: sort by (variant, task_id, seed)."""
    return sorted(results, key=lambda r: (r.variant, r.task_id, r.seed))


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

REPORT_COLUMNS = (
    "variant",
    "task_id",
    "seed",
    "OS",
    "OS_star",
    "unknown_acc",
    "neg_transfer_delta",
    "iterations",
    "wall_seconds",
)


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def emit_report(
    results: Sequence[RunResult],
    csv_path: str | Path,
    text_path: str | Path | None = None,
    include_timing: bool = True,
) -> None:
    """Write the machine-readable CSV and, optionally, an aligned text table.

    `include_timing=False` zeroes wall_seconds so reruns of the same seed
    produce byte-identical files.
    """
    rows = [
        [
            r.variant,
            r.task_id,
            str(r.seed),
            _fmt(r.report.os_score),
            _fmt(r.report.os_star),
            _fmt(r.report.unknown_acc),
            _fmt(r.neg_transfer_delta),
            str(r.iterations),
            _fmt(r.wall_seconds if include_timing else 0.0),
        ]
        for r in results
    ]
    lines = [",".join(REPORT_COLUMNS)] + [",".join(row) for row in rows]
    Path(csv_path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")

    if text_path is not None:
        table = [list(REPORT_COLUMNS)]
        for r in results:
            table.append(
                [
                    r.variant,
                    r.task_id,
                    str(r.seed),
                    f"{r.report.os_score:.4f}",
                    f"{r.report.os_star:.4f}",
                    f"{r.report.unknown_acc:.4f}",
                    f"{r.neg_transfer_delta:+.4f}",
                    str(r.iterations),
                    f"{(r.wall_seconds if include_timing else 0.0):.2f}",
                ]
            )
        widths = [max(len(row[i]) for row in table) for i in range(len(REPORT_COLUMNS))]
        text_lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                      for row in table]
        Path(text_path).write_text("\n".join(text_lines) + "\n", encoding="utf-8", newline="\n")


def parse_report_csv(path: str | Path) -> list[dict[str, object]]:
    """Read an emitted report CSV back into typed rows."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    if tuple(header) != REPORT_COLUMNS:
        raise ContractError(f"unexpected report header: {header}")
    out = []
    for line in lines[1:]:
        parts = line.split(",")
        out.append(
            {
                "variant": parts[0],
                "task_id": parts[1],
                "seed": int(parts[2]),
                "OS": float(parts[3]),
                "OS_star": float(parts[4]),
                "unknown_acc": float(parts[5]),
                "neg_transfer_delta": float(parts[6]),
                "iterations": int(parts[7]),
                "wall_seconds": float(parts[8]),
            }
        )
    return out


def write_weight_trace(state: TrainState, path: str | Path) -> None:
    """Long-format trace CSV: iter,group,mean_d1,mean_d2,mean_w."""
    lines = ["iter,group,mean_d1,mean_d2,mean_w"]
    for point in state.log:
        if point.trace is None:
            continue
        for group_name, means in (("known", point.trace.known), ("unknown", point.trace.unknown)):
            lines.append(
                f"{point.trace.iteration},{group_name},"
                f"{_fmt(means['mean_d1'])},{_fmt(means['mean_d2'])},{_fmt(means['mean_w'])}"
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def check_report_identity(report: MetricsReport, tol: float = 1e-12) -> bool:
    """OS equals (k*OS* + unknown_acc)/(k+1) over the evaluated classes."""
    k = report.n_known_evaluated
    if math.isnan(report.unknown_acc):
        return math.isclose(report.os_score, report.os_star, abs_tol=tol)
    expected = (k * report.os_star + report.unknown_acc) / (k + 1)
    return abs(report.os_score - expected) <= tol
