"""Synthetic open-set tasks, feature-CSV ingestion, and batching.

The dataset model is deliberately flat: rows of (id, domain, feature
vector, label).  Target labels are present in the container but the
training loop never reads them; only the evaluator and the trace logger
do.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, ParseError
from .rng import (
    STREAM_BATCH_SOURCE,
    STREAM_BATCH_TARGET,
    STREAM_DATA_SOURCE,
    STREAM_DATA_TARGET,
    substream,
)

SOURCE = "source"
TARGET = "target"


@dataclass(frozen=True)
class LabelSpaceConfig:
    """Source and target label sets plus the derived shared/private splits."""

    source_labels: tuple[int, ...]
    target_labels: tuple[int, ...]
    allow_source_private: bool = False

    def __post_init__(self):
        if len(set(self.source_labels)) != len(self.source_labels):
            raise ContractError("source_labels contains duplicates")
        if len(set(self.target_labels)) != len(self.target_labels):
            raise ContractError("target_labels contains duplicates")
        if not self.source_labels:
            raise ContractError("source label set is empty")
        if not self.allow_source_private and self.source_private:
            raise ContractError(
                "source labels must be a subset of target labels unless "
                f"allow_source_private is set; private: {self.source_private}"
            )

    @property
    def shared(self) -> tuple[int, ...]:
        """Classes present in both domains, in source order."""
        target = set(self.target_labels)
        return tuple(c for c in self.source_labels if c in target)

    @property
    def target_private(self) -> tuple[int, ...]:
        """Classes only the target domain contains: the unknowns."""
        source = set(self.source_labels)
        return tuple(c for c in self.target_labels if c not in source)

    @property
    def source_private(self) -> tuple[int, ...]:
        target = set(self.target_labels)
        return tuple(c for c in self.source_labels if c not in target)

    def to_json(self, path: str | Path) -> None:
        payload = {
            "source_labels": list(self.source_labels),
            "target_labels": list(self.target_labels),
            "allow_source_private": self.allow_source_private,
        }
        Path(path).write_text(json.dumps(payload, indent=1) + "\n")

    @staticmethod
    def from_json(path: str | Path) -> "LabelSpaceConfig":
        payload = json.loads(Path(path).read_text())
        return LabelSpaceConfig(
            source_labels=tuple(payload["source_labels"]),
            target_labels=tuple(payload["target_labels"]),
            allow_source_private=bool(payload.get("allow_source_private", False)),
        )


@dataclass
class FeatureDataset:
    """Rows of (id, domain, features, label) sharing one feature width."""

    ids: list[str]
    domains: np.ndarray  # of SOURCE/TARGET strings
    features: np.ndarray  # [n, d] float64
    labels: np.ndarray  # [n] int64

    def __post_init__(self):
        n = len(self.ids)
        if not (len(self.domains) == n and self.features.shape[0] == n and len(self.labels) == n):
            raise ContractError("dataset columns have inconsistent lengths")
        if self.features.ndim != 2:
            raise ContractError("features must be a 2-d array")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def rows(self, domain: str) -> np.ndarray:
        return np.flatnonzero(self.domains == domain)

    def domain_slice(self, domain: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.rows(domain)
        return self.features[idx], self.labels[idx]

    def observed_label_space(self, allow_source_private: bool = False) -> LabelSpaceConfig:
        """Label sets actually present in the rows, in sorted order."""
        src = tuple(sorted(set(self.labels[self.rows(SOURCE)].tolist())))
        tgt = tuple(sorted(set(self.labels[self.rows(TARGET)].tolist())))
        return LabelSpaceConfig(src, tgt, allow_source_private=allow_source_private)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureDataset):
            return NotImplemented
        return (
            self.ids == other.ids
            and np.array_equal(self.domains, other.domains)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Geometry of a synthetic open-set task.

    Class means sit equally spaced on a radius-`radius` circle in the
    first two feature dimensions, with target-private means interleaved
    between shared ones so the unknowns are not trivially separable.
    The domain shift rotates the means by `shift_angle_deg`, adds
    `shift_translation`, and jitters each target sample with extra noise
    of width `shift_noise_sigma`.
    """

    n_shared: int = 4
    n_target_private: int = 4
    n_source_private: int = 0
    samples_per_class: int = 100
    feature_dim: int = 8
    radius: float = 5.0
    noise_sigma: float = 0.3
    shift_angle_deg: float = 12.0
    shift_translation: tuple[float, ...] = (0.4, -0.3)
    shift_noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_shared < 1:
            raise ContractError(f"n_shared must be >= 1, got {self.n_shared}")
        if min(self.n_target_private, self.n_source_private, self.samples_per_class) < 0:
            raise ContractError("class and sample counts must be >= 0")
        if self.feature_dim < 2:
            raise ContractError(
                f"feature_dim must be >= 2 for the rotation shift, got {self.feature_dim}"
            )
        if len(self.shift_translation) > self.feature_dim:
            raise ContractError("shift_translation longer than feature_dim")


def _class_means(spec: SyntheticTaskSpec) -> dict[int, np.ndarray]:
    """Means on the circle; shared and private classes interleaved.

    Class ids: shared = 0..n_shared-1, target-private next, source-private
    last.  Angular slots alternate shared/private so private clusters sit
    between shared ones.
    """
    shared = list(range(spec.n_shared))
    private = list(range(spec.n_shared, spec.n_shared + spec.n_target_private + spec.n_source_private))
    arrangement: list[int] = []
    for i in range(max(len(shared), len(private))):
        if i < len(shared):
            arrangement.append(shared[i])
        if i < len(private):
            arrangement.append(private[i])
    means = {}
    total = len(arrangement)
    for slot, class_id in enumerate(arrangement):
        angle = 2.0 * np.pi * slot / total
        mean = np.zeros(spec.feature_dim)
        mean[0] = spec.radius * np.cos(angle)
        mean[1] = spec.radius * np.sin(angle)
        means[class_id] = mean
    return means


def _shift(spec: SyntheticTaskSpec, mean: np.ndarray) -> np.ndarray:
    theta = np.deg2rad(spec.shift_angle_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shifted = mean.copy()
    shifted[:2] = rot @ mean[:2]
    t = np.asarray(spec.shift_translation, dtype=np.float64)
    shifted[: len(t)] += t
    return shifted


def generate_synthetic_task(spec: SyntheticTaskSpec) -> tuple[FeatureDataset, LabelSpaceConfig]:
    """Sample a source/target dataset from the task geometry, deterministically."""
    means = _class_means(spec)
    shared = list(range(spec.n_shared))
    target_private = list(range(spec.n_shared, spec.n_shared + spec.n_target_private))
    source_private = list(
        range(spec.n_shared + spec.n_target_private,
              spec.n_shared + spec.n_target_private + spec.n_source_private)
    )
    source_classes = shared + source_private
    target_classes = shared + target_private

    rng_s = substream(spec.seed, STREAM_DATA_SOURCE)
    rng_t = substream(spec.seed, STREAM_DATA_TARGET)

    ids: list[str] = []
    domains: list[str] = []
    rows: list[np.ndarray] = []
    labels: list[int] = []
    for class_id in source_classes:
        noise = rng_s.normal(0.0, spec.noise_sigma, size=(spec.samples_per_class, spec.feature_dim))
        for j in range(spec.samples_per_class):
            ids.append(f"s{class_id:03d}_{j:04d}")
            domains.append(SOURCE)
            rows.append(means[class_id] + noise[j])
            labels.append(class_id)
    for class_id in target_classes:
        base = _shift(spec, means[class_id])
        noise = rng_t.normal(0.0, spec.noise_sigma, size=(spec.samples_per_class, spec.feature_dim))
        jitter = rng_t.normal(0.0, spec.shift_noise_sigma, size=(spec.samples_per_class, spec.feature_dim))
        for j in range(spec.samples_per_class):
            ids.append(f"t{class_id:03d}_{j:04d}")
            domains.append(TARGET)
            rows.append(base + noise[j] + jitter[j])
            labels.append(class_id)

    dataset = FeatureDataset(
        ids=ids,
        domains=np.array(domains),
        features=np.array(rows, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64),
    )
    label_space = LabelSpaceConfig(
        source_labels=tuple(source_classes),
        target_labels=tuple(target_classes),
        allow_source_private=spec.n_source_private > 0,
    )
    return dataset, label_space


def standard_benchmark_spec(seed: int = 0) -> SyntheticTaskSpec:
    """The 4-shared + 4-private moderate-shift task the experiments run on.

    Chosen so a nearest-centroid oracle classifies target knowns well
    (the task is learnable) while the domain shift still separates the
    variants; see the training module for the matching run settings.
    """
    return SyntheticTaskSpec(seed=seed)


# ---------------------------------------------------------------------------
# CSV ingestion. Header: id,domain,label,f0,...,f{D-1}. UTF-8, LF endings.
# ---------------------------------------------------------------------------


def save_features_csv(dataset: FeatureDataset, path: str | Path) -> None:
    """Write the dataset; feature values carry 17 significant digits."""
    d = dataset.feature_dim
    header = "id,domain,label," + ",".join(f"f{i}" for i in range(d))
    lines = [header]
    for i in range(len(dataset.ids)):
        feats = ",".join(f"{v:.17g}" for v in dataset.features[i])
        lines.append(f"{dataset.ids[i]},{dataset.domains[i]},{dataset.labels[i]},{feats}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_features_csv(path: str | Path) -> FeatureDataset:
    """Parse a feature CSV; malformed rows raise ParseError with the line number."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[:3] != ["id", "domain", "label"]:
        raise ParseError(f"{path}: line 1: header must start with id,domain,label")
    feature_names = header[3:]
    expected = [f"f{i}" for i in range(len(feature_names))]
    if feature_names != expected or not feature_names:
        raise ParseError(f"{path}: line 1: feature columns must be f0..f{{D-1}}")
    d = len(feature_names)

    ids: list[str] = []
    domains: list[str] = []
    features = np.empty((len(lines) - 1, d), dtype=np.float64)
    labels: list[int] = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 3 + d:
            raise ParseError(
                f"{path}: line {lineno}: expected {3 + d} fields, got {len(parts)}"
            )
        row_id, domain, label_text = parts[0], parts[1], parts[2]
        if domain not in (SOURCE, TARGET):
            raise ParseError(
                f"{path}: line {lineno}: unknown domain tag {domain!r} "
                f"(expected {SOURCE!r} or {TARGET!r})"
            )
        try:
            label = int(label_text)
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: bad label {label_text!r}") from None
        if label < 0:
            raise ParseError(f"{path}: line {lineno}: label must be >= 0, got {label}")
        try:
            row = [float(v) for v in parts[3:]]
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: non-numeric feature value") from None
        if not all(np.isfinite(row)):
            raise ParseError(f"{path}: line {lineno}: non-finite feature value")
        ids.append(row_id)
        domains.append(domain)
        features[lineno - 2] = row
        labels.append(label)

    return FeatureDataset(
        ids=ids,
        domains=np.array(domains),
        features=features,
        labels=np.array(labels, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray


def make_batches(
    dataset: FeatureDataset, batch_per_domain: int, seed: int
) -> Iterator[Batch]:
    """Endless stream of equal-size source/target batches.

    Within an epoch each domain samples without replacement from a
    seeded shuffle; partial final batches are dropped and the domain
    reshuffles, so the shorter domain simply recycles faster.
    """
    if batch_per_domain < 1:
        raise ContractError(f"batch_per_domain must be >= 1, got {batch_per_domain}")
    src_idx = dataset.rows(SOURCE)
    tgt_idx = dataset.rows(TARGET)
    if len(src_idx) < batch_per_domain or len(tgt_idx) < batch_per_domain:
        raise ContractError(
            f"batch_per_domain={batch_per_domain} exceeds a domain size "
            f"(source={len(src_idx)}, target={len(tgt_idx)})"
        )
    rng_s = substream(seed, STREAM_BATCH_SOURCE)
    rng_t = substream(seed, STREAM_BATCH_TARGET)

    def domain_stream(idx: np.ndarray, rng: np.random.Generator) -> Iterator[np.ndarray]:
        while True:
            perm = rng.permutation(idx)
            for start in range(0, len(perm) - batch_per_domain + 1, batch_per_domain):
                yield perm[start : start + batch_per_domain]

    src_stream = domain_stream(src_idx, rng_s)
    tgt_stream = domain_stream(tgt_idx, rng_t)
    while True:
        s = next(src_stream)
        t = next(tgt_stream)
        yield Batch(
            source_x=dataset.features[s],
            source_y=dataset.labels[s],
            target_x=dataset.features[t],
        )
