"""End-to-end simultaneous optimization of all three networks.

One `train_step` builds a single graph holding every active objective and
runs one backward pass.  Gradient routing falls out of where values are
detached rather than out of multiple passes:

* the transfer weight enters the adversarial loss as a constant,
* the generator's features are detached before the auxiliary scorer and
  the domain-discriminator terms,
* the confidence factor (from the classifier) is detached inside the
  domain-discriminator terms,

so the generator and classifier move only under the source
cross-entropy plus the adversarial loss (the reversal layer gives the
generator the opposite sign), and the auxiliary scorer moves only under
its one-vs-rest loss plus the domain-discriminator loss.

Variants:
  proposed     weighted adversarial training with the full weighting head
  osbp         fixed-threshold adversarial baseline (w identically t)
  source_only  source cross-entropy only; the negative-transfer reference
  wo_d1        weight is the confidence factor alone; no auxiliary scorer
  wo_d2        weight is the known-class mass alone; discriminator loss
               drops the confidence factor
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import losses, model as model_mod
from .autodiff import Array, Tensor
from .data import Batch, FeatureDataset, LabelSpaceConfig, make_batches
from .errors import ContractError, DivergenceError
from .model import (
    GROUP_AUXILIARY,
    GROUP_CLASSIFIER,
    GROUP_GENERATOR,
    AdaptationModel,
    ModelConfig,
    known_confidence_np,
    known_mass_np,
)

VARIANTS = ("proposed", "osbp", "source_only", "wo_d1", "wo_d2")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs besides the dataset itself."""

    variant: str = "proposed"
    lr: float = 0.001
    momentum: float = 0.9
    classifier_lr_multiplier: float = 1.0
    batch_per_domain: int = 32
    max_iterations: int = 2000
    grl_lambda: float = 1.0
    fixed_t: float = 0.5
    eps: float = 1e-7
    seed: int = 0
    eval_every: int = 100
    hidden_dim: int = 64
    embed_dim: int = 32
    use_batch_norm: bool = False
    # Diagnostic hook: replaces the whole weighting module with a constant
    # (no auxiliary training), which must reproduce the osbp trajectory
    # bit for bit when set to the same value as fixed_t.
    weight_stub: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.lr <= 0:
            raise ContractError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.max_iterations < 0:
            raise ContractError(f"max_iterations must be >= 0, got {self.max_iterations}")
        if self.eval_every < 1:
            raise ContractError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.weight_stub is not None and self.variant != "proposed":
            raise ContractError("weight_stub only applies to the proposed variant")


@dataclass
class TracePoint:
    """Mean weighting-head factors over the full target set at one log step."""

    iteration: int
    known: dict[str, float]  # mean_d1, mean_d2, mean_w over true shared-class rows
    unknown: dict[str, float]  # same over true target-private rows


@dataclass
class LogPoint:
    iteration: int
    loss: dict[str, float]
    trace: TracePoint | None = None


@dataclass
class TrainState:
    model: AdaptationModel
    iteration: int = 0
    log: list[LogPoint] = field(default_factory=list)
    wall_seconds: float = 0.0


def _groups_for(variant: str, stubbed: bool) -> tuple[str, ...]:
    if variant in ("proposed", "wo_d2") and not stubbed:
        return (GROUP_GENERATOR, GROUP_CLASSIFIER, GROUP_AUXILIARY)
    return (GROUP_GENERATOR, GROUP_CLASSIFIER)


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> dict[str, float]:
    """One simultaneous update; returns the step's loss values by name."""
    m = state.model
    store = m.store
    stubbed = cfg.weight_stub is not None
    store.zero_grads()

    xs = ad.tensor(batch.source_x)
    xt = ad.tensor(batch.target_x)
    loss_values: dict[str, float] = {}
    terms: list[Tensor] = []

    feat_s = m.features(xs)
    probs_s = m.class_probs(feat_s)
    e_cls = losses.source_ce(probs_s, batch.source_y, cfg.eps)
    terms.append(e_cls)
    loss_values["source_ce"] = e_cls.item()

    if cfg.variant != "source_only":
        feat_t = m.features(xt)
        reversed_t = ad.grad_reverse(feat_t, cfg.grl_lambda)
        probs_t = m.class_probs(reversed_t)
        p_unknown = ad.column(probs_t, m.config.n_known)

        aux_t = None
        if cfg.variant in ("proposed", "wo_d2") and not stubbed:
            aux_t = m.known_probs(feat_t.detach())

        confidence_t = 1.0 - p_unknown.data  # d2 values, already a constant
        if stubbed:
            w = np.full(p_unknown.data.shape, cfg.weight_stub)
        elif cfg.variant == "osbp":
            w = np.full(p_unknown.data.shape, cfg.fixed_t)
        elif cfg.variant == "wo_d1":
            w = confidence_t
        elif cfg.variant == "wo_d2":
            w = known_mass_np(aux_t.data)
        else:
            w = known_mass_np(aux_t.data) * confidence_t
        e_adv = losses.adv_weighted(p_unknown, w, cfg.eps)
        terms.append(e_adv)
        loss_values["adv"] = e_adv.item()

        if cfg.variant in ("proposed", "wo_d2") and not stubbed:
            aux_s = m.known_probs(feat_s.detach())
            e_aux = losses.aux_one_vs_rest(aux_s, batch.source_y, cfg.eps)
            terms.append(e_aux)
            loss_values["aux_ovr"] = e_aux.item()

            mass_s = model_mod.known_mass(aux_s)
            mass_t = model_mod.known_mass(aux_t)
            if cfg.variant == "wo_d2":
                gd_s, gd_t = mass_s, mass_t
            else:
                confidence_s = known_confidence_np(probs_s.data)
                gd_s = ad.mul(mass_s, confidence_s)
                gd_t = ad.mul(mass_t, confidence_t)
            e_disc = losses.domain_disc(gd_s, gd_t, cfg.eps)
            terms.append(e_disc)
            loss_values["domain_disc"] = e_disc.item()

    for name, value in loss_values.items():
        if not math.isfinite(value):
            raise DivergenceError(state.iteration + 1, name, value)

    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    ad.backward(total)

    groups = _groups_for(cfg.variant, stubbed)
    backbone = [g for g in groups if g == GROUP_GENERATOR]
    heads = [g for g in groups if g != GROUP_GENERATOR]
    ad.sgd_step(store, store.grads(backbone), cfg.lr, cfg.momentum, backbone)
    ad.sgd_step(
        store,
        store.grads(heads),
        cfg.lr * cfg.classifier_lr_multiplier,
        cfg.momentum,
        heads,
    )
    state.iteration += 1
    return loss_values


def _trace(model: AdaptationModel, dataset: FeatureDataset,
           label_space: LabelSpaceConfig, iteration: int) -> TracePoint:
    """Weighting-head means over the full target set, split by true group.

    Uses the target labels, so it belongs to the evaluator's side of the
    fence; nothing here feeds back into training.
    """
    target_x, target_y = dataset.domain_slice("target")
    feat = model.features_np(target_x)
    mass = known_mass_np(model.known_probs_np(feat))
    confidence = known_confidence_np(model.class_probs_np(feat))
    weight = mass * confidence
    shared = set(label_space.shared)
    known_rows = np.array([label in shared for label in target_y])

    def group_means(rows: np.ndarray) -> dict[str, float]:
        if not rows.any():
            return {"mean_d1": float("nan"), "mean_d2": float("nan"), "mean_w": float("nan")}
        return {
            "mean_d1": float(mass[rows].mean()),
            "mean_d2": float(confidence[rows].mean()),
            "mean_w": float(weight[rows].mean()),
        }

    return TracePoint(iteration, group_means(known_rows), group_means(~known_rows))


def standard_benchmark_config(variant: str = "proposed", seed: int = 0) -> TrainConfig:
    """Run settings for the scaled-down benchmark task.

    A from-scratch MLP replaces a pretrained backbone, so the backbone
    learning rate sits below the default and the head multiplier keeps
    the classifier and scorer ahead of the generator; the wider safe-log
    epsilon bounds the adversarial gradients the small networks see.
    Verified to satisfy the no-negative-transfer, baseline-ordering, and
    weight-separation checks as medians over seeds 0..4.
    """
    return TrainConfig(
        variant=variant,
        lr=1e-4,
        classifier_lr_multiplier=2.0,
        grl_lambda=1.0,
        eps=1e-4,
        batch_per_domain=32,
        max_iterations=2000,
        eval_every=100,
        seed=seed,
    )


def build_model(dataset: FeatureDataset, label_space: LabelSpaceConfig,
                cfg: TrainConfig) -> AdaptationModel:
    model_cfg = ModelConfig(
        input_dim=dataset.feature_dim,
        n_known=len(label_space.source_labels),
        hidden_dim=cfg.hidden_dim,
        embed_dim=cfg.embed_dim,
        use_batch_norm=cfg.use_batch_norm,
    )
    return AdaptationModel(model_cfg, cfg.seed)


def encode_labels(labels: Array, label_space: LabelSpaceConfig) -> Array:
    """Map dataset label ids to model class indices (source order)."""
    index = {label: i for i, label in enumerate(label_space.source_labels)}
    try:
        return np.array([index[label] for label in labels.tolist()], dtype=np.int64)
    except KeyError as exc:
        raise ContractError(f"source label {exc.args[0]} not in the label space") from None


def train_run(
    dataset: FeatureDataset,
    label_space: LabelSpaceConfig,
    cfg: TrainConfig,
    model: AdaptationModel | None = None,
) -> tuple[AdaptationModel, TrainState]:
    """Run cfg.max_iterations steps, logging losses and weight traces.

    There is no source-only warm-up phase: every objective is optimized
    from the first iteration.  Deterministic per (cfg, seed).
    """
    if model is None:
        model = build_model(dataset, label_space, cfg)
    state = TrainState(model)
    start = time.perf_counter()
    batches = make_batches(dataset, cfg.batch_per_domain, cfg.seed)
    for _ in range(cfg.max_iterations):
        batch = next(batches)
        encoded = Batch(batch.source_x, encode_labels(batch.source_y, label_space), batch.target_x)
        loss_values = train_step(state, encoded, cfg)
        t = state.iteration
        if t % cfg.eval_every == 0 or t == cfg.max_iterations:
            state.log.append(
                LogPoint(t, dict(loss_values), _trace(model, dataset, label_space, t))
            )
    state.wall_seconds = time.perf_counter() - start
    return model, state
