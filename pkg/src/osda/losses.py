"""The five scalar training objectives.

All losses are batch means, route every probability through safe_log
with a shared epsilon, and are non-negative for valid inputs.  Each is a
pure function of tensors already on the tape.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DEFAULT_EPS, Array, Tensor
from .errors import ContractError


def _check_labels(probs: Tensor, labels: Array, loss: str) -> Array:
    labels = np.asarray(labels)
    n_classes = probs.data.shape[1]
    if labels.ndim != 1 or labels.shape[0] != probs.data.shape[0]:
        raise ContractError(
            f"{loss}: labels shape {labels.shape} does not match batch "
            f"{probs.data.shape[0]}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(
            f"{loss}: labels must lie in [0, {n_classes}), got "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels


def source_ce(class_probs: Tensor, labels: Array, eps: float = DEFAULT_EPS) -> Tensor:
    """Mean cross-entropy of the classifier on labeled source samples.

    Labels index the known classes only; the unknown column never
    receives a positive label.
    """
    labels = _check_labels(class_probs, labels, "source_ce")
    if labels.size and labels.max() >= class_probs.data.shape[1] - 1:
        raise ContractError(
            "source_ce: source labels must be known classes "
            f"(< {class_probs.data.shape[1] - 1})"
        )
    picked = ad.take_per_row(class_probs, labels)
    return ad.neg(ad.mean_all(ad.safe_log(picked, eps)))


def adv_weighted(p_unknown: Tensor, weights: Array, eps: float = DEFAULT_EPS) -> Tensor:
    """Per-sample weighted binary cross-entropy on the unknown probability.

    -(1/n) sum_j [w_j log p_j + (1 - w_j) log(1 - p_j)].  `weights` is a
    plain array: the weighting head's output enters as a constant so no
    gradient leaks back into the networks that produced it.  Minimized
    over p at p = w; the classifier descends it while the generator
    ascends it through the reversal layer placed upstream.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != p_unknown.data.shape:
        raise ContractError(
            f"adv_weighted: weights shape {w.shape} does not match "
            f"p_unknown {p_unknown.data.shape}"
        )
    pos = ad.mul(ad.safe_log(p_unknown, eps), w)
    neg_ = ad.mul(ad.safe_log(ad.one_minus(p_unknown), eps), 1.0 - w)
    return ad.neg(ad.mean_all(ad.add(pos, neg_)))


def adv_fixed(p_unknown: Tensor, t: float, eps: float = DEFAULT_EPS) -> Tensor:
    """Fixed-threshold adversarial loss: adv_weighted with w identically t."""
    return adv_weighted(p_unknown, np.full(p_unknown.data.shape, t), eps)


def aux_one_vs_rest(aux_probs: Tensor, labels: Array, eps: float = DEFAULT_EPS) -> Tensor:
    """One-vs-rest binary loss training the auxiliary scorer on source labels.

    -(1/n) sum_i [log p_i[y_i] + sum_{k != y_i} log(1 - p_i[k])].
    """
    labels = _check_labels(aux_probs, labels, "aux_one_vs_rest")
    log_p = ad.safe_log(aux_probs, eps)
    log_not_p = ad.safe_log(ad.one_minus(aux_probs), eps)
    pos = ad.take_per_row(log_p, labels)
    rest = ad.add(ad.row_sum(log_not_p), ad.neg(ad.take_per_row(log_not_p, labels)))
    return ad.neg(ad.mean_all(ad.add(pos, rest)))


def domain_disc(gd_source: Tensor, gd_target: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Binary domain loss over the weighting head's outputs.

    -(1/n_s) sum log gd_s - (1/n_t) sum log(1 - gd_t).  Callers pass
    transfer weights with the confidence factor detached, so its gradient
    reaches only the auxiliary scorer.
    """
    src = ad.neg(ad.mean_all(ad.safe_log(gd_source, eps)))
    tgt = ad.neg(ad.mean_all(ad.safe_log(ad.one_minus(gd_target), eps)))
    return ad.add(src, tgt)
