"""The three networks and the target-sample weighting head.

* a feature generator (small MLP) shared by both domains,
* the open-set classifier: an affine head producing N+1 softmax
  probabilities, where column N is the unified "unknown" class,
* an auxiliary known-class scorer: an affine head with a leaky-softmax
  output whose row sums deliberately stay below 1.

The weighting head is stateless: it combines the auxiliary scorer's
total known-class mass (written to traces as d1) with the classifier's
complement of the unknown probability (d2) into a per-sample transfer
weight w = d1 * d2 in [0, 1).  High weight marks a target sample as
likely to belong to a shared class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Array, ParamStore, Tensor
from .errors import ContractError, DimensionError
from .rng import STREAM_INIT, substream

GROUP_GENERATOR = "generator"
GROUP_CLASSIFIER = "classifier"
GROUP_AUXILIARY = "auxiliary"

#: Prediction index reserved for the unified unknown class is n_known.
UNKNOWN = -1


@dataclass(frozen=True)
class ModelConfig:
    """Network dimensions; n_known is the number of source classes."""

    input_dim: int
    n_known: int
    hidden_dim: int = 64
    embed_dim: int = 32
    use_batch_norm: bool = False
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.input_dim < 1 or self.n_known < 1:
            raise ContractError(
                f"model dims must be positive, got input_dim={self.input_dim}, "
                f"n_known={self.n_known}"
            )


class AdaptationModel:
    """Parameter container plus tape and tape-free forward passes.

    Initialization draws weights layer by layer in a fixed order from the
    init stream of `seed`, so the generator and classifier weights are
    identical across variants that share a seed.  Biases start at zero.
    """

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.store = ParamStore()
        rng = substream(seed, STREAM_INIT)
        c = config
        self._register("gen.w1", rng, c.input_dim, c.hidden_dim, GROUP_GENERATOR)
        self._register("gen.w2", rng, c.hidden_dim, c.hidden_dim, GROUP_GENERATOR)
        self._register("gen.w3", rng, c.hidden_dim, c.embed_dim, GROUP_GENERATOR)
        if c.use_batch_norm:
            for i, dim in ((1, c.hidden_dim), (2, c.hidden_dim)):
                self.store.register(f"gen.bn{i}.gain", np.ones(dim), GROUP_GENERATOR)
                self.store.register(f"gen.bn{i}.bias", np.zeros(dim), GROUP_GENERATOR)
        self._register("cls.w", rng, c.embed_dim, c.n_known + 1, GROUP_CLASSIFIER)
        self._register("aux.w", rng, c.embed_dim, c.n_known, GROUP_AUXILIARY)

    def _register(self, stem: str, rng, fan_in: int, fan_out: int, group: str) -> None:
        self.store.register(stem, ad.glorot_uniform(rng, fan_in, fan_out), group)
        self.store.register(stem.replace(".w", ".b"), np.zeros(fan_out), group)

    def _p(self, name: str) -> Tensor:
        return self.store[name].value

    # -- tape forwards -----------------------------------------------------

    def features(self, x: Tensor) -> Tensor:
        """Generator MLP: input -> hidden -> hidden -> embedding."""
        if x.data.shape[1] != self.config.input_dim:
            raise DimensionError(
                f"features: expected {self.config.input_dim} input columns, "
                f"got {x.data.shape}"
            )
        h = ad.affine(x, self._p("gen.w1"), self._p("gen.b1"))
        if self.config.use_batch_norm:
            h = ad.batch_norm(h, self._p("gen.bn1.gain"), self._p("gen.bn1.bias"), self.config.bn_eps)
        h = ad.relu(h)
        h = ad.affine(h, self._p("gen.w2"), self._p("gen.b2"))
        if self.config.use_batch_norm:
            h = ad.batch_norm(h, self._p("gen.bn2.gain"), self._p("gen.bn2.bias"), self.config.bn_eps)
        h = ad.relu(h)
        return ad.affine(h, self._p("gen.w3"), self._p("gen.b3"))

    def class_probs(self, feat: Tensor) -> Tensor:
        """(n_known + 1)-way softmax probabilities; column n_known is unknown."""
        return ad.softmax_stable(ad.affine(feat, self._p("cls.w"), self._p("cls.b")))

    def known_probs(self, feat: Tensor) -> Tensor:
        """Auxiliary per-known-class leaky probabilities; row sums < 1."""
        return ad.leaky_softmax(ad.affine(feat, self._p("aux.w"), self._p("aux.b")))

    # -- tape-free forwards (prediction, metrics, traces) -------------------

    def features_np(self, x: Array) -> Array:
        if x.shape[1] != self.config.input_dim:
            raise DimensionError(
                f"features: expected {self.config.input_dim} input columns, got {x.shape}"
            )
        g = lambda n: self.store[n].value.data
        h = ad.affine_forward(x, g("gen.w1"), g("gen.b1"))
        if self.config.use_batch_norm:
            h = ad.batch_norm_forward(h, g("gen.bn1.gain"), g("gen.bn1.bias"), self.config.bn_eps)[0]
        h = ad.relu_forward(h)
        h = ad.affine_forward(h, g("gen.w2"), g("gen.b2"))
        if self.config.use_batch_norm:
            h = ad.batch_norm_forward(h, g("gen.bn2.gain"), g("gen.bn2.bias"), self.config.bn_eps)[0]
        h = ad.relu_forward(h)
        return ad.affine_forward(h, g("gen.w3"), g("gen.b3"))

    def class_probs_np(self, feat: Array) -> Array:
        g = lambda n: self.store[n].value.data
        return ad.softmax_forward(ad.affine_forward(feat, g("cls.w"), g("cls.b")))

    def known_probs_np(self, feat: Array) -> Array:
        g = lambda n: self.store[n].value.data
        return ad.leaky_softmax_forward(ad.affine_forward(feat, g("aux.w"), g("aux.b")))


# ---------------------------------------------------------------------------
# Weighting head
# ---------------------------------------------------------------------------


def known_mass(aux_probs: Tensor) -> Tensor:
    """Total leaky probability mass over the known classes (the d1 factor).

    Strictly inside (0, 1) because the leaky denominator exceeds the sum
    of the numerators.
    """
    return ad.row_sum(aux_probs)


def known_confidence(class_probs: Tensor) -> Tensor:
    """One minus the unknown-class probability (the d2 factor)."""
    n_plus_1 = class_probs.data.shape[1]
    return ad.one_minus(ad.column(class_probs, n_plus_1 - 1))


def transfer_weight(mass: Tensor, confidence: Tensor) -> Tensor:
    """Per-sample weight w = d1 * d2 in [0, 1).

    Callers decide which factors are detached: the adversarial loss uses
    the fully detached product, the domain-discriminator loss keeps the
    auxiliary mass live and detaches the confidence.
    """
    return ad.mul(mass, confidence)


def known_mass_np(aux_probs: Array) -> Array:
    return aux_probs.sum(axis=1)


def known_confidence_np(class_probs: Array) -> Array:
    return 1.0 - class_probs[:, -1]


def predict(class_probs: Array, n_known: int) -> Array:
    """Argmax prediction indices; index n_known means unknown.

    Ties break toward the lowest index.  The argmax is invariant under
    any strictly monotone transform applied uniformly to the logits.
    """
    if class_probs.ndim != 2 or class_probs.shape[1] != n_known + 1:
        raise DimensionError(
            f"predict: expected [Bx{n_known + 1}] probabilities, got {class_probs.shape}"
        )
    return np.argmax(class_probs, axis=1)


# ---------------------------------------------------------------------------
# Model bundle serialization (weights + dims, not optimizer state)
# ---------------------------------------------------------------------------


def save_model(model: AdaptationModel, path: str | Path) -> None:
    """Write config and weights as JSON; floats round-trip exactly."""
    payload = {
        "config": asdict(model.config),
        "params": {
            name: {"group": p.group, "shape": list(p.value.data.shape),
                   "data": p.value.data.ravel().tolist()}
            for name, p in model.store.items()
        },
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_model(path: str | Path) -> AdaptationModel:
    payload = json.loads(Path(path).read_text())
    config = ModelConfig(**payload["config"])
    model = AdaptationModel(config, seed=0)
    values = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    missing = set(model.store.names()) ^ set(values)
    if missing:
        raise ContractError(f"model file parameter names do not match: {sorted(missing)}")
    model.store.load(values)
    return model
