"""Transfer-learning strategies: adversarial, discrepancy-based, and warm-start.

Four ways to build a classifier for a target domain from labeled source
data:

* :func:`train_dann` trains a feature extractor and label predictor
  against a domain discriminator through a gradient-reversal layer, so
  the features stop telling source and target apart. A supervised
  variant additionally trains on target labels.
* :func:`train_mcd` alternates three phases per batch: fit both twin
  classifiers on source, push the classifiers apart on unlabeled target
  data, then pull the feature generator back to shrink that disagreement.
* :func:`fine_tune` warm-starts from a trained source network and
  retrains a chosen suffix of layers on labeled target data.
* :func:`train_source_baseline` / :func:`train_target_baseline` are the
  no-transfer reference points.

Every trainer is deterministic given its config seed; sub-networks are
drawn from one sequential stream so a composed model and its monolithic
equivalent start from identical parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bayesnet import Dataset, one_hot
from .divergence import LambdaSchedule, resolve_lambda
from .nn import (
    SGD,
    SOURCE_STREAM,
    TARGET_STREAM,
    Network,
    NetworkSpec,
    TrainConfig,
    domain_classifier,
    epoch_batches,
    feature_extractor,
    init_network,
    init_networks,
    label_predictor,
    mcd_classifier,
    train_classifier,
)

__all__ = [
    "DannSpecs",
    "DannModel",
    "McdSpecs",
    "McdModel",
    "McdTrainer",
    "FreezeStrategy",
    "discrepancy",
    "train_dann",
    "train_mcd",
    "fine_tune",
    "train_source_baseline",
    "train_target_baseline",
]

discrepancy = ad.discrepancy


# ---------------------------------------------------------------------------
# DANN
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DannSpecs:
    """Architectures for the three DANN sub-networks."""

    feature: NetworkSpec
    label: NetworkSpec
    domain: NetworkSpec

    @classmethod
    def default(cls, in_width: int, classes: int = 4, domain_hidden: int = 1024,
                relu_before_softmax: bool = True) -> "DannSpecs":
        return cls(feature_extractor(in_width),
                   label_predictor(classes, relu_before_softmax),
                   domain_classifier(domain_hidden))

    def __post_init__(self):
        if self.feature.out_width != self.label.in_width:
            raise ValueError("feature extractor output width does not match "
                             "label predictor input")
        if self.feature.out_width != self.domain.in_width:
            raise ValueError("feature extractor output width does not match "
                             "domain classifier input")


@dataclass
class DannModel:
    """Trained DANN: prediction runs the label head on extracted features."""

    feature: Network
    label: Network
    domain: Network
    lambda_value: float

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return self.label.predict_proba(self.feature.predict_proba(features))


def train_dann(source: Dataset, target: Dataset, cfg: TrainConfig,
               schedule: LambdaSchedule, kl: float = 0.0,
               specs: DannSpecs | None = None,
               use_target_labels: bool = False) -> DannModel:
    """Adversarial domain-adaptation training.

    Each step draws one source batch and one target batch (the smaller
    set cycles). The loss is source cross-entropy, plus target
    cross-entropy when ``use_target_labels`` is set, plus the domain
    discriminator's binary cross-entropy on both batches; the domain
    branch runs through a gradient-reversal layer with weight
    ``resolve_lambda(schedule, kl)``. Domain labels: source 0, target 1.
    """
    if not source.labeled:
        raise ValueError("train_dann needs labeled source data")
    if use_target_labels and not target.labeled:
        raise ValueError("use_target_labels requires labeled target data")
    if cfg.epochs < 1:
        raise ValueError("epochs must be >= 1 to train")
    xs_all = one_hot(source)
    xt_all = one_hot(target)
    if xs_all.shape[1] != xt_all.shape[1]:
        raise ValueError("source and target one-hot widths differ")
    if specs is None:
        specs = DannSpecs.default(xs_all.shape[1])
    lam = resolve_lambda(schedule, kl)

    gf, gy, gd = init_networks([specs.feature, specs.label, specs.domain], cfg.seed)
    opt = SGD(gf.parameters() + gy.parameters() + gd.parameters(),
              cfg.lr, cfg.momentum)
    for epoch in range(cfg.epochs):
        src_batches = epoch_batches(len(source), cfg.batch_size, cfg.seed,
                                    epoch, SOURCE_STREAM)
        tgt_batches = epoch_batches(len(target), cfg.batch_size, cfg.seed,
                                    epoch, TARGET_STREAM)
        for step, sidx in enumerate(src_batches):
            tidx = tgt_batches[step % len(tgt_batches)]
            feats_s = gf.forward(Tensor(xs_all[sidx]), train=True)
            loss = ad.cross_entropy(gy.forward(feats_s, train=True),
                                    source.labels[sidx])
            feats_t = gf.forward(Tensor(xt_all[tidx]), train=True)
            if use_target_labels:
                loss = ad.add(loss, ad.cross_entropy(
                    gy.forward(feats_t, train=True), target.labels[tidx]))
            dom_s = gd.forward(ad.grad_reverse(feats_s, lam), train=True)
            dom_t = gd.forward(ad.grad_reverse(feats_t, lam), train=True)
            domain_loss = ad.add(
                ad.binary_cross_entropy(dom_s, np.zeros(len(sidx))),
                ad.binary_cross_entropy(dom_t, np.ones(len(tidx))))
            loss = ad.add(loss, domain_loss)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
    return DannModel(gf, gy, gd, lam)


# ---------------------------------------------------------------------------
# MCD
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class McdSpecs:
    """Generator spec plus the shared spec of the twin classifiers."""

    generator: NetworkSpec
    classifier: NetworkSpec

    @classmethod
    def default(cls, in_width: int, classes: int = 4) -> "McdSpecs":
        return cls(feature_extractor(in_width), mcd_classifier(classes))

    def __post_init__(self):
        if self.generator.out_width != self.classifier.in_width:
            raise ValueError("generator output width does not match classifiers")


@dataclass
class McdModel:
    """Trained MCD triple; inference uses F1, F2, or their softmax average."""

    generator: Network
    f1: Network
    f2: Network
    lambda_value: float
    n_c: int
    inference: str = "f1"

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        feats = self.generator.predict_proba(features)
        if self.inference == "f1":
            return self.f1.predict_proba(feats)
        if self.inference == "f2":
            return self.f2.predict_proba(feats)
        if self.inference == "average":
            return 0.5 * (self.f1.predict_proba(feats) + self.f2.predict_proba(feats))
        raise ValueError(f"unknown inference mode {self.inference!r}")


class McdTrainer:
    """One trainer instance per run; the three phase methods are exposed so
    their update scoping (which sub-network moves in which phase) is
    directly checkable."""

    def __init__(self, source: Dataset, target: Dataset, cfg: TrainConfig,
                 lam: float, n_c: int = 4, specs: McdSpecs | None = None,
                 inference: str = "f1"):
        if not source.labeled:
            raise ValueError("train_mcd needs labeled source data")
        if target is None or len(target) == 0:
            raise ValueError("train_mcd needs target data")
        if cfg.epochs < 1:
            raise ValueError("epochs must be >= 1 to train")
        if n_c < 1:
            raise ValueError(f"n_c must be >= 1, got {n_c}")
        self.xs = one_hot(source)
        self.xt = one_hot(target)
        if self.xs.shape[1] != self.xt.shape[1]:
            raise ValueError("source and target one-hot widths differ")
        if specs is None:
            specs = McdSpecs.default(self.xs.shape[1])
        self.source = source
        self.target = target
        self.cfg = cfg
        self.lam = lam
        self.n_c = n_c
        self.inference = inference
        # F1 and F2 share a spec but are drawn consecutively from the
        # stream, so their initial parameters differ.
        self.g, self.f1, self.f2 = init_networks(
            [specs.generator, specs.classifier, specs.classifier], cfg.seed)
        self.opt_g = SGD(self.g.parameters(), cfg.lr, cfg.momentum)
        self.opt_f = SGD(self.f1.parameters() + self.f2.parameters(),
                         cfg.lr, cfg.momentum)

    def _source_loss(self, sidx: np.ndarray) -> Tensor:
        feats = self.g.forward(Tensor(self.xs[sidx]), train=True)
        labels = self.source.labels[sidx]
        return ad.add(
            ad.cross_entropy(self.f1.forward(feats, train=True), labels),
            ad.cross_entropy(self.f2.forward(feats, train=True), labels))

    def _target_discrepancy(self, tidx: np.ndarray) -> Tensor:
        feats = self.g.forward(Tensor(self.xt[tidx]), train=True)
        return ad.discrepancy(self.f1.forward(feats, train=True),
                              self.f2.forward(feats, train=True))

    def step_a(self, sidx: np.ndarray) -> None:
        """Fit generator and both classifiers to the source batch."""
        loss = self._source_loss(sidx)
        self.opt_g.zero_grad()
        self.opt_f.zero_grad()
        ad.backward(loss)
        self.opt_g.step()
        self.opt_f.step()

    def step_b(self, sidx: np.ndarray, tidx: np.ndarray) -> None:
        """Move only the classifiers: keep source fit, widen target disagreement."""
        loss = ad.sub(self._source_loss(sidx),
                      ad.scale(self._target_discrepancy(tidx), self.lam))
        self.opt_g.zero_grad()
        self.opt_f.zero_grad()
        ad.backward(loss)
        self.opt_f.step()

    def step_c(self, tidx: np.ndarray) -> None:
        """Move only the generator to shrink the classifiers' disagreement."""
        loss = self._target_discrepancy(tidx)
        self.opt_g.zero_grad()
        self.opt_f.zero_grad()
        ad.backward(loss)
        self.opt_g.step()

    def run(self) -> McdModel:
        cfg = self.cfg
        for epoch in range(cfg.epochs):
            src_batches = epoch_batches(len(self.source), cfg.batch_size,
                                        cfg.seed, epoch, SOURCE_STREAM)
            tgt_batches = epoch_batches(len(self.target), cfg.batch_size,
                                        cfg.seed, epoch, TARGET_STREAM)
            for step, sidx in enumerate(src_batches):
                tidx = tgt_batches[step % len(tgt_batches)]
                self.step_a(sidx)
                self.step_b(sidx, tidx)
                for _ in range(self.n_c):
                    self.step_c(tidx)
        return McdModel(self.g, self.f1, self.f2, self.lam, self.n_c,
                        self.inference)


def train_mcd(source: Dataset, target: Dataset, cfg: TrainConfig,
              lam: float = 1.0, n_c: int = 4, specs: McdSpecs | None = None,
              inference: str = "f1") -> McdModel:
    """Discrepancy-based adaptation; see :class:`McdTrainer` for the phases."""
    return McdTrainer(source, target, cfg, lam, n_c, specs, inference).run()


# ---------------------------------------------------------------------------
# Model-based transfer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FreezeStrategy:
    """Which layers to retrain when warm-starting from a source network.

    Layer counting is by fully-connected layer; a batch-norm or activation
    groups with the fully-connected layer it follows.
    """

    mode: str
    k: int = 0

    def __post_init__(self):
        if self.mode not in ("retrain_all", "freeze_first_k", "retrain_last_k"):
            raise ValueError(f"unknown freeze mode {self.mode!r}")
        if self.mode != "retrain_all" and self.k < 1:
            raise ValueError(f"{self.mode} needs k >= 1, got {self.k}")

    @classmethod
    def retrain_all(cls) -> "FreezeStrategy":
        return cls("retrain_all")

    @classmethod
    def freeze_first(cls, k: int) -> "FreezeStrategy":
        return cls("freeze_first_k", k)

    @classmethod
    def retrain_last(cls, k: int) -> "FreezeStrategy":
        return cls("retrain_last_k", k)


def _fc_groups(spec: NetworkSpec) -> list[list[int]]:
    """Layer indices grouped by the fully-connected layer they follow."""
    groups: list[list[int]] = []
    for idx, layer in enumerate(spec.layers):
        if layer[0] == "fc":
            groups.append([idx])
        else:
            groups[-1].append(idx)
    return groups


def trainable_layer_sets(spec: NetworkSpec, strategy: FreezeStrategy,
                         ) -> tuple[set[int], frozenset[int]]:
    """Resolve a strategy to (trainable layer indices, frozen batch-norm indices)."""
    groups = _fc_groups(spec)
    depth = len(groups)
    if strategy.mode == "retrain_all":
        chosen = range(depth)
    elif strategy.mode == "freeze_first_k":
        if strategy.k >= depth:
            raise ValueError(
                f"freeze_first_k({strategy.k}) leaves nothing to train in a "
                f"{depth}-layer network")
        chosen = range(strategy.k, depth)
    else:
        if strategy.k > depth:
            raise ValueError(
                f"retrain_last_k({strategy.k}) exceeds the {depth} layers available")
        chosen = range(depth - strategy.k, depth)
    trainable = {idx for g in chosen for idx in groups[g]}
    frozen_bn = frozenset(
        idx for idx, layer in enumerate(spec.layers)
        if layer[0] == "batch_norm" and idx not in trainable)
    return trainable, frozen_bn


def fine_tune(source_model: Network, target: Dataset, strategy: FreezeStrategy,
              cfg: TrainConfig) -> Network:
    """Warm-start from a source network and retrain the chosen layers.

    Frozen layers keep their parameters bitwise, and frozen batch-norm
    layers also keep their running statistics (they run in eval mode
    during retraining). Zero epochs returns the warm start untouched.
    """
    if not target.labeled:
        raise ValueError("fine_tune needs labeled target data")
    net = source_model.copy()
    trainable, frozen_bn = trainable_layer_sets(net.spec, strategy)
    if cfg.epochs == 0:
        return net
    return train_classifier(net, target, cfg, trainable_layers=trainable,
                            eval_bn_layers=frozen_bn)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def train_source_baseline(data: Dataset, spec: NetworkSpec,
                          cfg: TrainConfig) -> Network:
    """Plain classifier on source data only."""
    return train_classifier(init_network(spec, cfg.seed), data, cfg)


def train_target_baseline(data: Dataset, spec: NetworkSpec,
                          cfg: TrainConfig) -> Network:
    """Plain classifier on target data only."""
    return train_classifier(init_network(spec, cfg.seed), data, cfg)


# ---------------------------------------------------------------------------
# Trained-model bundles
# ---------------------------------------------------------------------------

BUNDLE_FORMAT_VERSION = 1


def save_bundle(model: Network | DannModel | McdModel, path,
                metadata: dict | None = None) -> None:
    """Persist a trained model with algorithm metadata in one JSON file."""
    from json import dumps
    from pathlib import Path as _Path

    from .nn import network_to_doc

    doc: dict = {"format": "domainshift-model", "version": BUNDLE_FORMAT_VERSION,
                 "metadata": metadata or {}}
    if isinstance(model, Network):
        doc["algorithm_family"] = "network"
        doc["networks"] = {"net": network_to_doc(model)}
    elif isinstance(model, DannModel):
        doc["algorithm_family"] = "dann"
        doc["lambda"] = model.lambda_value
        doc["networks"] = {"feature": network_to_doc(model.feature),
                           "label": network_to_doc(model.label),
                           "domain": network_to_doc(model.domain)}
    elif isinstance(model, McdModel):
        doc["algorithm_family"] = "mcd"
        doc["lambda"] = model.lambda_value
        doc["n_c"] = model.n_c
        doc["inference"] = model.inference
        doc["networks"] = {"generator": network_to_doc(model.generator),
                           "f1": network_to_doc(model.f1),
                           "f2": network_to_doc(model.f2)}
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    _Path(path).write_text(dumps(doc) + "\n", encoding="utf-8")


def load_bundle(path) -> Network | DannModel | McdModel:
    """Load any trained-model bundle; the result supports predict_proba."""
    from json import loads
    from pathlib import Path as _Path

    from .nn import network_from_doc

    doc = loads(_Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "domainshift-model":
        raise ValueError(f"{path}: not a trained-model bundle")
    if doc.get("version") != BUNDLE_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported bundle version {doc.get('version')!r}")
    nets = doc["networks"]
    family = doc.get("algorithm_family")
    if family == "network":
        return network_from_doc(nets["net"])
    if family == "dann":
        return DannModel(network_from_doc(nets["feature"]),
                         network_from_doc(nets["label"]),
                         network_from_doc(nets["domain"]),
                         float(doc.get("lambda", 0.0)))
    if family == "mcd":
        return McdModel(network_from_doc(nets["generator"]),
                        network_from_doc(nets["f1"]),
                        network_from_doc(nets["f2"]),
                        float(doc.get("lambda", 0.0)),
                        int(doc.get("n_c", 1)),
                        doc.get("inference", "f1"))
    raise ValueError(f"{path}: unknown algorithm family {family!r}")
