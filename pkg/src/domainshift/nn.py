"""Feedforward networks: declarative specs, initialization, SGD training.

A :class:`NetworkSpec` is an ordered tuple of layer descriptors; a
:class:`Network` binds a spec to parameter tensors and batch-norm state.
Presets cover the architectures used throughout the package: the shared
feature extractor, label predictor, domain classifier, the twin
discrepancy classifiers, and the M1..M6 baselines.

All training here is plain mini-batch SGD with momentum over a seeded
per-epoch shuffle, so identical (spec, data, config) inputs reproduce
parameters bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .bayesnet import Dataset, one_hot
from .seeding import derive_rng

__all__ = [
    "NetworkSpec",
    "Network",
    "TrainConfig",
    "SGD",
    "fc",
    "act",
    "bn",
    "feature_extractor",
    "label_predictor",
    "domain_classifier",
    "mcd_classifier",
    "backbone",
    "model_preset",
    "init_network",
    "init_networks",
    "cross_entropy",
    "binary_cross_entropy",
    "train_classifier",
    "evaluate",
    "save_network",
    "load_network",
]

NETWORK_FORMAT_VERSION = 1

_ACTIVATIONS = ("relu", "sigmoid", "softmax")

# Shuffle-stream labels shared by every trainer so that, e.g., a DANN run
# and a plain classifier run with the same config draw identical source
# batches.
SOURCE_STREAM = 0
TARGET_STREAM = 1

cross_entropy = ad.cross_entropy
binary_cross_entropy = ad.binary_cross_entropy


def fc(in_width: int, out_width: int) -> tuple:
    return ("fc", int(in_width), int(out_width))


def act(kind: str) -> tuple:
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}")
    return (kind,)


def bn(width: int) -> tuple:
    return ("batch_norm", int(width))


@dataclass(frozen=True)
class NetworkSpec:
    """Validated ordered layer list.

    Layers are tuples: ``("fc", in, out)``, ``("batch_norm", width)``,
    ``("relu",)``, ``("sigmoid",)``, ``("softmax",)``. Widths must chain,
    and the spec must start with a fully-connected layer.
    """

    layers: tuple[tuple, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(tuple(l) for l in self.layers))
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        if self.layers[0][0] != "fc":
            raise ValueError("the first layer must be fully connected")
        width = self.layers[0][1]
        for layer in self.layers:
            kind = layer[0]
            if kind == "fc":
                if layer[1] != width:
                    raise ValueError(
                        f"fc input width {layer[1]} does not chain from {width}")
                width = layer[2]
            elif kind == "batch_norm":
                if layer[1] != width:
                    raise ValueError(
                        f"batch_norm width {layer[1]} does not match {width}")
            elif kind not in _ACTIVATIONS:
                raise ValueError(f"unknown layer kind {kind!r}")

    @property
    def in_width(self) -> int:
        return self.layers[0][1]

    @property
    def out_width(self) -> int:
        width = self.in_width
        for layer in self.layers:
            if layer[0] == "fc":
                width = layer[2]
        return width

    @property
    def fc_count(self) -> int:
        return sum(1 for l in self.layers if l[0] == "fc")

    def param_count(self) -> int:
        total = 0
        for layer in self.layers:
            if layer[0] == "fc":
                total += layer[1] * layer[2] + layer[2]
            elif layer[0] == "batch_norm":
                total += 2 * layer[1]
        return total

    def __add__(self, other: "NetworkSpec") -> "NetworkSpec":
        return NetworkSpec(self.layers + other.layers)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

FEATURE_WIDTH = 128


def feature_extractor(in_width: int) -> NetworkSpec:
    """Two 128-wide fully-connected layers with ReLU after each."""
    return NetworkSpec((
        fc(in_width, FEATURE_WIDTH), act("relu"),
        fc(FEATURE_WIDTH, FEATURE_WIDTH), act("relu"),
    ))


def label_predictor(classes: int = 4, relu_before_softmax: bool = True) -> NetworkSpec:
    """One 128-to-classes layer with batch-norm, optional ReLU, then softmax.

    The ReLU sits between the batch-norm and the softmax; pass
    ``relu_before_softmax=False`` to drop it.
    """
    layers = [fc(FEATURE_WIDTH, classes), bn(classes)]
    if relu_before_softmax:
        layers.append(act("relu"))
    layers.append(act("softmax"))
    return NetworkSpec(tuple(layers))


def domain_classifier(hidden: int = 1024) -> NetworkSpec:
    """Three-layer domain discriminator ending in a single sigmoid unit."""
    return NetworkSpec((
        fc(FEATURE_WIDTH, hidden), bn(hidden), act("relu"),
        fc(hidden, hidden), bn(hidden), act("relu"),
        fc(hidden, 1), act("sigmoid"),
    ))


def mcd_classifier(classes: int = 4) -> NetworkSpec:
    """Three 128-wide fully-connected layers, ReLU twice, softmax output."""
    return NetworkSpec((
        fc(FEATURE_WIDTH, FEATURE_WIDTH), act("relu"),
        fc(FEATURE_WIDTH, FEATURE_WIDTH), act("relu"),
        fc(FEATURE_WIDTH, classes), act("softmax"),
    ))


def backbone(in_width: int, classes: int = 4,
             relu_before_softmax: bool = True) -> NetworkSpec:
    """Feature extractor composed with the label predictor."""
    return feature_extractor(in_width) + label_predictor(classes, relu_before_softmax)


_PRESET_HIDDEN = {
    "m1": (128,),
    "m2": (64,),
    "m3": (64, 32),
    "m4": (128, 128),
    "m5": (128, 128, 64),
    "m6": (128, 64, 32, 16),
}


def model_preset(name: str, in_width: int, classes: int) -> NetworkSpec:
    """Baseline architectures m1..m6: ReLU hidden stack plus softmax output."""
    try:
        hidden = _PRESET_HIDDEN[name.lower()]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; expected m1..m6") from None
    layers: list[tuple] = []
    width = in_width
    for h in hidden:
        layers += [fc(width, h), act("relu")]
        width = h
    layers += [fc(width, classes), act("softmax")]
    return NetworkSpec(tuple(layers))


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class Network:
    """A spec bound to parameter tensors, plus the seed used to draw them."""

    def __init__(self, spec: NetworkSpec, layers: list, seed: int):
        self.spec = spec
        self.layers = layers  # aligned with spec.layers; None for activations
        self.seed = seed

    def parameters(self, trainable_layers: set[int] | None = None) -> list[Tensor]:
        """Parameter tensors in layer order, optionally restricted by layer index."""
        params: list[Tensor] = []
        for idx, (layer, slot) in enumerate(zip(self.spec.layers, self.layers)):
            if trainable_layers is not None and idx not in trainable_layers:
                continue
            if layer[0] == "fc":
                params += [slot["W"], slot["b"]]
            elif layer[0] == "batch_norm":
                params += [slot.gamma, slot.beta]
        return params

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def forward(self, x: Tensor, train: bool,
                eval_bn_layers: frozenset[int] = frozenset()) -> Tensor:
        """Run the network; batch-norm layers listed in ``eval_bn_layers``
        use running statistics even when ``train`` is set (frozen layers)."""
        out = x
        for idx, (layer, slot) in enumerate(zip(self.spec.layers, self.layers)):
            kind = layer[0]
            if kind == "fc":
                out = ad.add_bias(ad.matmul(out, slot["W"]), slot["b"])
            elif kind == "batch_norm":
                out = ad.batch_norm(out, slot, train and idx not in eval_bn_layers)
            elif kind == "relu":
                out = ad.relu(out)
            elif kind == "sigmoid":
                out = ad.sigmoid(out)
            else:
                out = ad.softmax_rows(out)
        return out

    def predict_proba(self, features: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """Eval-mode forward pass over a plain array, in row chunks."""
        outputs = []
        for start in range(0, features.shape[0], chunk):
            block = Tensor(features[start:start + chunk])
            outputs.append(self.forward(block, train=False).data)
        return np.vstack(outputs)

    def copy(self) -> "Network":
        """Deep copy of parameters and batch-norm state."""
        layers = []
        for layer, slot in zip(self.spec.layers, self.layers):
            if layer[0] == "fc":
                layers.append({"W": Tensor(slot["W"].data.copy()),
                               "b": Tensor(slot["b"].data.copy())})
            elif layer[0] == "batch_norm":
                state = BatchNormState(layer[1])
                state.gamma = Tensor(slot.gamma.data.copy())
                state.beta = Tensor(slot.beta.data.copy())
                state.running_mean = slot.running_mean.copy()
                state.running_var = slot.running_var.copy()
                layers.append(state)
            else:
                layers.append(None)
        return Network(self.spec, layers, self.seed)


def _draw_layers(spec: NetworkSpec, rng: np.random.Generator) -> list:
    """He-style uniform fan-in init for weights; zero biases; unit batch-norm."""
    layers: list = []
    for layer in spec.layers:
        if layer[0] == "fc":
            _, fan_in, fan_out = layer
            limit = np.sqrt(6.0 / fan_in)
            layers.append({
                "W": Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out))),
                "b": Tensor(np.zeros((1, fan_out))),
            })
        elif layer[0] == "batch_norm":
            layers.append(BatchNormState(layer[1]))
        else:
            layers.append(None)
    return layers


def init_network(spec: NetworkSpec, seed: int) -> Network:
    """Deterministically initialize one network."""
    rng = derive_rng(seed, "init")
    return Network(spec, _draw_layers(spec, rng), seed)


def init_networks(specs: Iterable[NetworkSpec], seed: int) -> list[Network]:
    """Initialize several networks from one stream, in order.

    Drawing sequentially means the concatenation of the first k specs gets
    exactly the same parameters as ``init_network`` on the concatenated
    spec, which keeps composed models comparable to monolithic ones.
    """
    rng = derive_rng(seed, "init")
    return [Network(spec, _draw_layers(spec, rng), seed) for spec in specs]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run needs besides data and architecture."""

    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")


class SGD:
    """Momentum SGD over a fixed parameter list.

    Update rule: ``v = momentum * v + grad``, ``param -= lr * v``.
    """

    def __init__(self, params: list[Tensor], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocities = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p, v in zip(self.params, self.velocities):
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v


def epoch_batches(n_rows: int, batch_size: int, seed: int, epoch: int,
                  stream: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch of one data stream.

    The permutation comes from a stream keyed on (seed, stream, epoch), so
    any trainer using the same key sees the same batches. Batches of fewer
    than 2 rows are dropped; at least one batch is always returned.
    """
    rng = derive_rng(seed, "shuffle", stream, epoch)
    perm = rng.permutation(n_rows)
    size = min(batch_size, n_rows)
    batches = [perm[i:i + size] for i in range(0, n_rows, size)]
    if len(batches) > 1 and batches[-1].size < 2:
        batches.pop()
    return batches


def train_classifier(net: Network, data: Dataset, cfg: TrainConfig,
                     trainable_layers: set[int] | None = None,
                     eval_bn_layers: frozenset[int] = frozenset(),
                     epoch_hook: Callable[[int, "Network"], None] | None = None,
                     ) -> Network:
    """Mini-batch cross-entropy SGD on a labeled dataset; trains in place.

    ``trainable_layers`` and ``eval_bn_layers`` restrict which layers get
    updates (used by the fine-tuning strategies). The hook, if given, runs
    after every epoch.
    """
    if not data.labeled:
        raise ValueError("train_classifier needs labeled data")
    if cfg.epochs < 1:
        raise ValueError("epochs must be >= 1 to train")
    features = one_hot(data)
    if features.shape[1] != net.spec.in_width:
        raise ValueError(
            f"one-hot width {features.shape[1]} does not match input layer "
            f"width {net.spec.in_width}")
    labels = data.labels
    opt = SGD(net.parameters(trainable_layers), cfg.lr, cfg.momentum)
    for epoch in range(cfg.epochs):
        for idx in epoch_batches(len(data), cfg.batch_size, cfg.seed, epoch,
                                 SOURCE_STREAM):
            x = Tensor(features[idx])
            probs = net.forward(x, train=True, eval_bn_layers=eval_bn_layers)
            loss = ad.cross_entropy(probs, labels[idx])
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        if epoch_hook is not None:
            epoch_hook(epoch, net)
    return net


def evaluate(model, data: Dataset) -> float:
    """Fraction of rows whose argmax prediction matches the label.

    ``model`` is anything with ``predict_proba``; argmax ties resolve to
    the lowest class index, and batch-norm runs in eval mode.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if not data.labeled:
        raise ValueError("evaluate needs labeled data")
    probs = model.predict_proba(one_hot(data))
    preds = np.argmax(probs, axis=1)
    return float(np.mean(preds == data.labels))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def network_to_doc(net: Network) -> dict:
    layers = []
    for layer, slot in zip(net.spec.layers, net.layers):
        if layer[0] == "fc":
            layers.append({"W": slot["W"].data.tolist(),
                           "b": slot["b"].data.tolist()})
        elif layer[0] == "batch_norm":
            layers.append({"gamma": slot.gamma.data.tolist(),
                           "beta": slot.beta.data.tolist(),
                           "running_mean": slot.running_mean.tolist(),
                           "running_var": slot.running_var.tolist()})
        else:
            layers.append(None)
    return {
        "format": "domainshift-network",
        "version": NETWORK_FORMAT_VERSION,
        "seed": net.seed,
        "spec": [list(l) for l in net.spec.layers],
        "layers": layers,
    }


def network_from_doc(doc: dict) -> Network:
    if doc.get("format") != "domainshift-network":
        raise ValueError("not a network document")
    if doc.get("version") != NETWORK_FORMAT_VERSION:
        raise ValueError(f"unsupported network format version {doc.get('version')!r}")
    spec = NetworkSpec(tuple(tuple(l) for l in doc["spec"]))
    layers: list = []
    for layer, stored in zip(spec.layers, doc["layers"]):
        if layer[0] == "fc":
            layers.append({"W": Tensor(np.array(stored["W"], dtype=np.float64)),
                           "b": Tensor(np.array(stored["b"], dtype=np.float64))})
        elif layer[0] == "batch_norm":
            state = BatchNormState(layer[1])
            state.gamma = Tensor(np.array(stored["gamma"], dtype=np.float64))
            state.beta = Tensor(np.array(stored["beta"], dtype=np.float64))
            state.running_mean = np.array(stored["running_mean"], dtype=np.float64)
            state.running_var = np.array(stored["running_var"], dtype=np.float64)
            layers.append(state)
        else:
            layers.append(None)
    return Network(spec, layers, int(doc.get("seed", 0)))


def save_network(net: Network, path: str | Path) -> None:
    """JSON parameter file; float round-trip is exact."""
    Path(path).write_text(json.dumps(network_to_doc(net)) + "\n", encoding="utf-8")


def load_network(path: str | Path) -> Network:
    return network_from_doc(json.loads(Path(path).read_text(encoding="utf-8")))
