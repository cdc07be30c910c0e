"""Synthetic ground truth: a naive-Bayes generative model over categorical features.

The model has one class variable with ``s`` values and ``n`` feature
variables, the i-th taking ``r_i`` values, each conditionally independent
given the class. It supports forward sampling, exact posterior
classification (the accuracy ceiling for any learned classifier), one-hot
encoding of sampled datasets, and JSON persistence.

Probabilities are kept strictly positive so that log-odds transforms and
KL divergences stay finite.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import derive_rng

__all__ = [
    "NaiveBayesModel",
    "Dataset",
    "ModelFormatError",
    "default_target_model",
    "sample",
    "bayes_optimal_accuracy",
    "one_hot",
    "save_model",
    "load_model",
    "save_dataset",
    "load_dataset",
]

MODEL_FORMAT_VERSION = 1
PROB_FLOOR = 1e-4
_ROW_SUM_TOL = 1e-12


class ModelFormatError(ValueError):
    """Raised when a model or dataset file fails validation."""


@dataclass(frozen=True)
class NaiveBayesModel:
    """Class prior plus one row-stochastic conditional table per feature.

    ``prior`` has shape ``(s,)``; ``cpts[i]`` has shape ``(s, r_i)`` and
    row ``j`` is the distribution of feature ``i`` given class ``j``.
    Arrays are frozen (non-writeable) on construction.
    """

    prior: np.ndarray
    cpts: tuple[np.ndarray, ...]

    def __post_init__(self):
        prior = np.asarray(self.prior, dtype=np.float64)
        cpts = tuple(np.asarray(c, dtype=np.float64) for c in self.cpts)
        object.__setattr__(self, "prior", prior)
        object.__setattr__(self, "cpts", cpts)
        if prior.ndim != 1 or prior.size < 2:
            raise ModelFormatError(f"prior must be a vector of >= 2 classes, got shape {prior.shape}")
        if abs(prior.sum() - 1.0) > _ROW_SUM_TOL:
            raise ModelFormatError(f"prior sums to {prior.sum()!r}, not 1")
        if np.any(prior <= 0.0) or np.any(prior > 1.0):
            raise ModelFormatError("prior entries must lie in (0, 1]")
        s = prior.size
        for i, cpt in enumerate(cpts):
            if cpt.ndim != 2 or cpt.shape[0] != s or cpt.shape[1] < 2:
                raise ModelFormatError(
                    f"cpt for feature {i} must have shape ({s}, >=2), got {cpt.shape}")
            sums = cpt.sum(axis=1)
            bad = np.nonzero(np.abs(sums - 1.0) > _ROW_SUM_TOL)[0]
            if bad.size:
                j = int(bad[0])
                raise ModelFormatError(
                    f"cpt row for feature {i}, class {j} sums to {sums[j]!r}, not 1")
            if np.any(cpt <= 0.0) or np.any(cpt > 1.0):
                raise ModelFormatError(f"cpt for feature {i} has entries outside (0, 1]")
        prior.flags.writeable = False
        for cpt in cpts:
            cpt.flags.writeable = False

    @property
    def class_count(self) -> int:
        return self.prior.size

    @property
    def feature_count(self) -> int:
        return len(self.cpts)

    @property
    def arities(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self.cpts)

    @property
    def one_hot_width(self) -> int:
        return sum(self.arities)

    def same_structure(self, other: "NaiveBayesModel") -> bool:
        return self.class_count == other.class_count and self.arities == other.arities


@dataclass
class Dataset:
    """Integer-coded samples with declared arities and an optional label vector."""

    features: np.ndarray
    arities: tuple[int, ...]
    labels: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.int64)
        self.arities = tuple(int(a) for a in self.arities)
        if self.features.ndim != 2 or self.features.shape[1] != len(self.arities):
            raise ValueError(
                f"features shape {self.features.shape} does not match {len(self.arities)} arities")
        for i, a in enumerate(self.arities):
            col = self.features[:, i]
            if col.size and (col.min() < 0 or col.max() >= a):
                raise ValueError(f"feature {i} has values outside [0, {a})")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise ValueError("label vector length does not match row count")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def without_labels(self) -> "Dataset":
        return Dataset(self.features, self.arities, None, dict(self.provenance))

    def take(self, count: int) -> "Dataset":
        labels = None if self.labels is None else self.labels[:count]
        return Dataset(self.features[:count], self.arities, labels, dict(self.provenance))


def _floor_rows(table: np.ndarray, floor: float) -> np.ndarray:
    """Raise every cell to at least ``floor`` while keeping rows stochastic.

    Cells below the floor are pinned to it and the remaining mass is
    rescaled; repeated until no cell is below the floor.
    """
    out = table.copy()
    for row in out:
        for _ in range(row.size):
            low = row < floor
            if not low.any():
                break
            row[low] = floor
            rest = ~low
            row[rest] *= (1.0 - floor * low.sum()) / row[rest].sum()
    return out


def default_target_model(n_binary_features: int = 64, classes: int = 4,
                         seed: int = 0) -> NaiveBayesModel:
    """Seeded stand-in for a target model learned from real records.

    The prior is a symmetric Dirichlet(5) draw; each conditional row is a
    Dirichlet(1) draw floored at 1e-4 and renormalized. The default of 64
    binary features and 4 classes gives a one-hot width of 128.
    """
    if n_binary_features < 1:
        raise ValueError("need at least one feature")
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = derive_rng(seed, "target-model")
    prior = rng.dirichlet(np.full(classes, 5.0))
    prior = np.maximum(prior, PROB_FLOOR)
    prior = prior / prior.sum()
    cpts = []
    for _ in range(n_binary_features):
        rows = rng.dirichlet(np.ones(2), size=classes)
        cpts.append(_floor_rows(rows, PROB_FLOOR))
    return NaiveBayesModel(prior, tuple(cpts))


def sample(model: NaiveBayesModel, count: int, seed: int) -> Dataset:
    """Forward-sample ``count`` labeled rows: draw the class, then each feature."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = derive_rng(seed, "sample")
    z = rng.choice(model.class_count, size=count, p=model.prior)
    cols = np.empty((count, model.feature_count), dtype=np.int64)
    for i, cpt in enumerate(model.cpts):
        cum = np.cumsum(cpt[z], axis=1)
        u = rng.random(count)
        cols[:, i] = np.minimum((u[:, None] >= cum).sum(axis=1), cpt.shape[1] - 1)
    return Dataset(cols, model.arities, z,
                   provenance={"seed": seed, "size": count})


def _log_joint(model: NaiveBayesModel, features: np.ndarray) -> np.ndarray:
    """Per-row log p(x, z=j) for every class j, shape (rows, s)."""
    scores = np.tile(np.log(model.prior), (features.shape[0], 1))
    for i, cpt in enumerate(model.cpts):
        scores += np.log(cpt[:, features[:, i]].T)
    return scores


def bayes_optimal_accuracy(model_true: NaiveBayesModel, test: Dataset) -> float:
    """Accuracy of the exact posterior classifier under ``model_true``.

    Ties resolve to the lowest class index. On data sampled from
    ``model_true`` itself this is the ceiling (up to sampling noise) for
    any trained classifier.
    """
    if not test.labeled:
        raise ValueError("bayes_optimal_accuracy needs a labeled dataset")
    if len(test) == 0:
        raise ValueError("empty dataset")
    if test.arities != model_true.arities:
        raise ValueError("dataset arities do not match the model")
    preds = np.argmax(_log_joint(model_true, test.features), axis=1)
    return float(np.mean(preds == test.labels))


def one_hot(data: Dataset, arities: tuple[int, ...] | None = None) -> np.ndarray:
    """Concatenated per-feature one-hot blocks, shape (rows, sum of arities)."""
    arities = data.arities if arities is None else tuple(arities)
    if arities != data.arities:
        raise ValueError(f"arity mismatch: dataset has {data.arities}, got {arities}")
    rows = data.features.shape[0]
    out = np.zeros((rows, sum(arities)), dtype=np.float64)
    offset = 0
    for i, a in enumerate(arities):
        out[np.arange(rows), offset + data.features[:, i]] = 1.0
        offset += a
    return out


def save_model(model: NaiveBayesModel, path: str | Path) -> None:
    """Write the model as JSON; floats round-trip exactly."""
    doc = {
        "format": "domainshift-naive-bayes",
        "version": MODEL_FORMAT_VERSION,
        "s": model.class_count,
        "arities": list(model.arities),
        "prior": model.prior.tolist(),
        "cpts": [c.tolist() for c in model.cpts],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> NaiveBayesModel:
    """Read and validate a model JSON file."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != "domainshift-naive-bayes":
        raise ModelFormatError(f"{path}: not a naive-Bayes model file")
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"{path}: unsupported model format version {doc.get('version')!r}")
    for key in ("s", "arities", "prior", "cpts"):
        if key not in doc:
            raise ModelFormatError(f"{path}: missing field {key!r}")
    try:
        model = NaiveBayesModel(np.array(doc["prior"], dtype=np.float64),
                                tuple(np.array(c, dtype=np.float64) for c in doc["cpts"]))
    except ModelFormatError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    if model.class_count != doc["s"] or list(model.arities) != list(doc["arities"]):
        raise ModelFormatError(f"{path}: declared s/arities do not match the tables")
    return model


def save_dataset(data: Dataset, path: str | Path) -> None:
    """Write a dataset as CSV with header ``x0,...,x{n-1}[,label]``."""
    n = len(data.arities)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = [f"x{i}" for i in range(n)]
        if data.labeled:
            header.append("label")
        writer.writerow(header)
        for r in range(len(data)):
            row = [int(v) for v in data.features[r]]
            if data.labeled:
                row.append(int(data.labels[r]))
            writer.writerow(row)


def load_dataset(path: str | Path, arities: tuple[int, ...]) -> Dataset:
    """Read a dataset CSV; the ``label`` column is optional."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ModelFormatError(f"{path}: empty file")
        n = len(arities)
        expected = [f"x{i}" for i in range(n)]
        labeled = header == expected + ["label"]
        if not labeled and header != expected:
            raise ModelFormatError(
                f"{path}: header {header!r} does not match arities of length {n}")
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ModelFormatError(f"{path}:{lineno}: wrong column count")
            vals = [int(v) for v in row]
            feats.append(vals[:n])
            if labeled:
                labels.append(vals[n])
    features = np.array(feats, dtype=np.int64).reshape(len(feats), n)
    return Dataset(features, tuple(arities),
                   np.array(labels, dtype=np.int64) if labeled else None,
                   provenance={"path": str(path)})
