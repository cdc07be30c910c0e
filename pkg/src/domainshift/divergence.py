"""Source-model derivation and exact KL divergence between naive-Bayes models.

A source model is the target model with Gaussian noise added to every
conditional probability in log-odds space (the class prior is reused
unchanged). Because the class variable is the sole parent of every
feature, the KL divergence between two such models with a shared prior
reduces to a triple sum over features, classes, and feature values; a
full joint enumeration is also provided as an independent cross-check.

All logarithms are natural.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .bayesnet import NaiveBayesModel
from .seeding import derive_rng

__all__ = [
    "PerturbationConfig",
    "LambdaSchedule",
    "perturb_model",
    "kl_factorized",
    "kl_joint_bruteforce",
    "resolve_lambda",
]

_PRIOR_MATCH_TOL = 1e-12
_BRUTEFORCE_STATE_LIMIT = 10 ** 6


@dataclass(frozen=True)
class PerturbationConfig:
    """Noise level and seed for deriving a source model."""

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def perturb_model(target: NaiveBayesModel, cfg: PerturbationConfig) -> NaiveBayesModel:
    """Derive a source model by jittering conditional probabilities in log-odds.

    Each cell p becomes sigmoid(log(p / (1 - p)) + eps) with eps drawn
    i.i.d. from N(0, sigma^2), one draw per cell; rows are renormalized
    afterwards. The prior is copied unchanged. With sigma = 0 the result
    equals the target up to floating-point roundoff.
    """
    rng = derive_rng(cfg.seed, "perturb")
    cpts = []
    for i, cpt in enumerate(target.cpts):
        if np.any(cpt <= 0.0) or np.any(cpt >= 1.0):
            raise ValueError(
                f"cpt for feature {i} has cells at 0 or 1; log-odds undefined")
        log_odds = np.log(cpt / (1.0 - cpt))
        noisy = log_odds + rng.normal(0.0, cfg.sigma, size=cpt.shape)
        probs = 1.0 / (1.0 + np.exp(-noisy))
        probs /= probs.sum(axis=1, keepdims=True)
        cpts.append(probs)
    return NaiveBayesModel(target.prior.copy(), tuple(cpts))


def _check_pair(p: NaiveBayesModel, q: NaiveBayesModel) -> None:
    if not p.same_structure(q):
        raise ValueError(
            f"model structures differ: {p.class_count} classes / arities "
            f"{p.arities} vs {q.class_count} classes / arities {q.arities}")
    if np.max(np.abs(p.prior - q.prior)) > _PRIOR_MATCH_TOL:
        raise ValueError("models have different class priors; the factorized "
                         "divergence assumes a shared prior")


def kl_factorized(p: NaiveBayesModel, q: NaiveBayesModel) -> float:
    """KL(p || q) via the per-feature decomposition, in nats.

    sum_i sum_j sum_k p(x_i=k | z=j) p(z=j) log(p(x_i=k | z=j) / q(x_i=k | z=j)).
    Both models must share structure and prior.
    """
    _check_pair(p, q)
    total = 0.0
    for cp, cq in zip(p.cpts, q.cpts):
        if np.any((cq == 0.0) & (cp > 0.0)):
            raise ValueError("q has a zero cell where p is positive; KL is infinite")
        total += float((p.prior[:, None] * cp * np.log(cp / cq)).sum())
    return total


def kl_joint_bruteforce(p: NaiveBayesModel, q: NaiveBayesModel) -> float:
    """KL(p || q) by enumerating every joint (features, class) state.

    Exponential in the feature count; guarded at 10^6 states. Exists as an
    independent check on :func:`kl_factorized`.
    """
    _check_pair(p, q)
    states = p.class_count * math.prod(p.arities)
    if states > _BRUTEFORCE_STATE_LIMIT:
        raise ValueError(f"joint state space has {states} states; "
                         f"limit is {_BRUTEFORCE_STATE_LIMIT}")
    total = 0.0
    for assignment in itertools.product(*(range(a) for a in p.arities)):
        for j in range(p.class_count):
            log_pj = math.log(p.prior[j])
            log_qj = math.log(q.prior[j])
            for i, k in enumerate(assignment):
                log_pj += math.log(p.cpts[i][j, k])
                log_qj += math.log(q.cpts[i][j, k])
            total += math.exp(log_pj) * (log_pj - log_qj)
    return total


@dataclass(frozen=True)
class LambdaSchedule:
    """Rule mapping a source-target KL divergence to the adversarial weight.

    Variants: ``fixed`` (constant), ``kl`` (the divergence itself), and
    ``bounded`` (alpha * (1 - exp(-KL)), saturating at alpha).
    """

    kind: str
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fixed", "kl", "bounded"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "fixed" and self.value < 0:
            raise ValueError(f"fixed lambda must be >= 0, got {self.value}")
        if self.kind == "bounded" and not self.value > 0:
            raise ValueError(f"bounded alpha must be > 0, got {self.value}")

    @classmethod
    def fixed(cls, lam: float) -> "LambdaSchedule":
        return cls("fixed", lam)

    @classmethod
    def kl_direct(cls) -> "LambdaSchedule":
        return cls("kl")

    @classmethod
    def bounded(cls, alpha: float) -> "LambdaSchedule":
        return cls("bounded", alpha)

    @classmethod
    def parse(cls, text: str) -> "LambdaSchedule":
        """Parse ``fixed:<lam>``, ``kl``, or ``bounded:<alpha>``."""
        head, _, tail = text.partition(":")
        if head == "kl" and not tail:
            return cls.kl_direct()
        if head in ("fixed", "bounded") and tail:
            return cls(head, float(tail))
        raise ValueError(f"cannot parse lambda schedule {text!r}")

    def __str__(self) -> str:
        if self.kind == "kl":
            return "kl"
        return f"{self.kind}:{self.value:g}"


def resolve_lambda(schedule: LambdaSchedule, kl: float) -> float:
    """Evaluate a schedule at a given divergence."""
    if kl < 0:
        raise ValueError(f"kl must be >= 0, got {kl}")
    if schedule.kind == "fixed":
        return schedule.value
    if schedule.kind == "kl":
        return kl
    return schedule.value * (1.0 - math.exp(-kl))
