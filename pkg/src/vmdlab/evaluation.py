"""Exact evaluation: empirical distributions, KL against ground truth,
validity accuracy, pair heatmaps, and the analytic factorized-model oracle.

KL direction is KL(truth || model): the baseline one-step law on det2 is
uniform over all 100 pairs, and KL(uniform-10 || uniform-100) = ln 10 matches
the expected baseline number, while the reverse direction is smoothing-
dominated. Model probabilities get additive smoothing eps on the truth
support (renormalized) so zero-count support points stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import ExactDist


@dataclass
class EmpiricalDist:
    """Counts per observed sequence; mergeable across sampler shards."""

    counts: dict
    total: int

    def __post_init__(self):
        if any(c < 1 for c in self.counts.values()):
            raise ValueError("EmpiricalDist: every stored count must be >= 1")
        if sum(self.counts.values()) != self.total:
            raise ValueError("EmpiricalDist: counts do not sum to total")

    @classmethod
    def from_samples(cls, samples) -> "EmpiricalDist":
        samples = np.asarray(samples)
        if samples.ndim != 2:
            raise ValueError("from_samples expects (n, seq_len) token sequences")
        counts: dict = {}
        for row in samples:
            key = tuple(int(v) for v in row)
            counts[key] = counts.get(key, 0) + 1
        return cls(counts=counts, total=samples.shape[0])

    def freq(self, seq) -> float:
        return self.counts.get(tuple(int(v) for v in seq), 0) / self.total

    def merge(self, other: "EmpiricalDist") -> "EmpiricalDist":
        counts = dict(self.counts)
        for key, c in other.counts.items():
            counts[key] = counts.get(key, 0) + c
        return EmpiricalDist(counts=counts, total=self.total + other.total)


def default_eps(total_samples: int) -> float:
    """Smoothing that vanishes as samples grow: 1 / (10 * total)."""
    return 1.0 / (10.0 * total_samples)


def kl_truth_vs_model(truth: ExactDist, model, eps: float) -> float:
    """Sum over the truth support of truth(s) * ln(truth(s) / model~(s)).

    `model` is an EmpiricalDist or a mapping from token tuples to
    probabilities summing to 1; model~ adds eps on each truth-support point
    and renormalizes.
    """
    if eps <= 0.0:
        raise ValueError("eps must be > 0")
    lookup = model.freq if isinstance(model, EmpiricalDist) else \
        (lambda s: model.get(tuple(int(v) for v in s), 0.0))
    denom = 1.0 + eps * len(truth.support)
    total = 0.0
    for seq, p in zip(truth.support, truth.probs):
        q = (lookup(seq) + eps) / denom
        total += p * np.log(p / q)
    return float(total)


def analytic_product_kl(p: float, V: int) -> float:
    """KL between the varp2 joint and the best factorized model of it.

    Both marginals of varp2 are uniform, so the product model is uniform over
    V^2 pairs and the gap is ln V - H(x2 | x1) with
    H(x2 | x1) = -p ln p - (1-p) ln((1-p)/(V-1)).
    """
    if V < 2:
        raise ValueError("V must be >= 2")
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"p must lie in [0, 1], got {p}")
    cond_entropy = 0.0
    if p > 0.0:
        cond_entropy -= p * np.log(p)
    if p < 1.0:
        cond_entropy -= (1.0 - p) * np.log((1.0 - p) / (V - 1))
    return float(np.log(V) - cond_entropy)


def product_marginals_kl(truth: ExactDist) -> float:
    """KL between an enumerable joint and the product of its own marginals.

    This is the exact score a dependence-blind (factorized) model converges
    to; for varp2 it reduces to analytic_product_kl(p, V).
    """
    if not truth.enumerable:
        raise ValueError("product_marginals_kl needs an enumerable distribution")
    seq_len = len(truth.support[0])
    marginals = [{} for _ in range(seq_len)]
    for seq, p in zip(truth.support, truth.probs):
        for i, tok in enumerate(seq):
            marginals[i][tok] = marginals[i].get(tok, 0.0) + p
    total = 0.0
    for seq, p in zip(truth.support, truth.probs):
        q = 1.0
        for i, tok in enumerate(seq):
            q *= marginals[i][tok]
        total += p * np.log(p / q)
    return float(total)


def accuracy(samples, validity) -> float:
    """Fraction of samples the validity predicate accepts."""
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("accuracy needs a non-empty (n, seq_len) sample array")
    return float(np.mean([bool(validity(row)) for row in samples]))


@dataclass
class Heatmap:
    """Pair-frequency V x V matrix; first token = row, second = column.

    Counts are kept as integers so the row sums reproduce the first-token
    marginal exactly (same integers, same single division).
    """

    counts: np.ndarray
    total: int

    @property
    def matrix(self) -> np.ndarray:
        return self.counts / self.total

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1) / self.total

    def to_csv(self, path: str) -> None:
        np.savetxt(path, self.matrix, delimiter=",", fmt="%.10g")


def joint_heatmap(samples, vocab_size: int = 10) -> Heatmap:
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[1] != 2:
        raise ValueError("joint_heatmap expects two-token samples")
    if samples.shape[0] == 0:
        raise ValueError("joint_heatmap needs at least one sample")
    if samples.min() < 0 or samples.max() >= vocab_size:
        raise ValueError("joint_heatmap: token id out of range")
    counts = np.zeros((vocab_size, vocab_size), dtype=np.int64)
    np.add.at(counts, (samples[:, 0], samples[:, 1]), 1)
    return Heatmap(counts=counts, total=samples.shape[0])
