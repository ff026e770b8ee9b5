"""Pairwise adversarial alignment of the shared features.

One binary discriminator per unordered pair of source domains. Each sees the
two domains' embeddings through a gradient-reversal node, so a single
backward pass trains the discriminators to separate the pair and pushes the
shared extractor to confuse them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError, ParameterError
from .tensor import Tensor


@dataclass(frozen=True)
class DomainPair:
    k1: int
    k2: int
    discriminator_index: int


@dataclass
class AdversarialLossReport:
    per_pair_losses: list[float]
    mean_loss: float
    lam: float


def enumerate_pairs(K: int) -> list[DomainPair]:
    """All pairs k1 < k2 of 1-based domain indices, in lexicographic order."""
    if K < 2:
        raise ParameterError(f"need K >= 2 domains for pairwise discriminators, got {K}")
    pairs = []
    for k1 in range(1, K + 1):
        for k2 in range(k1 + 1, K + 1):
            pairs.append(DomainPair(k1, k2, len(pairs)))
    return pairs


def lambda_schedule(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"training progress must lie in [0, 1], got {p}")
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0


def pair_loss(emb1: Tensor, emb2: Tensor, discriminator, lam: float) -> Tensor:
    """Binary CE of one discriminator over 2-way logits.

    The domain label is s=1 for ``emb1`` (lower-indexed domain) and s=0 for ``emb2``.
    """
    x = T.grad_reverse(T.concat([emb1, emb2]), lam)
    target = np.concatenate([np.ones(emb1.shape[0], np.int64), np.zeros(emb2.shape[0], np.int64)])
    return T.cross_entropy(discriminator(x), target)


def invariant_loss_with_report(embeddings: list[Tensor], discriminators, lam: float,
                               pairs: list[DomainPair] | None = None) -> tuple[Tensor, AdversarialLossReport]:
    K = len(embeddings)
    pairs = pairs if pairs is not None else enumerate_pairs(K)
    if len(discriminators) != len(pairs):
        raise ParameterError(f"{len(discriminators)} discriminators for {len(pairs)} domain pairs")
    for k, e in enumerate(embeddings, start=1):
        if e.shape[0] == 0:
            raise DataError(f"empty minibatch for domain {k}")
    terms = [pair_loss(embeddings[p.k1 - 1], embeddings[p.k2 - 1], discriminators[p.discriminator_index], lam)
             for p in pairs]
    loss = T.scale(T.stack_sum(terms), 1.0 / len(terms))
    report = AdversarialLossReport([t.item() for t in terms], loss.item(), float(lam))
    return loss, report


def domain_invariant_loss(embeddings: list[Tensor], discriminators, lam: float) -> Tensor:
    """Mean pairwise discriminator CE through gradient reversal."""
    return invariant_loss_with_report(embeddings, discriminators, lam)[0]


def single_discriminator_loss(embeddings: list[Tensor], discriminator, lam: float) -> Tensor:
    """K-way domain CE with one discriminator (ablation study only)."""
    for k, e in enumerate(embeddings, start=1):
        if e.shape[0] == 0:
            raise DataError(f"empty minibatch for domain {k}")
    x = T.grad_reverse(T.concat(embeddings), lam)
    target = np.concatenate([np.full(e.shape[0], k, np.int64) for k, e in enumerate(embeddings)])
    return T.cross_entropy(discriminator(x), target)
