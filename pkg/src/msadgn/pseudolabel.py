"""Domain-related pseudolabeling.

Unlabeled samples are scored by a convex mix of the classifier's softmax
output and a softmax over cosine similarities to class prototypes. A row
receives a pseudolabel when its best score beats a threshold that rises
with training progress.

Prototypes are stored one class per row (C x L).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError, NumericError, ParameterError
from .tensor import Tensor


@dataclass
class PrototypeState:
    M1: np.ndarray
    M1_prev: np.ndarray
    initialized: bool = False
    iteration: int = 0
    # last rho, kept for logging
    rho: float = float("nan")

    def __post_init__(self):
        if self.M1.shape != self.M1_prev.shape:
            raise DataError(f"prototype shapes differ: {self.M1.shape} vs {self.M1_prev.shape}")

    @property
    def n_classes(self) -> int:
        return self.M1.shape[0]


@dataclass
class PseudolabelBatch:
    selected_indices: np.ndarray
    labels: np.ndarray
    scores: np.ndarray
    threshold_used: float
    # rows whose embedding had zero norm and were never eligible
    skipped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.selected_indices)


def probability_score(embeddings: Tensor, classifier) -> Tensor:
    """softmax(C1(f)) for a batch of shared embeddings."""
    with T.no_grad():
        return T.softmax(classifier(embeddings))


def class_means(embeddings: np.ndarray, labels: np.ndarray, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class mean rows and a mask of which classes were present."""
    labels = np.asarray(labels, dtype=np.int64)
    sums = np.zeros((n_classes, embeddings.shape[1]))
    np.add.at(sums, labels, embeddings)
    counts = np.bincount(labels, minlength=n_classes)
    present = counts > 0
    means = np.zeros_like(sums)
    means[present] = sums[present] / counts[present, None]
    return means, present


def _embed(signals: np.ndarray, f_shared, batch: int = 512) -> np.ndarray:
    with T.no_grad():
        parts = [f_shared(Tensor(signals[i : i + batch])).data for i in range(0, len(signals), batch)]
    return np.concatenate(parts, axis=0)


def init_prototypes(labeled_domain, f_shared, n_classes: int = 3) -> PrototypeState:
    """Class means of the shared embedding over the whole labeled domain."""
    if not labeled_domain.labeled:
        raise DataError("prototype initialisation needs a labeled domain")
    emb = _embed(labeled_domain.signals, f_shared)
    return init_prototypes_from_embeddings(emb, labeled_domain.labels, n_classes)


def init_prototypes_from_embeddings(emb: np.ndarray, labels: np.ndarray, n_classes: int) -> PrototypeState:
    means, present = class_means(emb, labels, n_classes)
    for c in range(n_classes):
        if not present[c]:
            raise DataError(f"class {c} has no labeled samples; cannot build its prototype")
    return PrototypeState(means, means.copy(), initialized=True, iteration=0)


def matrix_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two matrices flattened to vectors; 0 if either is zero."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a.ravel(), b.ravel()) / (na * nb))


def update_prototypes_from_embeddings(
    state: PrototypeState, emb: np.ndarray, labels: np.ndarray, global_iteration: bool = True
) -> PrototypeState:
    """Blend the minibatch prototypes into the running ones.

    new = rho^2 * batch + (1 - rho^2) * old with rho = cos(batch, old).
    Classes missing from the minibatch reuse their old row. With
    ``global_iteration=False`` the batch prototypes replace the old ones.
    """
    if not state.initialized:
        raise DataError("prototype state is not initialised")
    old = state.M1
    batch, present = class_means(emb, labels, state.n_classes)
    batch[~present] = old[~present]
    if global_iteration:
        rho = matrix_cosine(batch, old)
        new = rho**2 * batch + (1.0 - rho**2) * old
    else:
        rho = 1.0
        new = batch
    return PrototypeState(new, old.copy(), True, state.iteration + 1, rho)


def update_prototypes(state: PrototypeState, signals: np.ndarray, labels: np.ndarray, f_shared,
                      global_iteration: bool = True) -> PrototypeState:
    return update_prototypes_from_embeddings(state, _embed(signals, f_shared), labels, global_iteration)


def raw_similarity(embeddings: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Cosine similarity of every embedding row against every prototype row."""
    en = np.linalg.norm(embeddings, axis=1)
    if np.any(en == 0):
        raise NumericError(f"zero-norm embedding at rows {np.flatnonzero(en == 0)[:5].tolist()}")
    pn = np.linalg.norm(prototypes, axis=1)
    if np.any(pn == 0):
        raise NumericError(f"zero-norm prototype for classes {np.flatnonzero(pn == 0).tolist()}")
    return (embeddings @ prototypes.T) / (en[:, None] * pn[None, :])


def similarity_score(embeddings, state: PrototypeState, temperature: float = 1.0) -> Tensor:
    """Row-softmax of cosine similarities divided by ``temperature``.

    Post-ReLU embeddings give cosines in [0, 1], so at temperature 1 the best
    score for C=3 cannot pass e/(e+2) ~ 0.576; training sharpens it.
    """
    if not state.initialized:
        raise DataError("prototype state is not initialised")
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    emb = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings, dtype=float)
    return Tensor(T.softmax_array(raw_similarity(emb, state.M1) / temperature))


def dynamic_threshold(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"training progress must lie in [0, 1], got {p}")
    return 1.0 / (1.0 + math.exp(-10.0 * p)) - 0.1


def pseudolabel_score(phi, psi, alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    a = phi.data if isinstance(phi, Tensor) else np.asarray(phi, dtype=float)
    b = psi.data if isinstance(psi, Tensor) else np.asarray(psi, dtype=float)
    if a.shape != b.shape:
        raise ParameterError(f"score shapes differ: {a.shape} vs {b.shape}")
    if alpha == 1.0:
        return Tensor(a)
    if alpha == 0.0:
        return Tensor(b)
    return Tensor(alpha * a + (1.0 - alpha) * b)


def select_pseudolabels(scores, tau: float) -> PseudolabelBatch:
    """Rows whose best score is strictly above ``tau``; argmax ties go to the lowest class."""
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=float)
    best = s.max(axis=1)
    idx = np.flatnonzero(best > tau)
    labels = s[idx].argmax(axis=1)
    return PseudolabelBatch(idx.astype(np.int64), labels.astype(np.int64), s, float(tau))
