"""Domain-specific classifiers, the weight branch, and target prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError, DimensionError, LabelError
from .tensor import Tensor


@dataclass
class SimilarityWeights:
    """Per-sample mixing weights over the K source domains, shape (m, K)."""

    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim != 2:
            raise DimensionError(f"weights must be (m, K), got shape {self.w.shape}")

    def simplex_error(self) -> float:
        """Largest violation of the row-simplex constraints."""
        if self.w.size == 0:
            return 0.0
        below = max(0.0, float(-self.w.min()))
        above = max(0.0, float(self.w.max() - 1.0))
        rows = float(np.abs(self.w.sum(axis=1) - 1.0).max())
        return max(below, above, rows)


def one_hot_weights(domain_labels, K: int) -> SimilarityWeights:
    d = np.asarray(domain_labels, dtype=np.int64).reshape(-1)
    if np.any(d < 1) or np.any(d > K):
        raise LabelError(f"domain labels must lie in [1, {K}], got {sorted(set(d[(d < 1) | (d > K)].tolist()))}")
    w = np.zeros((d.size, K))
    w[np.arange(d.size), d - 1] = 1.0
    return SimilarityWeights(w)


def combine_specific(z_stack: Tensor, weights, tol: float = 1e-6) -> Tensor:
    """Weighted sum of per-domain logits: z[i] = sum_k w[i, k] z[i, k]."""
    if isinstance(weights, SimilarityWeights):
        sw, wt = weights, Tensor(weights.w)
    else:
        wt = weights if isinstance(weights, Tensor) else Tensor(weights)
        sw = SimilarityWeights(wt.data)
    err = sw.simplex_error()
    if err > tol:
        raise ContractError(f"weights leave the probability simplex by {err:.3g}")
    return T.combine(z_stack, wt)


def classification_loss(embeddings: list[Tensor], labels: list, classifiers) -> Tensor:
    """Average of per-domain mean CE over domains that have labels this step.

    ``embeddings[k]`` are shared features of domain k+1's (pseudo)labeled rows,
    ``labels[k]`` their labels or None. With one-hot domain weights the
    combined logits of a domain-k sample are just ``classifiers[k]``'s output.
    Domains with no rows are skipped and the divisor shrinks accordingly.
    """
    if not embeddings or labels[0] is None or len(labels[0]) == 0:
        raise DataError("domain 1 has no labeled samples in this batch")
    terms = []
    for emb, lab, clf in zip(embeddings, labels, classifiers):
        if lab is None or len(lab) == 0:
            continue
        terms.append(T.cross_entropy(clf(emb), lab))
    return T.scale(T.stack_sum(terms), 1.0 / len(terms))


def contributing_domains(labels: list) -> int:
    return sum(1 for lab in labels if lab is not None and len(lab) > 0)


def weight_branch_loss(signals: list[Tensor], f_weighted, c_weighted) -> Tensor:
    """Mean CE of the weight branch against the 0-based source index of each row."""
    for k, x in enumerate(signals, start=1):
        if x.shape[0] == 0:
            raise DataError(f"empty minibatch for domain {k}")
    x = T.concat(signals) if len(signals) > 1 else signals[0]
    target = np.concatenate([np.full(s.shape[0], k, np.int64) for k, s in enumerate(signals)])
    return T.cross_entropy(c_weighted(f_weighted(x)), target)


def domain_specific_loss(l_cls: Tensor, l_w: Tensor) -> Tensor:
    return T.add(l_cls, l_w)


@dataclass
class Prediction:
    labels: np.ndarray
    weights: SimilarityWeights
    logits: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def predict(signals, model, use_specific: bool = True, batch: int = 512) -> Prediction:
    """Label target signals with the weighted domain-specific classifiers.

    With ``use_specific=False`` (ERM and the no-specific ablation) the first
    classifier alone is used and the weights are one-hot on domain 1.
    """
    x = signals.data if isinstance(signals, Tensor) else np.asarray(signals, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != 1:
        raise DimensionError(f"signals must have shape (m, 1, length), got {x.shape}")
    if model.signal_len is not None and x.shape[2] != model.signal_len:
        raise DimensionError(f"model was built for length {model.signal_len}, got signals of length {x.shape[2]}")
    labels, weights, logits = [], [], []
    with T.no_grad():
        for i in range(0, x.shape[0], batch):
            xb = Tensor(x[i : i + batch])
            emb = model.f_shared(xb)
            if use_specific:
                w = T.softmax(model.c_weighted(model.f_weighted(xb)))
                z = combine_specific(T.stack_axis1([c(emb) for c in model.classifiers]), w)
                wd = w.data
            else:
                z = model.classifiers[0](emb)
                wd = np.zeros((xb.shape[0], model.K))
                wd[:, 0] = 1.0
            p = T.softmax_array(z.data)
            labels.append(p.argmax(axis=1))
            weights.append(wd)
            logits.append(z.data)
    if not labels:
        return Prediction(np.zeros(0, np.int64), SimilarityWeights(np.zeros((0, model.K))), np.zeros((0, 0)))
    return Prediction(np.concatenate(labels), SimilarityWeights(np.concatenate(weights)), np.concatenate(logits))
