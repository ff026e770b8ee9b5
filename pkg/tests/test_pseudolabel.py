import math

import numpy as np
import pytest

from msadgn import tensor as T
from msadgn.data import DomainDataset
from msadgn.errors import DataError, NumericError, ParameterError
from msadgn.networks import MLP, FeatureExtractor
from msadgn.pseudolabel import (
    PrototypeState,
    dynamic_threshold,
    init_prototypes,
    init_prototypes_from_embeddings,
    matrix_cosine,
    probability_score,
    pseudolabel_score,
    raw_similarity,
    select_pseudolabels,
    similarity_score,
    update_prototypes,
    update_prototypes_from_embeddings,
)
from msadgn.tensor import Tensor


def brute_select(scores, tau):
    idx, lab = [], []
    for i, row in enumerate(scores):
        best, arg = -np.inf, -1
        for j, v in enumerate(row):
            if v > best:
                best, arg = v, j
        if best > tau:
            idx.append(i)
            lab.append(arg)
    return idx, lab


# ---------------------------------------------------------------- probability score


def test_probability_zero_classifier(rng):
    clf = MLP((4, 5, 3), rng)
    for p in clf.parameters():
        p.data[...] = 0.0
    phi = probability_score(Tensor(rng.normal(size=(6, 4))), clf).data
    assert np.allclose(phi, 1 / 3, atol=1e-15)


def test_probability_matches_straight_line(rng):
    clf = MLP((4, 6, 5, 3), rng)
    x = rng.normal(size=(10, 4))
    W = [(l.weight.data, l.bias.data) for l in clf.layers]
    h = x
    for i, (w, b) in enumerate(W):
        h = h @ w + b
        if i < len(W) - 1:
            h = np.maximum(h, 0)
    ref = np.exp(h - h.max(axis=1, keepdims=True))
    ref /= ref.sum(axis=1, keepdims=True)
    phi = probability_score(Tensor(x), clf).data
    assert np.max(np.abs(phi - ref)) < 1e-12
    assert np.all(np.abs(phi.sum(axis=1) - 1) <= 1e-12)


# ---------------------------------------------------------------- prototypes


class Identity:
    def __call__(self, x):
        return T.flatten(x)


def ds_from(emb, labels):
    return DomainDataset(1, np.asarray(emb, float)[:, None, :], np.asarray(labels))


def test_init_one_per_class(rng):
    emb = rng.random((3, 5))
    st = init_prototypes(ds_from(emb, [2, 0, 1]), Identity(), 3)
    assert np.array_equal(st.M1, emb[[1, 2, 0]])
    assert np.array_equal(st.M1_prev, st.M1) and st.initialized and st.iteration == 0


def test_init_duplicate_invariance(rng):
    emb = rng.random((9, 5))
    lab = np.array([0, 1, 2] * 3)
    a = init_prototypes(ds_from(emb, lab), Identity(), 3).M1
    b = init_prototypes(ds_from(np.concatenate([emb, emb]), np.concatenate([lab, lab])), Identity(), 3).M1
    assert np.max(np.abs(a - b)) < 1e-15


def test_init_brute_force_means(rng):
    fe = FeatureExtractor((2, 3), (3, 3), (2, 2), (1, 1), rng)
    x = rng.random((30, 1, 32))
    y = rng.integers(0, 3, size=30)
    st = init_prototypes(DomainDataset(1, x, y), fe, 3)
    emb = fe(Tensor(x)).data
    for c in range(3):
        acc = np.zeros(emb.shape[1])
        cnt = 0
        for i in range(30):
            if y[i] == c:
                acc += emb[i]
                cnt += 1
        assert np.max(np.abs(st.M1[c] - acc / cnt)) < 1e-12


def test_init_missing_class(rng):
    with pytest.raises(DataError, match="class 2"):
        init_prototypes(ds_from(rng.random((4, 3)), [0, 1, 0, 1]), Identity(), 3)


def test_init_needs_labels(rng):
    with pytest.raises(DataError):
        init_prototypes(DomainDataset(1, rng.random((3, 1, 4))), Identity(), 3)


def test_update_rho_one_unchanged(rng):
    old = rng.random((3, 4))
    st = PrototypeState(old.copy(), old.copy(), True)
    emb, lab = old.copy(), np.arange(3)
    new = update_prototypes_from_embeddings(st, emb, lab)
    assert abs(new.rho - 1) < 1e-12
    assert np.allclose(new.M1, old, atol=1e-15)
    assert new.iteration == 1 and np.array_equal(new.M1_prev, old)


def test_update_rho_zero_keeps_old():
    old = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    batch = np.array([[0.0, 1.0], [0.0, 2.0], [0.0, 3.0]])
    st = PrototypeState(old.copy(), old.copy(), True)
    new = update_prototypes_from_embeddings(st, batch, np.arange(3))
    assert new.rho == 0.0
    assert np.array_equal(new.M1, old)


def test_update_rho_point_six():
    # flattened cosine of [[3,4]] against [[5,0]] is 0.6
    old = np.array([[5.0, 0.0]])
    batch = np.array([[3.0, 4.0]])
    st = PrototypeState(old.copy(), old.copy(), True)
    new = update_prototypes_from_embeddings(st, batch, np.array([0]))
    assert abs(new.rho - 0.6) < 1e-15
    assert np.allclose(new.M1, 0.36 * batch + 0.64 * old, atol=1e-14)


def test_update_missing_class_copies_old(rng):
    old = rng.random((3, 4)) + 0.1
    st = PrototypeState(old.copy(), old.copy(), True)
    emb = rng.random((4, 4))
    new = update_prototypes_from_embeddings(st, emb, np.array([0, 0, 1, 1]))
    batch = np.stack([emb[:2].mean(0), emb[2:].mean(0), old[2]])
    rho = matrix_cosine(batch, old)
    assert np.allclose(new.M1, rho**2 * batch + (1 - rho**2) * old, atol=1e-14)
    assert np.array_equal(new.M1[2], old[2])


def test_update_local_replaces(rng):
    old = rng.random((3, 4))
    st = PrototypeState(old.copy(), old.copy(), True)
    emb = rng.random((3, 4))
    new = update_prototypes_from_embeddings(st, emb, np.arange(3), global_iteration=False)
    assert np.array_equal(new.M1, emb)


def test_update_contraction(rng):
    for _ in range(50):
        old = rng.random((3, 6))
        emb = rng.random((9, 6))
        lab = rng.integers(0, 3, size=9)
        st = PrototypeState(old.copy(), old.copy(), True)
        new = update_prototypes_from_embeddings(st, emb, lab)
        means = np.stack([emb[lab == c].mean(0) if np.any(lab == c) else old[c] for c in range(3)])
        lhs = np.linalg.norm(new.M1 - new.M1_prev)
        rhs = new.rho**2 * np.linalg.norm(means - new.M1_prev)
        assert lhs <= rhs + 1e-12


def test_update_via_extractor(rng):
    fe = FeatureExtractor((2, 3), (3, 3), (2, 2), (1, 1), rng)
    x = rng.random((12, 1, 16))
    y = np.arange(12) % 3
    st = init_prototypes(DomainDataset(1, x, y), fe, 3)
    a = update_prototypes(st, x[:6], y[:6], fe)
    b = update_prototypes_from_embeddings(st, fe(Tensor(x[:6])).data, y[:6])
    assert np.array_equal(a.M1, b.M1)


def test_update_uninitialised():
    st = PrototypeState(np.ones((3, 2)), np.ones((3, 2)), initialized=False)
    with pytest.raises(DataError):
        update_prototypes_from_embeddings(st, np.ones((3, 2)), np.arange(3))


# ---------------------------------------------------------------- similarity


def test_similarity_example():
    st = init_prototypes_from_embeddings(np.eye(3), np.arange(3), 3)
    psi = similarity_score(np.array([[2.0, 0.0, 0.0]]), st).data
    e = math.e
    assert np.allclose(psi, [[e / (e + 2), 1 / (e + 2), 1 / (e + 2)]], atol=1e-12)
    assert np.allclose(psi, [[0.5761, 0.2119, 0.2119]], atol=1e-4)


def test_similarity_scale_invariance(rng):
    st = init_prototypes_from_embeddings(rng.random((3, 5)), np.arange(3), 3)
    x = rng.random((4, 5))
    assert np.allclose(similarity_score(x, st).data, similarity_score(10 * x, st).data, atol=1e-15)


def test_raw_similarity_brute_force(rng):
    a, b = rng.normal(size=(20, 6)), rng.normal(size=(3, 6))
    s = raw_similarity(a, b)
    for i in range(20):
        for j in range(3):
            ref = np.dot(a[i], b[j]) / (math.sqrt(np.dot(a[i], a[i])) * math.sqrt(np.dot(b[j], b[j])))
            assert abs(s[i, j] - ref) < 1e-12
    assert np.all(np.abs(s) <= 1 + 1e-12)


def test_similarity_zero_norm_embedding(rng):
    st = init_prototypes_from_embeddings(rng.random((3, 4)), np.arange(3), 3)
    with pytest.raises(NumericError):
        similarity_score(np.zeros((1, 4)), st)


def test_similarity_temperature_sharpens(rng):
    st = init_prototypes_from_embeddings(np.eye(3), np.arange(3), 3)
    x = np.array([[1.0, 0.2, 0.1]])
    assert similarity_score(x, st, 0.05).data.max() > similarity_score(x, st).data.max()
    with pytest.raises(ParameterError):
        similarity_score(x, st, 0.0)


# ---------------------------------------------------------------- threshold, score, selection


def test_threshold_values():
    assert dynamic_threshold(0.0) == 0.4
    assert abs(dynamic_threshold(1.0) - 0.8999546) < 1e-6
    assert abs(dynamic_threshold(0.5) - 0.8933071) < 1e-6


def test_threshold_monotone():
    ps = np.linspace(0, 1, 201)
    taus = [dynamic_threshold(p) for p in ps]
    assert all(b > a for a, b in zip(taus, taus[1:]))


@pytest.mark.parametrize("p", [-0.01, 1.01])
def test_threshold_range(p):
    with pytest.raises(ParameterError):
        dynamic_threshold(p)


def test_score_endpoints(rng):
    phi, psi = rng.dirichlet(np.ones(3), 5), rng.dirichlet(np.ones(3), 5)
    assert np.array_equal(pseudolabel_score(phi, psi, 1.0).data, phi)
    assert np.array_equal(pseudolabel_score(phi, psi, 0.0).data, psi)


def test_score_example():
    out = pseudolabel_score(np.array([[0.5, 0.3, 0.2]]), np.array([[0.6, 0.2, 0.2]]), 0.2).data
    assert np.allclose(out, [[0.58, 0.22, 0.20]], atol=1e-15)


def test_score_errors():
    with pytest.raises(ParameterError):
        pseudolabel_score(np.ones((1, 3)), np.ones((1, 3)), 1.5)
    with pytest.raises(ParameterError):
        pseudolabel_score(np.ones((1, 3)), np.ones((2, 3)), 0.5)


def test_select_example():
    b = select_pseudolabels(np.array([[0.95, 0.03, 0.02], [0.2, 0.5, 0.3]]), 0.6)
    assert b.selected_indices.tolist() == [0] and b.labels.tolist() == [0]
    assert b.threshold_used == 0.6


def test_select_tau_one(rng):
    assert len(select_pseudolabels(rng.dirichlet(np.ones(3), 50), 1.0)) == 0


def test_select_strict_and_ties():
    b = select_pseudolabels(np.array([[0.5, 0.5, 0.0], [0.4, 0.3, 0.3]]), 0.4)
    assert b.selected_indices.tolist() == [0] and b.labels.tolist() == [0]


def test_select_brute_force(rng):
    scores = rng.dirichlet(np.ones(3), 200)
    scores[::7] = np.round(scores[::7], 1)  # force ties
    tau = float(rng.uniform(0.3, 0.9))
    b = select_pseudolabels(scores, tau)
    idx, lab = brute_select(scores, tau)
    assert b.selected_indices.tolist() == idx and b.labels.tolist() == lab


def test_alpha_one_is_traditional_rule(rng):
    phi = rng.dirichlet(np.ones(3), 100)
    psi = rng.dirichlet(np.ones(3), 100)
    a = select_pseudolabels(pseudolabel_score(phi, psi, 1.0), 0.4)
    b = select_pseudolabels(phi, 0.4)
    assert np.array_equal(a.selected_indices, b.selected_indices) and np.array_equal(a.labels, b.labels)
