"""Finite-difference suite over every differentiable op and the full model loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .networks import MLP, FeatureExtractor
from .pseudolabel import PseudolabelBatch
from .tensor import Tensor
from .trainer import build_networks, step_losses

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_params: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def _p(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _jitter_biases(named_params, rng: np.random.Generator) -> None:
    # zero biases can leave pre-activations exactly on the ReLU kink, where
    # central differences see half the slope
    for name, p in named_params:
        if name.endswith("bias"):
            p.data = rng.normal(0.0, 0.1, size=p.shape)


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """name -> (scalar loss closure, leaves to check)."""
    cases = {}
    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    r = rng.normal(size=(3, 4))
    proj = Tensor(r)
    cases["add"] = (lambda: T.sum_all(T.mul(T.add(a, b), proj)), [a, b])
    bias = _p(rng, 4)
    cases["add_broadcast"] = (lambda: T.sum_all(T.mul(T.add(a, bias), proj)), [a, bias])
    cases["mul"] = (lambda: T.sum_all(T.mul(a, b)), [a, b])
    cases["scale"] = (lambda: T.sum_all(T.mul(T.scale(a, -1.7), proj)), [a])
    m1, m2 = _p(rng, 3, 4), _p(rng, 4, 2)
    r2 = Tensor(rng.normal(size=(3, 2)))
    cases["matmul"] = (lambda: T.sum_all(T.mul(T.matmul(m1, m2), r2)), [m1, m2])
    # keep entries away from the kink
    x = Tensor(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.1, 1.0, size=(3, 4)), requires_grad=True)
    cases["relu"] = (lambda: T.sum_all(T.mul(T.relu(x), proj)), [x])
    r3 = Tensor(rng.normal(size=(4, 3)))
    cases["reshape"] = (lambda: T.sum_all(T.mul(T.reshape(a, (4, 3)), r3)), [a])
    c3 = _p(rng, 2, 3, 4)
    r4 = Tensor(rng.normal(size=(2, 12)))
    cases["flatten"] = (lambda: T.sum_all(T.mul(T.flatten(c3), r4)), [c3])
    e = _p(rng, 2, 4)
    r5 = Tensor(rng.normal(size=(5, 4)))
    cases["concat"] = (lambda: T.sum_all(T.mul(T.concat([a, e]), r5)), [a, e])
    idx = np.array([2, 0, 2])
    cases["take_rows"] = (lambda: T.sum_all(T.mul(T.take_rows(a, idx), Tensor(r[:3] * 2))), [a])
    cases["slice_rows"] = (lambda: T.sum_all(T.mul(T.slice_rows(a, 1, 3), Tensor(r[:2]))), [a])
    cases["mean_all"] = (lambda: T.mean_all(T.mul(a, b)), [a, b])
    cases["stack_sum"] = (lambda: T.sum_all(T.mul(T.stack_sum([a, b, a]), proj)), [a, b])
    cx, cw = _p(rng, 2, 3, 16), _p(rng, 4, 3, 3)
    r6 = Tensor(rng.normal(size=(2, 4, 8)))
    cases["conv1d"] = (lambda: T.sum_all(T.mul(T.conv1d(cx, cw, 2, 1), r6)), [cx, cw])
    r6b = Tensor(rng.normal(size=(2, 4, 14)))
    cases["conv1d_stride1"] = (lambda: T.sum_all(T.mul(T.conv1d(cx, cw, 1, 0), r6b)), [cx, cw])
    s = _p(rng, 4, 3)
    r7 = Tensor(rng.normal(size=(4, 3)))
    cases["softmax"] = (lambda: T.sum_all(T.mul(T.softmax(s), r7)), [s])
    lg = _p(rng, 5, 4)
    tgt = rng.integers(0, 4, size=5)
    cases["cross_entropy"] = (lambda: T.cross_entropy(lg, tgt), [lg])
    soft = rng.dirichlet(np.ones(4), size=5)
    cases["cross_entropy_soft"] = (lambda: T.cross_entropy(lg, soft), [lg])
    zs, w = _p(rng, 4, 3, 5), _p(rng, 4, 3)
    r8 = Tensor(rng.normal(size=(4, 5)))
    cases["combine"] = (lambda: T.sum_all(T.mul(T.combine(zs, w), r8)), [zs, w])
    p1, p2 = _p(rng, 4, 5), _p(rng, 4, 5)
    r9 = Tensor(rng.normal(size=(4, 2, 5)))
    cases["stack_axis1"] = (lambda: T.sum_all(T.mul(T.stack_axis1([p1, p2]), r9)), [p1, p2])
    mlp = MLP((6, 5, 4, 3), rng)
    _jitter_biases(mlp.named_parameters(), rng)
    mx = Tensor(rng.normal(size=(4, 6)))
    my = rng.integers(0, 3, size=4)
    cases["mlp_loss"] = (lambda: T.cross_entropy(mlp(mx), my), mlp.parameters())
    fe = FeatureExtractor((2, 3), (3, 3), (2, 2), (1, 1), rng)
    fx = Tensor(rng.normal(size=(3, 1, 16)))
    head = MLP((12, 4, 3), rng)
    _jitter_biases(fe.named_parameters() + head.named_parameters(), rng)
    fy = rng.integers(0, 3, size=3)
    cases["extractor_loss"] = (lambda: T.cross_entropy(head(fe(fx)), fy), fe.parameters() + head.parameters())
    return cases


def check_grad_reverse(lam: float, eps: float = 1e-5, seed: int = 0) -> float:
    """Autodiff through the reversal node against -lam times the plain numeric gradient."""
    rng = np.random.default_rng(seed)
    x = _p(rng, 3, 4)
    w = Tensor(rng.normal(size=(3, 4)))
    x.grad = None
    T.backward(T.sum_all(T.mul(T.grad_reverse(x, lam), w)))
    fd = T.numeric_grad(lambda: T.sum_all(T.mul(x, w)), x, eps)
    return T.rel_error(x.grad, -lam * fd)


def micro_batch(seed: int = 0, K: int = 3, per_domain: int = 2, signal_len: int = 16):
    """A tiny model plus one fixed per-domain minibatch with a fixed pseudolabel selection."""
    cfg = TrainConfig(K=K, signal_len=signal_len, channels=(2, 3, 4, 4), fc_hidden=(5, 4), seed=seed)
    model = build_networks(cfg)
    rng = np.random.default_rng([seed, 7])
    _jitter_biases(model.named_parameters(), rng)
    xs = [rng.uniform(0.0, 1.0, size=(per_domain, 1, signal_len)) for _ in range(K)]
    y1 = rng.integers(0, cfg.n_classes, size=per_domain)
    pseudo: list = [None]
    for k in range(1, K):
        chosen = np.arange(per_domain) if k % 2 == 0 else np.array([per_domain - 1])
        scores = np.full((per_domain, cfg.n_classes), 1.0 / cfg.n_classes)
        pseudo.append(PseudolabelBatch(chosen, rng.integers(0, cfg.n_classes, size=chosen.size), scores, 0.5))
    return cfg, model, xs, y1, pseudo


def check_composite(seed: int = 0, lam: float = 0.7, eps: float = 1e-5) -> CheckResult:
    """Full loss L = L_inv + L_cls + L_w on a 2-samples-per-domain batch.

    One backward pass of L is compared with the numeric gradient it should
    equal: d(L_cls + L_w) + s * d(L_inv), where s = -lam for the shared
    extractor (behind the reversal node) and 1 for everything else.
    """
    cfg, model, xs, y1, pseudo = micro_batch(seed)

    def terms():
        return step_losses(model, cfg, xs, y1, pseudo, lam)

    def spe():
        t = terms()
        return T.add(t.cls, t.w)

    model.zero_grad()
    T.backward(terms().total)
    shared = {id(p) for p in model.f_shared.parameters()}
    worst, count = 0.0, 0
    for p in model.parameters():
        ad = np.zeros_like(p.data) if p.grad is None else p.grad
        fd_spe = T.numeric_grad(spe, p, eps)
        fd_inv = T.numeric_grad(lambda: terms().inv, p, eps)
        sign = -lam if id(p) in shared else 1.0
        worst = max(worst, T.rel_error(ad, fd_spe + sign * fd_inv))
        count += p.data.size
    return CheckResult("msadgn_composite", worst, count)


def run_suite(seed: int = 0, eps: float = 1e-5, composite: bool = True) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (f, params) in _op_cases(rng).items():
        err = T.finite_diff_check(f, params, eps)
        results.append(CheckResult(name, err, sum(p.data.size for p in params)))
    for lam in (0.0, 0.5, 1.0):
        results.append(CheckResult(f"grad_reverse_lam{lam:g}", check_grad_reverse(lam, eps, seed), 12))
    if composite:
        results.append(check_composite(seed, eps=eps))
    return results
