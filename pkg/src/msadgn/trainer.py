"""Network construction, Adam, the training loop, and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .adversarial import enumerate_pairs, invariant_loss_with_report, lambda_schedule, single_discriminator_loss
from .config import TrainConfig
from .data import DomainDataset
from .errors import ConfigurationError, ContractError, DataError, FormatError, NumericError
from .networks import MLP, FeatureExtractor, ModelParameters
from .pseudolabel import (
    PrototypeState,
    PseudolabelBatch,
    dynamic_threshold,
    init_prototypes,
    pseudolabel_score,
    select_pseudolabels,
    similarity_score,
    update_prototypes_from_embeddings,
)
from .specific import classification_loss, predict, weight_branch_loss
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "msadgn-ckpt-v1"


def build_networks(cfg: TrainConfig) -> ModelParameters:
    """Fresh, seeded networks for ``cfg``.

    Networks draw their initial weights in a fixed order (shared extractor,
    weighted extractor, task classifiers, weighted classifier, discriminators)
    from one generator, so a seed pins every parameter.
    """
    L = cfg.embedding_dim
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    arch = (cfg.channels, cfg.kernels, cfg.strides, cfg.pads)
    std = cfg.init_std
    f_shared = FeatureExtractor(*arch, rng, std)
    f_weighted = FeatureExtractor(*arch, rng, std)
    head = (L, *cfg.fc_hidden)
    classifiers = [MLP((*head, cfg.n_classes), rng, std) for _ in range(cfg.K)]
    c_weighted = MLP((*head, cfg.K), rng, std)
    if cfg.discriminator == "single":
        discriminators = [MLP((*head, cfg.K), rng, std)] if cfg.K >= 2 else []
        pairs = []
    else:
        plist = enumerate_pairs(cfg.K) if cfg.K >= 2 else []
        discriminators = [MLP((*head, 2), rng, std) for _ in plist]
        pairs = [(p.k1, p.k2) for p in plist]
    return ModelParameters(f_shared, f_weighted, classifiers, c_weighted, discriminators, pairs, cfg.signal_len)


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(params: list[Tensor], grads: list, states: list[AdamState], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place. A missing grad counts as zero."""
    if not (len(params) == len(grads) == len(states)):
        raise ContractError("params, grads and states must have equal lengths")
    for p, g, s in zip(params, grads, states):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or s.m.shape != p.data.shape:
            raise ContractError(f"Adam shape mismatch: param {p.shape}, grad {g.shape}, state {s.m.shape}")
        s.t += 1
        s.m *= beta1
        s.m += (1 - beta1) * g
        s.v *= beta2
        s.v += (1 - beta2) * (g * g)
        denom = np.sqrt(s.v / (1 - beta2**s.t))
        denom += eps
        p.data -= (lr / (1 - beta1**s.t)) * s.m / denom


class Adam:
    def __init__(self, params: list[Tensor]):
        self.params = list(params)
        self.states = [AdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params]

    def step(self, lr: float) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.states, lr)


# ---------------------------------------------------------------- schedule


@dataclass
class ProgressClock:
    """Training progress p = ((epoch - 1) * L_e + step) / (N_e * L_e)."""

    batches_per_epoch: int
    total_epochs: int
    epoch: int = 1
    step: int = 0

    @property
    def p(self) -> float:
        return ((self.epoch - 1) * self.batches_per_epoch + self.step) / (self.total_epochs * self.batches_per_epoch)

    def tick(self) -> None:
        if self.step == self.batches_per_epoch:
            self.epoch += 1
            self.step = 0
        self.step += 1


# ---------------------------------------------------------------- one step


@dataclass
class LossTerms:
    inv: Tensor
    cls: Tensor
    w: Tensor
    total: Tensor
    per_pair: list[float] = field(default_factory=list)


def _zero() -> Tensor:
    return Tensor(0.0)


def split_rows(t: Tensor, sizes: list[int]) -> list[Tensor]:
    bounds = np.cumsum([0] + list(sizes))
    return [T.slice_rows(t, int(bounds[i]), int(bounds[i + 1])) for i in range(len(sizes))]


def select_step_pseudolabels(model: ModelParameters, cfg: TrainConfig, embeddings: list[np.ndarray],
                             p: float, prototypes: PrototypeState | None) -> list[PseudolabelBatch | None]:
    """Pseudolabels for the unlabeled domains of one step (index 0 stays None).

    Rows with an all-zero embedding have no defined cosine similarity and are
    left unlabeled.
    """
    sw = cfg.switches
    tau = dynamic_threshold(p) if sw.dynamic_threshold else cfg.fixed_tau
    out: list[PseudolabelBatch | None] = [None]
    c1 = model.classifiers[0]
    for emb in embeddings[1:]:
        with T.no_grad():
            phi = T.softmax(c1(Tensor(emb))).data
        if sw.similarity and prototypes is not None:
            ok = np.linalg.norm(emb, axis=1) > 0
            psi = np.full_like(phi, 1.0 / phi.shape[1])
            if ok.any():
                psi[ok] = similarity_score(emb[ok], prototypes, cfg.similarity_temperature).data
            scores = pseudolabel_score(phi, psi, cfg.alpha).data
            scores[~ok] = 0.0
            batch = select_pseudolabels(scores, tau)
            batch.skipped = np.flatnonzero(~ok)
        else:
            batch = select_pseudolabels(phi, tau)
        out.append(batch)
    return out


def step_losses(model: ModelParameters, cfg: TrainConfig, xs: list[np.ndarray], y1: np.ndarray,
                pseudo: list[PseudolabelBatch | None] | None, lam: float,
                embeddings: Tensor | None = None) -> LossTerms:
    """L = L_inv + L_cls + L_w for one set of per-domain minibatches.

    ``pseudo[k]`` holds the selection for domain k+1 (k >= 1). Disabled parts
    contribute a constant zero.
    """
    sw = cfg.switches
    if not sw.pseudolabel and not sw.invariant and not sw.specific:
        # ERM: labeled domain only
        emb1 = model.f_shared(Tensor(xs[0]))
        l_cls = classification_loss([emb1], [y1], model.classifiers[:1])
        l_inv, l_w = _zero(), _zero()
        return LossTerms(l_inv, l_cls, l_w, T.add(T.add(l_inv, l_cls), l_w))

    sizes = [x.shape[0] for x in xs]
    if embeddings is None:
        embeddings = model.f_shared(Tensor(np.concatenate(xs, axis=0)))
    embs = split_rows(embeddings, sizes)

    cls_embs, cls_labels = [embs[0]], [y1]
    if sw.pseudolabel and pseudo is not None:
        for k in range(1, len(xs)):
            sel = pseudo[k]
            if sel is None or len(sel) == 0:
                cls_embs.append(embs[k])
                cls_labels.append(None)
            else:
                cls_embs.append(T.take_rows(embs[k], sel.selected_indices))
                cls_labels.append(sel.labels)
    classifiers = model.classifiers if sw.specific else [model.classifiers[0]] * len(cls_embs)
    l_cls = classification_loss(cls_embs, cls_labels, classifiers)

    per_pair: list[float] = []
    if sw.invariant and len(xs) >= 2:
        if cfg.discriminator == "single":
            l_inv = single_discriminator_loss(embs, model.discriminators[0], lam)
            per_pair = [l_inv.item()]
        else:
            l_inv, report = invariant_loss_with_report(embs, model.discriminators, lam)
            per_pair = report.per_pair_losses
    else:
        l_inv = _zero()

    if sw.specific:
        l_w = weight_branch_loss([Tensor(x) for x in xs], model.f_weighted, model.c_weighted)
    else:
        l_w = _zero()
    return LossTerms(l_inv, l_cls, l_w, T.add(T.add(l_inv, l_cls), l_w), per_pair)


def gradient_groups(model: ModelParameters, loss: Tensor) -> set[str]:
    """Parameter groups that receive a nonzero gradient from ``loss`` alone."""
    model.zero_grad()
    if loss.requires_grad:
        T.backward(loss)
    hit = set()
    for name, module in model.groups().items():
        if any(p.grad is not None and np.any(p.grad != 0) for p in module.parameters()):
            hit.add(name)
    model.zero_grad()
    return hit


# ---------------------------------------------------------------- loop


LOG_COLUMNS = ("step", "epoch", "p", "tau", "lambda", "lr", "L_inv", "L_cls", "L_w", "L")


@dataclass
class TrainingLog:
    K: int
    rows: list[dict] = field(default_factory=list)
    audit: list[dict] = field(default_factory=list)

    def columns(self) -> list[str]:
        extra = [f"m_{k}" for k in range(2, self.K + 1)] + [f"rho"]
        return list(LOG_COLUMNS) + extra

    def losses(self) -> np.ndarray:
        return np.array([[r["L_inv"], r["L_cls"], r["L_w"], r["L"]] for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns(), extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    def write_audit_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "domain", "selected", "pseudolabel_accuracy"])
            w.writeheader()
            w.writerows(self.audit)


def _check_sources(cfg: TrainConfig, sources: list[DomainDataset]) -> None:
    if len(sources) != cfg.K:
        raise ConfigurationError(f"config expects K={cfg.K} source domains, got {len(sources)}")
    if not sources[0].labeled:
        raise DataError("source domain 1 must be labeled")
    for k, ds in enumerate(sources, start=1):
        if ds.length != cfg.signal_len:
            raise DataError(f"source {k} has length {ds.length}, config expects {cfg.signal_len}")
        if ds.n == 0:
            raise DataError(f"source {k} is empty")
        if k > 1 and ds.labeled:
            log.debug("labels of source %d are ignored", k)


def train(cfg: TrainConfig, sources: list[DomainDataset], progress=None) -> tuple[ModelParameters, TrainingLog]:
    """Run the full training procedure and return the final networks and the log.

    ``progress`` is an optional callable receiving ``(epoch, summary_dict)``
    once per epoch.
    """
    _check_sources(cfg, sources)
    sw = cfg.switches
    model = build_networks(cfg)
    opt = Adam(model.parameters())
    rng = np.random.default_rng([cfg.seed, 0xDA7A])

    n_l = sources[0].n
    m = cfg.batch_size
    n_batches = cfg.batches_per_epoch or max(1, n_l // m)
    clock = ProgressClock(n_batches, cfg.epochs)
    y_all = sources[0].labels
    tlog = TrainingLog(cfg.K)

    use_protos = sw.pseudolabel and sw.similarity
    protos = init_prototypes(sources[0], model.f_shared, cfg.n_classes) if use_protos else None

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n_l)
        audit_sel = np.zeros(cfg.K, int)
        audit_hit = np.zeros(cfg.K, int)
        for s in range(n_batches):
            clock.tick()
            p = clock.p
            start = (s * m) % n_l
            idx1 = order[start : start + m]
            if idx1.size < m:
                idx1 = np.concatenate([idx1, order[: m - idx1.size]])
            xs = [sources[0].signals[idx1]]
            y1 = y_all[idx1]
            unl_idx = [None]
            if sw.pseudolabel or sw.invariant or sw.specific:
                for ds in sources[1:]:
                    ix = rng.integers(0, ds.n, size=m)
                    unl_idx.append(ix)
                    xs.append(ds.signals[ix])

            lam = lambda_schedule(p) if sw.invariant else 0.0
            tau = dynamic_threshold(p) if sw.dynamic_threshold else cfg.fixed_tau
            embeddings = None
            pseudo = None
            if len(xs) > 1:
                embeddings = model.f_shared(Tensor(np.concatenate(xs, axis=0)))
            if sw.pseudolabel:
                emb_np = np.split(embeddings.data, np.cumsum([x.shape[0] for x in xs])[:-1])
                if use_protos and not sw.global_prototypes:
                    protos = update_prototypes_from_embeddings(protos, emb_np[0], y1, global_iteration=False)
                pseudo = select_step_pseudolabels(model, cfg, emb_np, p, protos)
                for k in range(1, cfg.K):
                    truth = sources[k].ground_truth()
                    audit_sel[k] += len(pseudo[k])
                    if truth is not None and len(pseudo[k]):
                        audit_hit[k] += int((truth[unl_idx[k][pseudo[k].selected_indices]] == pseudo[k].labels).sum())

            try:
                terms = step_losses(model, cfg, xs, y1, pseudo, lam, embeddings)
            except NumericError as exc:
                raise NumericError(f"step {len(tlog.rows) + 1} (epoch {epoch}): {exc}") from exc
            total = terms.total.item()
            if not np.isfinite(total):
                raise NumericError(f"non-finite loss at step {len(tlog.rows) + 1} (epoch {epoch})")
            model.zero_grad()
            T.backward(terms.total)
            opt.step(lr)

            if use_protos and sw.global_prototypes:
                with T.no_grad():
                    fresh = model.f_shared(Tensor(xs[0])).data
                protos = update_prototypes_from_embeddings(protos, fresh, y1, global_iteration=True)

            row = {
                "step": len(tlog.rows) + 1, "epoch": epoch, "p": p, "tau": tau, "lambda": lam, "lr": lr,
                "L_inv": terms.inv.item(), "L_cls": terms.cls.item(), "L_w": terms.w.item(), "L": total,
                "rho": protos.rho if protos is not None else float("nan"),
            }
            for k in range(2, cfg.K + 1):
                row[f"m_{k}"] = len(pseudo[k - 1]) if pseudo is not None else 0
            tlog.rows.append(row)

        for k in range(1, cfg.K):
            if sw.pseudolabel:
                acc = audit_hit[k] / audit_sel[k] if audit_sel[k] else float("nan")
                tlog.audit.append({"epoch": epoch, "domain": k + 1, "selected": int(audit_sel[k]),
                                   "pseudolabel_accuracy": acc})
        if progress is not None:
            ep = [r for r in tlog.rows if r["epoch"] == epoch]
            progress(epoch, {c: float(np.mean([r[c] for r in ep])) for c in ("L_inv", "L_cls", "L_w", "L")})
    return model, tlog


def uses_specific_prediction(cfg: TrainConfig) -> bool:
    return cfg.switches.specific


def predict_with(model: ModelParameters, cfg: TrainConfig, signals):
    return predict(signals, model, use_specific=uses_specific_prediction(cfg))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: ModelParameters, cfg: TrainConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"version": CHECKPOINT_VERSION, "config": cfg.to_dict(),
            "shapes": {n: list(p.shape) for n, p in model.named_parameters()}}
    arrays = {f"param/{n}": p.data for n, p in model.named_parameters()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    return path


def load_checkpoint(path, K: int | None = None) -> tuple[ModelParameters, TrainConfig]:
    """Load a checkpoint; ``K`` optionally asserts the number of source domains."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            arrays = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (ValueError, OSError, KeyError) as exc:
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"version: expected {CHECKPOINT_VERSION}, found {meta.get('version')!r}")
    cfg = TrainConfig.from_dict(meta["config"])
    if K is not None and K != cfg.K:
        raise ConfigurationError(f"checkpoint was trained with K={cfg.K}, caller expects K={K}")
    model = build_networks(cfg)
    names = [n for n, _ in model.named_parameters()]
    if set(names) != set(arrays):
        missing = sorted(set(names) - set(arrays))[:3]
        raise FormatError(f"parameters: checkpoint does not match the architecture (missing {missing})")
    for n, p in model.named_parameters():
        if arrays[n].shape != p.shape:
            raise FormatError(f"shape of {n}: expected {p.shape}, found {arrays[n].shape}")
        p.data = arrays[n].astype(np.float64).copy()
    return model, cfg
