"""Metrics, persisted predictions, multi-seed runs and the ablation harness."""

from __future__ import annotations

import csv
import json
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ABLATIONS, TrainConfig
from .data import N_CLASSES, DomainDataset, make_benchmark
from .errors import DataError, FormatError, ParameterError
from .specific import Prediction
from .tensor import Tensor
from .trainer import ModelParameters, predict_with, train

REPORT_VERSION = "msadgn-report-v1"


@dataclass
class EvalReport:
    overall_accuracy: float
    confusion: np.ndarray
    per_class_accuracy: np.ndarray
    n_samples: int
    seed: int = 0
    config_hash: str = ""
    metadata: dict = field(default_factory=dict)

    def check(self) -> None:
        """Raise FormatError unless the count identities hold."""
        c = np.asarray(self.confusion)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise FormatError(f"confusion: expected a square matrix, found shape {c.shape}")
        if int(c.sum()) != self.n_samples:
            raise FormatError(f"confusion: entries sum to {int(c.sum())}, n_samples is {self.n_samples}")
        if self.n_samples and self.overall_accuracy != np.trace(c) / self.n_samples:
            raise FormatError("overall_accuracy: does not equal trace / n_samples")
        if len(self.per_class_accuracy) != c.shape[0]:
            raise FormatError("per_class_accuracy: length differs from the class count")

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "overall_accuracy": self.overall_accuracy,
            "confusion": np.asarray(self.confusion).tolist(),
            "per_class_accuracy": [None if np.isnan(v) else float(v) for v in self.per_class_accuracy],
            "n_samples": self.n_samples,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("version") != REPORT_VERSION:
            raise FormatError(f"version: expected {REPORT_VERSION}, found {d.get('version')!r}")
        try:
            rep = cls(
                float(d["overall_accuracy"]),
                np.asarray(d["confusion"], dtype=np.int64),
                np.array([np.nan if v is None else v for v in d["per_class_accuracy"]], dtype=float),
                int(d["n_samples"]),
                int(d.get("seed", 0)),
                str(d.get("config_hash", "")),
                dict(d.get("metadata") or {}),
            )
        except KeyError as exc:
            raise FormatError(f"{exc.args[0]}: missing from report") from exc
        rep.check()
        return rep

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"report is not valid JSON: {path}") from exc


def confusion_matrix(y_true, y_pred, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with true class on rows and predicted class on columns."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DataError(f"{y_true.size} labels but {y_pred.size} predictions")
    for name, y in (("labels", y_true), ("predictions", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= n_classes):
            raise DataError(f"{name} outside [0, {n_classes})")
    c = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(c, (y_true, y_pred), 1)
    return c


def report_from_labels(y_true, y_pred, n_classes: int = N_CLASSES, seed: int = 0,
                       config_hash: str = "") -> EvalReport:
    c = confusion_matrix(y_true, y_pred, n_classes)
    n = int(c.sum())
    rows = c.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(rows > 0, np.diag(c) / np.maximum(rows, 1), np.nan)
    acc = float(np.trace(c) / n) if n else 0.0
    return EvalReport(acc, c, per_class, n, int(seed), config_hash)


# ---------------------------------------------------------------- prediction files


def write_predictions(path, pred: Prediction, labels=None) -> Path:
    """JSON lines: index, true label (or null), predicted label, weights, logits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for i in range(len(pred)):
            row = {
                "index": i,
                "label": int(labels[i]) if labels is not None else None,
                "pred": int(pred.labels[i]),
                "weights": pred.weights.w[i].tolist(),
                "logits": pred.logits[i].tolist(),
            }
            fh.write(json.dumps(row) + "\n")
    return path


def read_predictions(path) -> tuple[np.ndarray, np.ndarray]:
    """(true labels, predicted labels) recovered from a prediction file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"prediction file not found: {path}")
    y_true, y_pred = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                y_true.append(row["label"])
                y_pred.append(row["pred"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise FormatError(f"line {lineno} of {path} is not a prediction record") from exc
    if any(y is None for y in y_true):
        raise DataError(f"{path} has unlabeled rows; cannot score it")
    return np.asarray(y_true, np.int64), np.asarray(y_pred, np.int64)


def evaluate(model: ModelParameters, cfg: TrainConfig, target: DomainDataset, predictions_path=None) -> EvalReport:
    """Predict every target sample, persist the predictions, and score the file."""
    if not target.labeled:
        raise DataError(f"target domain {target.domain_id} has no labels to evaluate against")
    pred = predict_with(model, cfg, target.signals)
    if predictions_path is None:
        with tempfile.TemporaryDirectory() as tmp:
            p = write_predictions(Path(tmp) / "predictions.jsonl", pred, target.labels)
            y_true, y_pred = read_predictions(p)
    else:
        y_true, y_pred = read_predictions(write_predictions(predictions_path, pred, target.labels))
    return report_from_labels(y_true, y_pred, cfg.n_classes, cfg.seed, cfg.config_hash())


def dump_embeddings(model: ModelParameters, ds: DomainDataset, path, batch: int = 512) -> Path:
    """Shared-extractor features as CSV (one row per sample, label last when known)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with T.no_grad():
        emb = np.concatenate([model.f_shared(Tensor(ds.signals[i : i + batch])).data
                              for i in range(0, ds.n, batch)])
    truth = ds.ground_truth()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"e{i}" for i in range(emb.shape[1])] + (["label"] if truth is not None else []))
        for i, row in enumerate(emb):
            w.writerow([repr(float(v)) for v in row] + ([int(truth[i])] if truth is not None else []))
    return path


# ---------------------------------------------------------------- runs


@dataclass(frozen=True)
class BenchmarkSpec:
    """Which synthetic benchmark to build; the data stay fixed across training seeds."""

    base_seed: int = 0
    K: int = 3
    target_domain: int = 4
    n_per_class: int = 1000
    length: int = 512

    def build(self) -> tuple[list[DomainDataset], DomainDataset]:
        return make_benchmark(self.base_seed, self.K, self.target_domain, self.n_per_class, self.length)


@dataclass
class RunMatrix:
    entries: list[tuple[str, int, EvalReport]] = field(default_factory=list)

    def add(self, scenario: str, seed: int, report: EvalReport) -> None:
        self.entries.append((scenario, int(seed), report))

    def scenarios(self) -> list[str]:
        out: list[str] = []
        for s, _, _ in self.entries:
            if s not in out:
                out.append(s)
        return out

    def accuracies(self, scenario: str) -> np.ndarray:
        return np.array([r.overall_accuracy for s, _, r in self.entries if s == scenario])

    def seeds(self, scenario: str) -> list[int]:
        return [seed for s, seed, _ in self.entries if s == scenario]

    def mean(self, scenario: str) -> float:
        a = self.accuracies(scenario)
        if a.size == 0:
            raise DataError(f"no runs recorded for scenario {scenario!r}")
        return float(a.mean())

    def std(self, scenario: str) -> float:
        """Sample standard deviation; 0 for a single run."""
        a = self.accuracies(scenario)
        if a.size == 0:
            raise DataError(f"no runs recorded for scenario {scenario!r}")
        return float(a.std(ddof=1)) if a.size > 1 else 0.0

    def pooled_std(self, a: str, b: str) -> float:
        return float(np.sqrt((self.std(a) ** 2 + self.std(b) ** 2) / 2.0))

    def summary(self) -> list[dict]:
        return [{"scenario": s, "n": len(self.accuracies(s)), "mean": self.mean(s), "std": self.std(s)}
                for s in self.scenarios()]

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "seed", "accuracy", "config_hash"])
            for s, seed, r in self.entries:
                w.writerow([s, seed, repr(r.overall_accuracy), r.config_hash])
        return path

    def to_dict(self) -> dict:
        return {
            "runs": [{"scenario": s, "seed": seed, "report": r.to_dict()} for s, seed, r in self.entries],
            "summary": self.summary(),
        }


def run_scenario(cfg: TrainConfig, bench: BenchmarkSpec, seeds, scenario: str | None = None,
                 out_dir=None, matrix: RunMatrix | None = None, data=None, progress=None) -> RunMatrix:
    """Train once per seed and score each run on the held-out domain.

    ``data`` may carry a prebuilt ``(sources, target)`` pair for ``bench``.
    """
    seeds = list(seeds)
    if not seeds:
        raise ParameterError("run_scenario needs at least one seed")
    if cfg.K != bench.K or cfg.signal_len != bench.length:
        raise ParameterError(f"config (K={cfg.K}, len={cfg.signal_len}) does not match the benchmark "
                             f"(K={bench.K}, len={bench.length})")
    sources, target = data if data is not None else bench.build()
    scenario = scenario or cfg.ablation
    matrix = matrix if matrix is not None else RunMatrix()
    for seed in seeds:
        run_cfg = cfg.with_(seed=int(seed))
        model, tlog = train(run_cfg, sources)
        pred_path = None
        if out_dir is not None:
            run_dir = Path(out_dir) / f"{scenario}_seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            tlog.write_csv(run_dir / "train_log.csv")
            pred_path = run_dir / "predictions.jsonl"
        report = evaluate(model, run_cfg, target, pred_path)
        report.metadata["scenario"] = scenario
        if out_dir is not None:
            report.save(Path(out_dir) / f"{scenario}_seed{seed}" / "report.json")
        matrix.add(scenario, int(seed), report)
        if progress is not None:
            progress(scenario, int(seed), report)
    return matrix


def ablation_sweep(cfg: TrainConfig, bench: BenchmarkSpec, variants=ABLATIONS, seeds=(0,), out_dir=None,
                   progress=None) -> RunMatrix:
    """run_scenario for each ablation variant on one shared benchmark."""
    data = bench.build()
    matrix = RunMatrix()
    for v in variants:
        run_scenario(cfg.with_(ablation=v), bench, seeds, v, out_dir, matrix, data, progress)
    return matrix


@dataclass
class DirectionalCheck:
    name: str
    passed: bool
    detail: str


def directional_checks(matrix: RunMatrix, full: str = "M7", baseline: str = "M1",
                       margin: float = 0.03) -> list[DirectionalCheck]:
    """Full model beats the baseline by ``margin`` and every other variant within a pooled std."""
    checks = []
    gain = matrix.mean(full) - matrix.mean(baseline)
    checks.append(DirectionalCheck(f"{full}-{baseline}", gain >= margin,
                                   f"gain {gain * 100:.2f}pp (need >= {margin * 100:.1f}pp)"))
    for s in matrix.scenarios():
        if s in (full, baseline):
            continue
        gap = matrix.mean(s) - matrix.mean(full)
        tol = matrix.pooled_std(full, s)
        checks.append(DirectionalCheck(f"{full}>={s}", gap <= tol,
                                       f"{s} - {full} = {gap * 100:.2f}pp, pooled std {tol * 100:.2f}pp"))
    return checks

