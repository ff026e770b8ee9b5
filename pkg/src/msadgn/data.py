"""Synthetic multi-domain clutter spectra and their on-disk format.

Three categories share one Doppler axis centred on zero:

* 0 sea: two Bragg-like bumps at +-b bins
* 1 land: one sharp bump at zero Doppler
* 2 sea-land boundary: a weighted mixture of the two

A domain blurs every spectrum with a Gaussian kernel (the analogue of a
coarser coherent integration), rescales it against a white-noise floor and
shifts it along the Doppler axis. Each spectrum is min-max normalised last.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError

CLASS_NAMES = ("sea", "land", "boundary")
N_CLASSES = 3
FORMAT_VERSION = "msadgn-ds-v1"

# graded defaults for domains 1..4
DEFAULT_SMOOTHING = (1.0, 2.0, 4.0, 8.0)
DEFAULT_NOISE = (0.02, 0.03, 0.04, 0.05)
DEFAULT_SHIFT = (0.0, 2.0, -2.0, 4.0)


@dataclass(frozen=True)
class ClutterDomainSpec:
    domain_id: int
    smoothing_width: float = 1.0
    noise_sigma: float = 0.02
    amplitude_scale: float = 1.0
    doppler_shift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.domain_id < 1:
            raise ParameterError(f"domain_id must be >= 1, got {self.domain_id}")
        if self.smoothing_width <= 0 or self.amplitude_scale <= 0 or self.noise_sigma < 0:
            raise ParameterError(f"invalid domain spec {self}")


@dataclass
class DomainDataset:
    """Signals of one domain, shape (n, 1, length).

    Unlabeled datasets keep their ground truth in ``audit_labels`` so that
    pseudolabel quality can be measured; it is never used for training.
    """

    domain_id: int
    signals: np.ndarray
    labels: np.ndarray | None = None
    spec: ClutterDomainSpec | None = None
    audit_labels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.float64)
        if self.signals.ndim != 3 or self.signals.shape[1] != 1:
            raise DataError(f"signals must have shape (n, 1, length), got {self.signals.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise DataError(f"{self.labels.shape[0]} labels for {self.n} signals")

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    @property
    def n(self) -> int:
        return self.signals.shape[0]

    @property
    def length(self) -> int:
        return self.signals.shape[2]

    def ground_truth(self) -> np.ndarray | None:
        return self.labels if self.labels is not None else self.audit_labels

    def unlabeled(self) -> "DomainDataset":
        """Copy with labels moved to the audit slot."""
        return DomainDataset(self.domain_id, self.signals, None, self.spec, self.ground_truth())

    def class_counts(self) -> np.ndarray:
        truth = self.ground_truth()
        return np.bincount(truth, minlength=N_CLASSES) if truth is not None else np.zeros(N_CLASSES, int)


def _bump(axis: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((axis - center) / width) ** 2)


def _gaussian_blur(rows: np.ndarray, sigma: float) -> np.ndarray:
    """Blur each row with a normalised Gaussian kernel, zero-padded edges."""
    half = int(np.ceil(4 * sigma))
    k = _bump(np.arange(-half, half + 1, dtype=float), 0.0, sigma)
    k /= k.sum()
    padded = np.pad(rows, ((0, 0), (half, half)))
    win = np.lib.stride_tricks.sliding_window_view(padded, k.size, axis=1)
    return win @ k[::-1]


def class_templates(labels: np.ndarray, length: int, rng: np.random.Generator, shift: float = 0.0) -> np.ndarray:
    """Unblurred, noise-free spectra for the given category labels."""
    n = labels.shape[0]
    axis = np.arange(length, dtype=float) - length / 2
    # geometry is in absolute bins so short profiles keep resolvable lines
    bragg = rng.uniform(10.0, 18.0, size=n)
    width = rng.uniform(0.8, 1.6, size=n)
    jitter = rng.uniform(-1.0, 1.0, size=n)
    ratio = rng.uniform(0.5, 1.0, size=n)
    mix = rng.uniform(0.35, 0.65, size=n)
    floor = rng.uniform(0.0, 0.05, size=n)

    out = np.empty((n, length))
    for i in range(n):
        c = shift + jitter[i]
        lo, hi = (ratio[i], 1.0) if rng.random() < 0.5 else (1.0, ratio[i])
        sea = lo * _bump(axis, c - bragg[i], width[i]) + hi * _bump(axis, c + bragg[i], width[i])
        land = _bump(axis, c, width[i])
        if labels[i] == 0:
            s = sea
        elif labels[i] == 1:
            s = land
        else:
            s = mix[i] * sea + (1 - mix[i]) * land
        out[i] = s + floor[i]
    return out


def _normalise(rows: np.ndarray) -> np.ndarray:
    lo = rows.min(axis=1, keepdims=True)
    span = rows.max(axis=1, keepdims=True) - lo
    span[span == 0] = 1.0
    return (rows - lo) / span


def generate_domain(spec: ClutterDomainSpec, n_per_class: int = 1000, length: int = 512) -> DomainDataset:
    """Balanced, labeled dataset for one domain; a pure function of ``spec``."""
    if n_per_class < 1 or length < 32:
        raise ParameterError(f"need n_per_class >= 1 and length >= 32, got {n_per_class}, {length}")
    rng = np.random.default_rng(spec.seed)
    labels = rng.permutation(np.repeat(np.arange(N_CLASSES), n_per_class))
    rows = class_templates(labels, length, rng, spec.doppler_shift)
    if spec.smoothing_width > 0.5:
        rows = _gaussian_blur(rows, spec.smoothing_width)
    rows = spec.amplitude_scale * _normalise(rows)
    if spec.noise_sigma > 0:
        rows = rows + rng.normal(0.0, spec.noise_sigma, size=rows.shape)
    rows = _normalise(rows)
    return DomainDataset(spec.domain_id, rows[:, None, :], labels, spec)


def default_domain_spec(domain_id: int, base_seed: int = 0) -> ClutterDomainSpec:
    """Graded spec for ``domain_id``; ids past 4 keep doubling the blur."""
    i = domain_id - 1
    if i < len(DEFAULT_SMOOTHING):
        width, noise, shift = DEFAULT_SMOOTHING[i], DEFAULT_NOISE[i], DEFAULT_SHIFT[i]
    else:
        width = 2.0**i
        noise = 0.02 + 0.01 * i
        shift = (1 if i % 2 else -1) * 2.0 * ((i + 1) // 2)
    amp = 1.0 - 0.1 * min(i, 5)
    return ClutterDomainSpec(domain_id, width, noise, amp, shift, seed=(base_seed ^ domain_id) & 0xFFFFFFFF)


def make_benchmark(
    base_seed: int = 0,
    K: int = 3,
    target_domain: int = 4,
    n_per_class: int = 1000,
    length: int = 512,
) -> tuple[list[DomainDataset], DomainDataset]:
    """K source domains plus one held-out target drawn from domain ids 1..K+1.

    Domain 1 is always the labeled source. The remaining sources are returned
    with their labels moved to the audit slot; the target keeps labels for
    evaluation.
    """
    if K < 2:
        raise ParameterError(f"need at least 2 source domains, got K={K}")
    if target_domain == 1:
        raise ParameterError("target_domain 1 is the labeled source domain")
    if not 2 <= target_domain <= K + 1:
        raise ParameterError(f"target_domain must lie in [2, {K + 1}], got {target_domain}")
    datasets = {
        d: generate_domain(default_domain_spec(d, base_seed), n_per_class, length) for d in range(1, K + 2)
    }
    sources = [datasets[1]] + [datasets[d].unlabeled() for d in range(2, K + 2) if d != target_domain]
    return sources, datasets[target_domain]


# ---------------------------------------------------------------- persistence


def save_dataset(ds: DomainDataset, path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (little-endian float64) and ``<path>.json``."""
    base = Path(path)
    if base.suffix in (".bin", ".json"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    bin_path, meta_path = base.with_suffix(".bin"), base.with_suffix(".json")
    bin_path.write_bytes(np.ascontiguousarray(ds.signals, dtype="<f8").tobytes())
    meta = {
        "version": FORMAT_VERSION,
        "shape": list(ds.signals.shape),
        "domain_id": ds.domain_id,
        "labeled": ds.labeled,
        "labels": ds.labels.tolist() if ds.labeled else None,
        "audit_labels": ds.audit_labels.tolist() if ds.audit_labels is not None else None,
        "spec": asdict(ds.spec) if ds.spec is not None else None,
    }
    meta_path.write_text(json.dumps(meta))
    return bin_path, meta_path


def load_dataset(path) -> DomainDataset:
    base = Path(path)
    if base.suffix in (".bin", ".json"):
        base = base.with_suffix("")
    bin_path, meta_path = base.with_suffix(".bin"), base.with_suffix(".json")
    if not meta_path.exists() or not bin_path.exists():
        raise DataError(f"dataset files missing for {base}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"metadata is not valid JSON: {meta_path}") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise FormatError(f"version: expected {FORMAT_VERSION}, found {meta.get('version')!r}")
    shape = meta.get("shape")
    if not (isinstance(shape, list) and len(shape) == 3 and shape[1] == 1):
        raise FormatError(f"shape: expected [n, 1, length], found {shape!r}")
    raw = bin_path.read_bytes()
    expected = shape[0] * shape[1] * shape[2] * 8
    if len(raw) != expected:
        raise FormatError(f"shape: metadata implies {expected} bytes, binary holds {len(raw)}")
    signals = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    labeled = bool(meta.get("labeled"))
    labels = meta.get("labels")
    if labeled and (labels is None or len(labels) != shape[0]):
        raise FormatError(f"labels: labeled dataset needs {shape[0]} labels")
    if not labeled and labels is not None:
        raise FormatError("labels: present on a dataset flagged unlabeled")
    audit = meta.get("audit_labels")
    if audit is not None and len(audit) != shape[0]:
        raise FormatError(f"audit_labels: expected {shape[0]} entries, found {len(audit)}")
    spec = ClutterDomainSpec(**meta["spec"]) if meta.get("spec") else None
    return DomainDataset(
        int(meta["domain_id"]),
        signals,
        np.asarray(labels, dtype=np.int64) if labeled else None,
        spec,
        np.asarray(audit, dtype=np.int64) if audit is not None else None,
    )


def export_csv(ds: DomainDataset, path) -> None:
    """One row per signal; the label column is last, or absent when unlabeled."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = [f"x{i}" for i in range(ds.length)] + (["label"] if ds.labeled else [])
        w.writerow(header)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.signals[i, 0]]
            if ds.labeled:
                row.append(int(ds.labels[i]))
            w.writerow(row)


def benchmark_names(sources: list[DomainDataset], target: DomainDataset) -> dict[str, DomainDataset]:
    """File stems used by ``gen-data``: source1..sourceK and target."""
    out = {f"source{k}": ds for k, ds in enumerate(sources, start=1)}
    out["target"] = target
    return out


def load_benchmark_dir(data_dir) -> tuple[list[DomainDataset], DomainDataset | None]:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"data directory not found: {data_dir}")
    stems = sorted(
        (p.stem for p in data_dir.glob("source*.json")),
        key=lambda s: int(s[len("source"):]) if s[len("source"):].isdigit() else 0,
    )
    if not stems:
        raise DataError(f"no source*.json datasets in {data_dir}")
    sources = [load_dataset(data_dir / s) for s in stems]
    target = load_dataset(data_dir / "target") if (data_dir / "target.json").exists() else None
    return sources, target


def centroid_oracle_accuracy(train: DomainDataset, test: DomainDataset) -> float:
    """Nearest-class-mean classifier fit on ``train`` scored on ``test``."""
    y_train, y_test = train.ground_truth(), test.ground_truth()
    if y_train is None or y_test is None:
        raise DataError("centroid oracle needs ground truth on both datasets")
    xtr = train.signals[:, 0]
    xte = test.signals[:, 0]
    cents = np.stack([xtr[y_train == c].mean(axis=0) for c in range(N_CLASSES)])
    d = ((xte[:, None, :] - cents[None]) ** 2).sum(axis=2)
    return float((d.argmin(axis=1) == y_test).mean())


def split_half(ds: DomainDataset, seed: int = 0) -> tuple[DomainDataset, DomainDataset]:
    """Random halves of a dataset, preserving the label slot in use."""
    idx = np.random.default_rng(seed).permutation(ds.n)
    a, b = idx[: ds.n // 2], idx[ds.n // 2 :]

    def part(ix):
        lab = ds.labels[ix] if ds.labels is not None else None
        aud = ds.audit_labels[ix] if ds.audit_labels is not None else None
        return DomainDataset(ds.domain_id, ds.signals[ix], lab, ds.spec, aud)

    return part(a), part(b)


def dataset_summary(ds: DomainDataset) -> dict:
    return {
        "domain_id": ds.domain_id,
        "n": ds.n,
        "length": ds.length,
        "labeled": ds.labeled,
        "class_counts": ds.class_counts().tolist(),
    }
