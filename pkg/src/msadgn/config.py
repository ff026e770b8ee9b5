"""Training configuration and the M1..M7 ablation switches."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigurationError

ABLATIONS = ("M1", "M2", "M3", "M4", "M5", "M6", "M7")


@dataclass(frozen=True)
class Ablation:
    """Which parts of the model are active.

    M1 is ERM on the labeled domain. M2 uses the traditional pseudolabel
    (probability score against the fixed threshold). M3 fixes the threshold
    at 0.4, M4 recomputes prototypes per minibatch, M5 drops the adversarial
    branch, M6 drops the domain-specific branch, M7 is the full model.
    """

    pseudolabel: bool = True
    similarity: bool = True
    dynamic_threshold: bool = True
    global_prototypes: bool = True
    invariant: bool = True
    specific: bool = True

    @classmethod
    def from_name(cls, name: str) -> "Ablation":
        name = name.upper()
        table = {
            "M1": cls(False, False, False, False, False, False),
            "M2": cls(similarity=False, dynamic_threshold=False, global_prototypes=False),
            "M3": cls(dynamic_threshold=False),
            "M4": cls(global_prototypes=False),
            "M5": cls(invariant=False),
            "M6": cls(specific=False),
            "M7": cls(),
        }
        if name not in table:
            raise ConfigurationError(f"unknown ablation {name!r}; expected one of {', '.join(ABLATIONS)}")
        return table[name]


@dataclass(frozen=True)
class TrainConfig:
    K: int = 3
    n_classes: int = 3
    signal_len: int = 512
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    lr_decay: float = 0.5
    decay_epochs: int = 10
    alpha: float = 0.2
    fixed_tau: float = 0.4
    similarity_temperature: float = 0.05
    seed: int = 0
    ablation: str = "M7"
    channels: tuple[int, ...] = (8, 16, 32, 64)
    kernels: tuple[int, ...] = (3, 3, 3, 3)
    strides: tuple[int, ...] = (2, 2, 2, 2)
    pads: tuple[int, ...] = (1, 1, 1, 1)
    fc_hidden: tuple[int, ...] = (64, 32)
    # Gaussian init: None scales the std by fan-in, a number fixes it for every layer
    init_std: float | None = None
    # "pairwise" is the model; "single" swaps in one K-way discriminator for study only
    discriminator: str = "pairwise"
    batches_per_epoch: int | None = None

    def __post_init__(self):
        for name in ("channels", "kernels", "strides", "pads", "fc_hidden"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        positive = ("K", "n_classes", "signal_len", "epochs", "batch_size", "decay_epochs")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigurationError("lr must be positive and lr_decay in (0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.similarity_temperature <= 0:
            raise ConfigurationError("similarity_temperature must be positive")
        if not 0.0 <= self.fixed_tau <= 1.0:
            raise ConfigurationError(f"fixed_tau must lie in [0, 1], got {self.fixed_tau}")
        n = len(self.channels)
        if n == 0 or not (len(self.kernels) == len(self.strides) == len(self.pads) == n):
            raise ConfigurationError("channels, kernels, strides and pads need equal nonzero lengths")
        if any(v < 1 for v in self.channels + self.kernels + self.strides + self.fc_hidden):
            raise ConfigurationError("architecture sizes must be positive")
        if any(v < 0 for v in self.pads):
            raise ConfigurationError("pads must be nonnegative")
        if self.discriminator not in ("pairwise", "single"):
            raise ConfigurationError(f"discriminator must be 'pairwise' or 'single', got {self.discriminator!r}")
        if self.init_std is not None and self.init_std <= 0:
            raise ConfigurationError("init_std must be positive")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ConfigurationError("batches_per_epoch must be positive")
        Ablation.from_name(self.ablation)

    @property
    def switches(self) -> Ablation:
        return Ablation.from_name(self.ablation)

    @property
    def embedding_dim(self) -> int:
        from .networks import conv_output_length

        return self.channels[-1] * conv_output_length(self.signal_len, self.kernels, self.strides, self.pads)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for the 1-based ``epoch``."""
        return self.lr * self.lr_decay ** ((epoch - 1) // self.decay_epochs)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path) -> TrainConfig:
    """Read a JSON or TOML config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        data = tomllib.loads(text)
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
    return TrainConfig.from_dict(data)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
