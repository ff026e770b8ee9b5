"""Conv1d feature extractors, 3-layer FC heads, and the grouped model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor



def init_std(fan_in: int, fixed: float | None) -> float:
    """Fixed std when given, else the fan-in (He) scale sqrt(2 / fan_in)."""
    return fixed if fixed is not None else float(np.sqrt(2.0 / fan_in))


class Module:
    """Anything that owns named parameter tensors."""

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class Conv1dLayer(Module):
    def __init__(self, cin: int, cout: int, ksz: int, stride: int, pad: int, rng: np.random.Generator,
                 std: float | None = None):
        self.weight = Tensor(rng.normal(0.0, init_std(cin * ksz, std), size=(cout, cin, ksz)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv1d(x, self.weight, self.stride, self.pad)
        return T.add(y, T.reshape(self.bias, (self.bias.shape[0], 1)))

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, std: float | None = None):
        self.weight = Tensor(rng.normal(0.0, init_std(din, std), size=(din, dout)), requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class FeatureExtractor(Module):
    """Stack of Conv1d + ReLU layers followed by a flatten."""

    def __init__(self, channels, kernels, strides, pads, rng: np.random.Generator, std: float | None = None):
        self.layers = []
        cin = 1
        for cout, k, s, p in zip(channels, kernels, strides, pads):
            self.layers.append(Conv1dLayer(cin, cout, k, s, p, rng, std))
            cin = cout

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = T.relu(layer(x))
        return T.flatten(x)

    def named_parameters(self):
        return [(f"conv{i}.{n}", p) for i, layer in enumerate(self.layers) for n, p in layer.named_parameters()]


class MLP(Module):
    """FC -> ReLU -> FC -> ReLU -> FC, returning logits."""

    def __init__(self, sizes, rng: np.random.Generator, std: float | None = None):
        self.layers = [Linear(a, b, rng, std) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def named_parameters(self):
        return [(f"fc{i}.{n}", p) for i, layer in enumerate(self.layers) for n, p in layer.named_parameters()]


def conv_output_length(length: int, kernels, strides, pads) -> int:
    for k, s, p in zip(kernels, strides, pads):
        length = (length + 2 * p - k) // s + 1
        if length < 1:
            raise ConfigurationError("conv stack reduces the signal to nothing")
    return length


@dataclass
class ModelParameters:
    """All networks of the model, grouped by role.

    ``discriminators[i]`` tells apart the pair ``pairs[i]`` (1-based domain ids).
    """

    f_shared: FeatureExtractor
    f_weighted: FeatureExtractor
    classifiers: list[MLP]
    c_weighted: MLP
    discriminators: list[MLP]
    pairs: list[tuple[int, int]] = field(default_factory=list)
    signal_len: int | None = None

    @property
    def K(self) -> int:
        return len(self.classifiers)

    def groups(self) -> dict[str, Module]:
        """Ordered mapping group name -> module; the order fixes optimizer and checkpoint layout."""
        out: dict[str, Module] = {"f_shared": self.f_shared, "f_weighted": self.f_weighted}
        for k, c in enumerate(self.classifiers, start=1):
            out[f"c{k}"] = c
        out["c_weighted"] = self.c_weighted
        for i, d in enumerate(self.discriminators, start=1):
            out[f"d{i}"] = d
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{g}.{n}", p) for g, m in self.groups().items() for n, p in m.named_parameters()]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}
