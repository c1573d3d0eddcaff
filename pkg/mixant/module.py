"""Parameter containers and the small dense layers the MixANT blocks are built from."""
from typing import Dict, Iterator, List, Tuple

import numpy as np

from mixant import numerics as nx
from mixant.errors import CheckpointError
from mixant.numerics import Parameter, Rng, Tensor


class Module:
    """
    Base class for anything holding parameters.

    Parameters and sub-modules are discovered from instance attributes in definition
    order; lists of modules are walked by index. Names are dotted paths such as
    `blocks.3.layer.router.W_g`.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, param in own.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise CheckpointError(f"{name}: expected shape {param.shape}, got {value.shape}")
            param.data = np.ascontiguousarray(value, dtype=param.data.dtype)

    def cast(self, dtype) -> "Module":
        for param in self.parameters():
            param.data = np.ascontiguousarray(param.data, dtype=dtype)
        return self


def uniform_init(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True):
        self.W = Parameter(uniform_init(rng.child("W"), (d_in, d_out), d_in))
        self.b = Parameter(np.zeros(d_out), decay=False) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nx.linear(x, self.W, self.b)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d), decay=False)
        self.bias = Parameter(np.zeros(d), decay=False)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias, self.eps)


class Mlp(Module):
    """Two-layer feed-forward with GELU."""

    def __init__(self, d: int, ratio: int, rng: Rng):
        self.fc1 = Linear(d, d * ratio, rng.child("fc1"))
        self.fc2 = Linear(d * ratio, d, rng.child("fc2"))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nx.gelu(self.fc1(x)))
