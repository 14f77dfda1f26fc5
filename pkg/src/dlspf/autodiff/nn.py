"""Parameter containers and the small set of layers the networks are built from."""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from .tensor import Tensor, dense, layer_norm


class Module:
    """Base class: parameters and sub-modules are discovered from attributes.

    Attributes holding a :class:`Tensor` with ``requires_grad`` are parameters;
    attributes holding a :class:`Module` (or a list of modules) are children.
    Names are dotted attribute paths, which makes them stable checkpoint keys.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype: np.dtype | type) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


def param(data: np.ndarray, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Dense(Module):
    """Affine map with optional activation; Glorot-uniform weights, zero bias."""

    def __init__(
        self,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        activation: str = "identity",
        zero_init: bool = False,
        dtype=np.float64,
    ) -> None:
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            limit = np.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-limit, limit, size=(d_in, d_out))
        self.weight = param(w, dtype)
        self.bias = param(np.zeros(d_out), dtype)
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias, self.activation)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, dtype=np.float64) -> None:
        self.gamma = param(np.ones(d), dtype)
        self.beta = param(np.zeros(d), dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)
