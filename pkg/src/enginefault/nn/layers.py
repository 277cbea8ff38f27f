"""Parameter containers and the layers the models are assembled from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import ShapeError, Tensor, matmul


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, copy=True), requires_grad=True, name=name)


class Module:
    """Attribute-walking container, loosely modelled on torch's Module."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: F.RngState, dtype=np.float64):
        self.weight = Parameter(F.xavier_init((in_features, out_features), rng, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"Linear expects last dim {self.weight.shape[0]}, got {x.shape}")
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, num_heads: int, rng: F.RngState, dropout: float = 0.0,
                 dtype=np.float64):
        if dim % num_heads:
            raise ValueError(f"model dimension {dim} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.dropout = dropout
        self.rng = rng
        for n in "qkvo":
            setattr(self, f"w_{n}", Parameter(F.xavier_init((dim, dim), rng, dtype)))
            setattr(self, f"b_{n}", Parameter(np.zeros(dim, dtype=dtype)))

    def weights(self) -> dict[str, Tensor]:
        return {f"{k}_{n}": getattr(self, f"{k}_{n}") for n in "qkvo" for k in "wb"}

    def forward(self, query, key, value, mask=None, return_weights: bool = False):
        return F.multi_head_attention(
            query, key, value, self.num_heads, self.weights(), mask=mask,
            dropout_p=self.dropout, rng=self.rng, training=self.training,
            return_weights=return_weights,
        )


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: F.RngState, dropout: float = 0.0,
                 dtype=np.float64):
        self.lin1 = Linear(dim, hidden, rng, dtype)
        self.lin2 = Linear(hidden, dim, rng, dtype)
        self.dropout = dropout
        self.rng = rng

    def forward(self, x) -> Tensor:
        h = F.dropout(F.relu(self.lin1(x)), self.dropout, self.rng, self.training)
        return self.lin2(h)

