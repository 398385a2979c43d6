from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit


@dataclass
class ParamBlock:
    """
    Named trainable array with a same-shape gradient accumulator.

    Backward passes add into `grad`; the optimizer zeroes it after each step.
    """

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def accumulate(self, g: np.ndarray):
        if g.shape != self.value.shape:
            raise ValueError(f"{self.name}: gradient shape {g.shape} != parameter shape {self.value.shape}")
        self.grad += g

    def zero_grad(self):
        self.grad.fill(0.0)


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


class Linear:
    """y = x W^T + b over row-batched inputs."""

    def __init__(
        self,
        name: str,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        init_scale: float = 1.0,
        zero_bias: bool = False,
    ):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = ParamBlock(f"{name}.weight", uniform_init(rng, (out_dim, in_dim), in_dim) * init_scale)
        bias = np.zeros(out_dim) if zero_bias else uniform_init(rng, (out_dim,), in_dim) * init_scale
        self.bias = ParamBlock(f"{name}.bias", bias)

    def params(self) -> List[ParamBlock]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"{self.weight.name}: expected (N, {self.in_dim}) input, got {x.shape}")
        return x @ self.weight.value.T + self.bias.value

    def backward(self, x: np.ndarray, dy: np.ndarray) -> np.ndarray:
        """Returns dL/dx and accumulates dL/dW, dL/db."""
        if dy.shape != (x.shape[0], self.out_dim):
            raise ValueError(f"{self.weight.name}: expected (N, {self.out_dim}) upstream grad, got {dy.shape}")
        self.weight.grad += dy.T @ x
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value


def softplus(x: np.ndarray, beta: float) -> np.ndarray:
    return np.logaddexp(0.0, beta * x) / beta


def softplus_grad(x: np.ndarray, beta: float) -> np.ndarray:
    return expit(beta * x)


class Mlp:
    """
    Fully-connected stack with softplus between layers and a linear output.

    forward() returns the per-layer inputs needed by backward(); nothing is
    kept on the instance, so concurrent forwards on different batches are safe.
    """

    def __init__(
        self,
        name: str,
        dims: Sequence[int],
        rng: np.random.Generator,
        beta: float = 100.0,
        final_init_scale: float = 1.0,
        final_zero_bias: bool = False,
    ):
        if len(dims) < 2:
            raise ValueError(f"{name}: need at least input and output dims, got {dims}")
        self.beta = beta
        self.layers: List[Linear] = []
        for k, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = k == len(dims) - 2
            self.layers.append(
                Linear(
                    f"{name}.{k}",
                    d_in,
                    d_out,
                    rng,
                    init_scale=final_init_scale if last else 1.0,
                    zero_bias=final_zero_bias and last,
                )
            )

    def params(self) -> List[ParamBlock]:
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, List[Tuple[np.ndarray, Optional[np.ndarray]]]]:
        cache = []
        h = x
        for k, layer in enumerate(self.layers):
            z = layer.forward(h)
            if k < len(self.layers) - 1:
                cache.append((h, z))
                h = softplus(z, self.beta)
            else:
                cache.append((h, None))
                h = z
        return h, cache

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        grad = dy
        for layer, (x_in, z) in zip(reversed(self.layers), reversed(cache)):
            if z is not None:
                grad = grad * softplus_grad(z, self.beta)
            grad = layer.backward(x_in, grad)
        return grad
