from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy.special import expit

from src.nn.layers import ParamBlock, uniform_init


@dataclass
class LstmCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


class LstmCell:
    """
    Standard LSTM cell (no peepholes), gates stacked in (i, f, g, o) order:

        i, f, o = sigmoid(.)   g = tanh(.)
        c = f * c_prev + i * g
        h = o * tanh(c)
    """

    def __init__(self, name: str, input_dim: int, hidden_dim: int, rng: np.random.Generator, forget_bias: float = 1.0):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        H = hidden_dim
        self.weight_ih = ParamBlock(f"{name}.weight_ih", uniform_init(rng, (4 * H, input_dim), input_dim))
        self.weight_hh = ParamBlock(f"{name}.weight_hh", uniform_init(rng, (4 * H, H), H))
        bias = np.zeros(4 * H)
        bias[H : 2 * H] = forget_bias
        self.bias = ParamBlock(f"{name}.bias", bias)

    def params(self) -> List[ParamBlock]:
        return [self.weight_ih, self.weight_hh, self.bias]

    def zero_state(self, n: int) -> Tuple[np.ndarray, np.ndarray]:
        return np.zeros((n, self.hidden_dim)), np.zeros((n, self.hidden_dim))

    def forward(self, x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray) -> Tuple[np.ndarray, np.ndarray, LstmCache]:
        n = x.shape[0]
        if x.shape != (n, self.input_dim):
            raise ValueError(f"{self.weight_ih.name}: expected (N, {self.input_dim}) input, got {x.shape}")
        if h_prev.shape != (n, self.hidden_dim) or c_prev.shape != (n, self.hidden_dim):
            raise ValueError(
                f"{self.weight_ih.name}: state shapes {h_prev.shape}/{c_prev.shape} != ({n}, {self.hidden_dim})"
            )
        H = self.hidden_dim
        z = x @ self.weight_ih.value.T + h_prev @ self.weight_hh.value.T + self.bias.value
        i = expit(z[:, :H])
        f = expit(z[:, H : 2 * H])
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = expit(z[:, 3 * H :])
        c = f * c_prev + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        return h, c, LstmCache(x, h_prev, c_prev, i, f, g, o, tanh_c)

    def backward(self, cache: LstmCache, dh: np.ndarray, dc: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Exact VJP: returns (d_input, dh_prev, dc_prev) and accumulates parameter grads."""
        do = dh * cache.tanh_c
        dc_total = dc + dh * cache.o * (1.0 - cache.tanh_c**2)
        di = dc_total * cache.g
        df = dc_total * cache.c_prev
        dg = dc_total * cache.i
        dc_prev = dc_total * cache.f

        dz = np.concatenate(
            [
                di * cache.i * (1.0 - cache.i),
                df * cache.f * (1.0 - cache.f),
                dg * (1.0 - cache.g**2),
                do * cache.o * (1.0 - cache.o),
            ],
            axis=1,
        )
        self.weight_ih.grad += dz.T @ cache.x
        self.weight_hh.grad += dz.T @ cache.h_prev
        self.bias.grad += dz.sum(axis=0)
        return dz @ self.weight_ih.value, dz @ self.weight_hh.value, dc_prev
