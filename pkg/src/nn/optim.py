from typing import Dict, Iterable, List, Optional

import numpy as np

from src.nn.layers import ParamBlock


class Adam:
    """
    Adam with bias correction. Gradients are zeroed after every step.

    With `sparse_rows=True` each parameter is treated as a table of rows and
    step(rows=...) touches only the listed rows, each with its own step counter
    for bias correction. Rows not listed stay bit-unchanged, moments included.
    """

    def __init__(
        self,
        params: Iterable[ParamBlock],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        sparse_rows: bool = False,
    ):
        self.params: List[ParamBlock] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.sparse_rows = sparse_rows
        self.t = 0
        self.m: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.value) for p in self.params}
        self.row_t: Dict[str, np.ndarray] = {}
        if sparse_rows:
            for p in self.params:
                if p.value.ndim != 2:
                    raise ValueError(f"{p.name}: sparse-row Adam needs 2-D parameters, got {p.shape}")
                self.row_t[p.name] = np.zeros(p.shape[0], dtype=np.int64)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, rows: Optional[np.ndarray] = None):
        if self.sparse_rows:
            if rows is None:
                raise ValueError("sparse-row Adam needs the rows to update")
            self._sparse_step(np.unique(np.asarray(rows, dtype=np.int64)))
        else:
            self._dense_step()
        self.zero_grad()

    def _dense_step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p in self.params:
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad**2
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def _sparse_step(self, rows: np.ndarray):
        self.t += 1
        for p in self.params:
            t = self.row_t[p.name]
            t[rows] += 1
            tr = t[rows].astype(np.float64)[:, None]
            g = p.grad[rows]
            m = self.beta1 * self.m[p.name][rows] + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[p.name][rows] + (1.0 - self.beta2) * g**2
            self.m[p.name][rows] = m
            self.v[p.name][rows] = v
            m_hat = m / (1.0 - self.beta1**tr)
            v_hat = v / (1.0 - self.beta2**tr)
            p.value[rows] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        """Moments (and per-row counters) keyed for checkpoint records."""
        out = {}
        for p in self.params:
            out[f"{prefix}.m.{p.name}"] = self.m[p.name]
            out[f"{prefix}.v.{p.name}"] = self.v[p.name]
            if self.sparse_rows:
                out[f"{prefix}.t.{p.name}"] = self.row_t[p.name].astype(np.float64)
        return out

    def load_state_arrays(self, prefix: str, records: Dict[str, np.ndarray], t: int):
        self.t = int(t)
        for p in self.params:
            for key, store in (("m", self.m), ("v", self.v)):
                arr = records[f"{prefix}.{key}.{p.name}"]
                if arr.shape != p.shape:
                    raise ValueError(f"{prefix}.{key}.{p.name}: shape {arr.shape} != {p.shape}")
                store[p.name] = np.array(arr, dtype=np.float64)
            if self.sparse_rows:
                self.row_t[p.name] = records[f"{prefix}.t.{p.name}"].astype(np.int64)
