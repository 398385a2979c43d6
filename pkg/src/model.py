"""
Deep implicit template network: F(p, c) = T(W(p, c)).

W warps a query point towards its canonical position in S small steps
p^(i) = p^(i-1) + alpha^(i) * p^(i-1) + beta^(i), with (alpha, beta) read
from an LSTM cell driven by [c, p^(i-1)]. T is a code-independent MLP
giving the signed distance at the canonical position.
"""

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.config import ModelConfig
from src.nn import Linear, LstmCache, LstmCell, Mlp, ParamBlock


@dataclass
class LatentCode:
    values: np.ndarray
    shape_id: Optional[int] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"latent code for shape {self.shape_id} is not finite")

    @property
    def dim(self) -> int:
        return len(self.values)


@dataclass
class WarpTrajectory:
    """Positions p^(0)..p^(S), each (N, 3), and the per-step (alpha, beta)."""

    positions: List[np.ndarray]
    alphas: List[np.ndarray]
    betas: List[np.ndarray]
    _caches: list = field(default_factory=list, repr=False)

    @property
    def steps(self) -> int:
        return len(self.positions) - 1

    @property
    def canonical(self) -> np.ndarray:
        return self.positions[-1]

    @property
    def shift(self) -> np.ndarray:
        """Delta p = W(p, c) - p."""
        return self.positions[-1] - self.positions[0]


class TemplateNet:
    """R^3 -> R signed distance; independent of the latent code."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dims = [3] + [cfg.template_width] * cfg.template_layers + [1]
        self.mlp = Mlp("template", dims, rng, beta=cfg.softplus_beta)

    def params(self) -> List[ParamBlock]:
        return self.mlp.params()

    def forward(self, points: np.ndarray):
        out, cache = self.mlp.forward(points)
        return out[:, 0], cache

    def backward(self, cache, dsdf: np.ndarray) -> np.ndarray:
        return self.mlp.backward(cache, dsdf[:, None])


class LstmWarp:
    """Recurrent warp: LSTM cell on [c, p^(i-1)] plus a linear head H -> (alpha, beta)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.latent_dim = cfg.latent_dim
        self.steps = cfg.steps
        self.lstm = LstmCell("warp.lstm", cfg.latent_dim + 3, cfg.hidden_dim, rng)
        self.head = Linear("warp.head", cfg.hidden_dim, 6, rng, init_scale=cfg.head_init_scale, zero_bias=True)

    def params(self) -> List[ParamBlock]:
        return self.lstm.params() + self.head.params()

    def head_params(self) -> List[ParamBlock]:
        return self.head.params()

    def forward(self, points: np.ndarray, codes: np.ndarray, steps: Optional[int] = None) -> WarpTrajectory:
        steps = self.steps if steps is None else steps
        h, c = self.lstm.zero_state(len(points))
        p = points
        traj = WarpTrajectory([p], [], [])
        for _ in range(steps):
            h, c, cache = self.lstm.forward(np.concatenate([codes, p], axis=1), h, c)
            out = self.head.forward(h)
            alpha, beta = out[:, :3], out[:, 3:]
            traj._caches.append((cache, h))
            p = p + (alpha * p + beta)
            traj.positions.append(p)
            traj.alphas.append(alpha)
            traj.betas.append(beta)
        return traj

    def backward(self, traj: WarpTrajectory, dpositions: Sequence[Optional[np.ndarray]]) -> Tuple[np.ndarray, np.ndarray]:
        """Backpropagate dL/dp^(s) through the recurrence; returns (dL/dp, dL/dc) per point."""
        n = len(traj.positions[0])
        H = self.lstm.hidden_dim
        dp = np.zeros((n, 3))
        dh = np.zeros((n, H))
        dc = np.zeros((n, H))
        dcode = np.zeros((n, self.latent_dim))
        for i in range(traj.steps, 0, -1):
            if dpositions[i] is not None:
                dp = dp + dpositions[i]
            p_prev = traj.positions[i - 1]
            cache, h = traj._caches[i - 1]
            alpha = traj.alphas[i - 1]
            dhead = np.concatenate([dp * p_prev, dp], axis=1)
            dh = dh + self.head.backward(h, dhead)
            dx, dh, dc = self.lstm.backward(cache, dh, dc)
            dcode += dx[:, : self.latent_dim]
            dp = dp * (1.0 + alpha) + dx[:, self.latent_dim :]
        if dpositions[0] is not None:
            dp = dp + dpositions[0]
        return dp, dcode


class MlpWarp:
    """Single-step warp ablation: one MLP on [c, p] emits (alpha, beta) once."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.latent_dim = cfg.latent_dim
        self.steps = 1
        dims = [cfg.latent_dim + 3] + [cfg.hidden_dim] * cfg.template_layers + [6]
        self.mlp = Mlp(
            "warp.mlp", dims, rng, beta=cfg.softplus_beta, final_init_scale=cfg.head_init_scale, final_zero_bias=True
        )

    def params(self) -> List[ParamBlock]:
        return self.mlp.params()

    def head_params(self) -> List[ParamBlock]:
        return self.mlp.layers[-1].params()

    def forward(self, points: np.ndarray, codes: np.ndarray, steps: Optional[int] = None) -> WarpTrajectory:
        traj = WarpTrajectory([points], [], [])
        if steps == 0:
            return traj
        out, cache = self.mlp.forward(np.concatenate([codes, points], axis=1))
        alpha, beta = out[:, :3], out[:, 3:]
        traj._caches.append(cache)
        traj.positions.append(points + (alpha * points + beta))
        traj.alphas.append(alpha)
        traj.betas.append(beta)
        return traj

    def backward(self, traj: WarpTrajectory, dpositions: Sequence[Optional[np.ndarray]]) -> Tuple[np.ndarray, np.ndarray]:
        n = len(traj.positions[0])
        dp = np.zeros((n, 3))
        dcode = np.zeros((n, self.latent_dim))
        if traj.steps == 1 and dpositions[1] is not None:
            d1 = dpositions[1]
            p0 = traj.positions[0]
            dx = self.mlp.backward(traj._caches[0], np.concatenate([d1 * p0, d1], axis=1))
            dcode = dx[:, : self.latent_dim]
            dp = d1 * (1.0 + traj.alphas[0]) + dx[:, self.latent_dim :]
        if dpositions[0] is not None:
            dp = dp + dpositions[0]
        return dp, dcode


class ImplicitTemplateModel:
    """Template T plus conditional warp W, with every trainable block in `params()`."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.template = TemplateNet(cfg, rng)
        self.warp_net = LstmWarp(cfg, rng) if cfg.warp_kind == "lstm" else MlpWarp(cfg, rng)

    @property
    def steps(self) -> int:
        return self.warp_net.steps

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def params(self) -> List[ParamBlock]:
        return self.template.params() + self.warp_net.params()

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def zero_warp_head(self):
        """Force alpha = beta = 0 at every step, i.e. the identity warp."""
        for p in self.warp_net.head_params():
            p.value.fill(0.0)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.value for p in self.params()}

    def load_state_dict(self, records: Dict[str, np.ndarray]):
        for p in self.params():
            if p.name not in records:
                raise KeyError(p.name)
            arr = records[p.name]
            if arr.shape != p.shape:
                raise ValueError(f"{p.name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.value[...] = arr

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        for p in self.params():
            digest.update(p.name.encode())
            digest.update(np.ascontiguousarray(p.value).tobytes())
        return digest.hexdigest()

    # --- queries ---------------------------------------------------------------------

    def _prepare(self, p, c) -> Tuple[np.ndarray, np.ndarray]:
        points = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        codes = c.values if isinstance(c, LatentCode) else np.asarray(c, dtype=np.float64)
        if codes.ndim == 1:
            codes = np.broadcast_to(codes, (len(points), len(codes)))
        if codes.shape != (len(points), self.latent_dim):
            raise ValueError(f"latent code shape {codes.shape} does not match ({len(points)}, {self.latent_dim})")
        return points, codes

    def warp(self, p, c, steps: Optional[int] = None) -> WarpTrajectory:
        """Trajectory p^(0)..p^(steps) (default all S steps); `c` is one code or one per point."""
        points, codes = self._prepare(p, c)
        return self.warp_net.forward(points, codes, steps)

    def warp_backward(self, traj: WarpTrajectory, dpositions) -> Tuple[np.ndarray, np.ndarray]:
        return self.warp_net.backward(traj, dpositions)

    def template_sdf(self, p) -> np.ndarray:
        points = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        return self.template.forward(points)[0]

    def forward_sdf(self, p, c, steps: Optional[int] = None) -> np.ndarray:
        """T(p^(steps)); steps = S is the full model, steps = 0 is T(p)."""
        steps = self.steps if steps is None else steps
        if not 0 <= steps <= self.steps:
            raise ValueError(f"steps must be in 0..{self.steps} (got {steps})")
        traj = self.warp(p, c, steps)
        return self.template_sdf(traj.positions[steps])
