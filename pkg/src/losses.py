"""
Training objectives.

The array kernels (`*_and_grad`) return the value together with its gradient
with respect to their array inputs; the public names return the value only.
Reductions are means over samples, points or pairs, so magnitudes do not
depend on the batch size. `total_loss` composes everything for one batch and,
when asked, backpropagates into the model and the latent table.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from src.config import CurriculumParams, RegWeights
from src.model import ImplicitTemplateModel
from src.nn import ParamBlock


def _reduce(values: np.ndarray, reduction: str) -> float:
    if reduction == "mean":
        return float(values.mean()) if values.size else 0.0
    if reduction == "sum":
        return float(values.sum())
    raise ValueError(f"unknown reduction {reduction!r}")


def _scale(n: int, reduction: str) -> float:
    return 1.0 / n if reduction == "mean" and n else 1.0


# --- curriculum / progressive reconstruction -------------------------------------------


def curriculum_weight(f: np.ndarray, s: np.ndarray, lam: float) -> np.ndarray:
    """w = 1 + lam * sgn(s) * sgn(s - f), in [1 - lam, 1 + lam]."""
    return 1.0 + lam * np.sign(s) * np.sign(s - f)


def curriculum_loss_and_grad(f, s, params: CurriculumParams, reduction: str = "mean") -> Tuple[float, np.ndarray]:
    """
    w * max(|clamp(f) - clamp(s)| - eps, 0) with the hard-example weight w.
    The gradient treats w as piecewise constant in f.
    """
    f = np.asarray(f, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    fc = np.clip(f, -params.delta, params.delta)
    sc = np.clip(s, -params.delta, params.delta)
    r = fc - sc
    w = curriculum_weight(f, s, params.lam)
    excess = np.abs(r) - params.eps
    active = excess > 0.0
    per_sample = w * np.where(active, excess, 0.0)
    grad = w * np.sign(r) * active * (np.abs(f) < params.delta)
    return _reduce(per_sample, reduction), grad * _scale(per_sample.size, reduction)


def curriculum_loss(f, s, params: CurriculumParams, reduction: str = "mean") -> float:
    return curriculum_loss_and_grad(f, s, params, reduction)[0]


def progressive_recon_loss_and_grad(
    step_sdf: Mapping[int, np.ndarray],
    gt: np.ndarray,
    schedule: Mapping[int, CurriculumParams],
) -> Tuple[float, Dict[int, float], Dict[int, np.ndarray]]:
    """Sum over supervised steps of the mean curriculum loss of T(p^(s))."""
    missing = sorted(set(schedule) - set(step_sdf))
    if missing:
        raise KeyError(f"no template predictions for supervised steps {missing}")
    terms, grads = {}, {}
    for step in sorted(schedule):
        terms[step], grads[step] = curriculum_loss_and_grad(step_sdf[step], gt, schedule[step])
    return math.fsum(terms.values()), terms, grads


def progressive_recon_loss(step_sdf, gt, schedule) -> float:
    return progressive_recon_loss_and_grad(step_sdf, gt, schedule)[0]


# --- warp regularizers ------------------------------------------------------------------


def huber(x: np.ndarray, delta: float) -> np.ndarray:
    return np.where(x <= delta, x**2 / (2.0 * delta), x - delta / 2.0)


def pointwise_reg_and_grad(shifts: np.ndarray, huber_delta: float) -> Tuple[float, np.ndarray]:
    """Mean Huber penalty on |W(p, c) - p|; gradient w.r.t. the shifts."""
    if huber_delta <= 0:
        raise ValueError(f"Huber delta must be > 0 (got {huber_delta})")
    shifts = np.asarray(shifts, dtype=np.float64).reshape(-1, 3)
    mag = np.linalg.norm(shifts, axis=1)
    value = _reduce(huber(mag, huber_delta), "mean")
    with np.errstate(divide="ignore", invalid="ignore"):
        coeff = np.where(mag <= huber_delta, 1.0 / huber_delta, 1.0 / mag)
    grad = shifts * coeff[:, None] * _scale(len(shifts), "mean")
    return value, grad


def pointwise_reg(shifts: np.ndarray, huber_delta: float) -> float:
    return pointwise_reg_and_grad(shifts, huber_delta)[0]


def pointpair_reg_and_grad(
    points: np.ndarray, shifts: np.ndarray, pairs: np.ndarray, eps_pp: float
) -> Tuple[float, np.ndarray]:
    """
    Mean over pairs of max(|dp_i - dp_j| / |p_i - p_j| - eps, 0).
    Pairs of coincident points are skipped.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    shifts = np.asarray(shifts, dtype=np.float64).reshape(-1, 3)
    grad = np.zeros_like(shifts)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    gap = np.linalg.norm(points[pairs[:, 0]] - points[pairs[:, 1]], axis=1)
    pairs = pairs[gap > 1e-12]
    gap = gap[gap > 1e-12]
    if len(pairs) == 0:
        return 0.0, grad
    diff = shifts[pairs[:, 0]] - shifts[pairs[:, 1]]
    spread = np.linalg.norm(diff, axis=1)
    excess = spread / gap - eps_pp
    active = (excess > 0.0) & (spread > 0.0)
    value = _reduce(np.where(active, excess, 0.0), "mean")
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(active[:, None], diff / (spread * gap)[:, None], 0.0) / len(pairs)
    np.add.at(grad, pairs[:, 0], g)
    np.add.at(grad, pairs[:, 1], -g)
    return value, grad


def pointpair_reg(points, shifts, pairs, eps_pp: float) -> float:
    return pointpair_reg_and_grad(points, shifts, pairs, eps_pp)[0]


def code_reg_and_grad(codes: np.ndarray, sigma: float) -> Tuple[float, np.ndarray]:
    """(1 / sigma^2) * sum_k |c_k|^2."""
    if sigma <= 0:
        raise ValueError(f"code prior scale must be > 0 (got {sigma})")
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    return float((codes**2).sum() / sigma**2), 2.0 * codes / sigma**2


def code_reg(codes: np.ndarray, sigma: float) -> float:
    return code_reg_and_grad(codes, sigma)[0]


# --- optional extension losses ----------------------------------------------------------


def template_supervision_loss(
    model: ImplicitTemplateModel, points: np.ndarray, sdf: np.ndarray, backward: bool = False, scale: float = 1.0
) -> float:
    """Mean |T(p_i) - s_i| against samples of a user-specified template shape.

    The returned value is unscaled; `scale` only multiplies the accumulated gradient.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    sdf = np.asarray(sdf, dtype=np.float64).reshape(-1)
    if len(points) == 0:
        raise ValueError("template supervision needs at least one sample")
    pred, cache = model.template.forward(points)
    r = pred - sdf
    if backward:
        model.template.backward(cache, scale * np.sign(r) / len(r))
    return float(np.abs(r).mean())


@dataclass
class CorrespondenceSet:
    """Annotated pairs: p on the shape at table row rows_k[i] matches q on row rows_l[i]."""

    p: np.ndarray
    rows_k: np.ndarray
    q: np.ndarray
    rows_l: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(-1, 3)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(-1, 3)
        self.rows_k = np.asarray(self.rows_k, dtype=np.int64).reshape(-1)
        self.rows_l = np.asarray(self.rows_l, dtype=np.int64).reshape(-1)
        if not len(self.p) == len(self.q) == len(self.rows_k) == len(self.rows_l):
            raise ValueError("correspondence arrays must have equal length")

    def __len__(self) -> int:
        return len(self.p)

    def subset(self, idx: np.ndarray) -> "CorrespondenceSet":
        return CorrespondenceSet(self.p[idx], self.rows_k[idx], self.q[idx], self.rows_l[idx])


def correspondence_loss(
    model: ImplicitTemplateModel,
    pairs: CorrespondenceSet,
    codes: ParamBlock,
    backward: bool = False,
    scale: float = 1.0,
) -> float:
    """Mean |W(p, c_k) - W(q, c_l)|^2 over annotated pairs; gradients are multiplied by `scale`."""
    n_rows = codes.shape[0]
    if len(pairs) == 0:
        return 0.0
    for rows in (pairs.rows_k, pairs.rows_l):
        if rows.min() < 0 or rows.max() >= n_rows:
            raise KeyError(f"correspondence refers to unknown latent rows (table has {n_rows})")
    traj_p = model.warp(pairs.p, codes.value[pairs.rows_k])
    traj_q = model.warp(pairs.q, codes.value[pairs.rows_l])
    diff = traj_p.canonical - traj_q.canonical
    value = float((diff**2).sum(axis=1).mean())
    if backward:
        g = scale * 2.0 * diff / len(diff)
        for traj, rows, sign in ((traj_p, pairs.rows_k, 1.0), (traj_q, pairs.rows_l, -1.0)):
            dpos = [None] * (traj.steps + 1)
            dpos[-1] = sign * g
            _, dcode = model.warp_backward(traj, dpos)
            np.add.at(codes.grad, rows, dcode)
    return value


# --- composition ------------------------------------------------------------------------


@dataclass
class SampleBatch:
    """Points of several shapes; `rows` maps each point to its latent-table row."""

    points: np.ndarray
    sdf: np.ndarray
    rows: np.ndarray
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    template_points: Optional[np.ndarray] = None
    template_sdf: Optional[np.ndarray] = None
    correspondences: Optional[CorrespondenceSet] = None

    @property
    def code_rows(self) -> np.ndarray:
        rows = np.unique(self.rows)
        if self.correspondences is not None and len(self.correspondences):
            rows = np.unique(np.concatenate([rows, self.correspondences.rows_k, self.correspondences.rows_l]))
        return rows


@dataclass
class LossBreakdown:
    """Weighted contributions; `total` is their fixed-order sum."""

    recon: Dict[int, float]
    pointwise: float
    pointpair: float
    code: float
    template: Optional[float] = None
    correspondence: Optional[float] = None
    total: float = 0.0

    def terms(self) -> Dict[str, float]:
        out = {f"rec_s{s}": v for s, v in sorted(self.recon.items())}
        out.update(pointwise=self.pointwise, pointpair=self.pointpair, code=self.code)
        if self.template is not None:
            out["template"] = self.template
        if self.correspondence is not None:
            out["correspondence"] = self.correspondence
        return out

    def as_row(self, iteration: int) -> Dict[str, float]:
        return {"iteration": iteration, **self.terms(), "total": self.total}


def total_loss(
    model: ImplicitTemplateModel,
    codes: ParamBlock,
    batch: SampleBatch,
    weights: RegWeights,
    schedule: Mapping[int, CurriculumParams],
    backward: bool = False,
) -> Tuple[float, LossBreakdown]:
    """
    L = sum_s L_rec^(s) + lambda_pw L_pw + lambda_pp L_pp + code prior
        [+ lambda_temp L_temp] [+ lambda_corr L_corr].

    With `backward=True` gradients accumulate into the model parameters and
    into the rows of `codes` used by the batch.
    """
    n = len(batch.points)
    traj = model.warp(batch.points, codes.value[batch.rows])
    steps = sorted(schedule)
    if steps[-1] > traj.steps:
        raise KeyError(f"schedule supervises step {steps[-1]} but the warp has {traj.steps} steps")

    stacked = np.concatenate([traj.positions[s] for s in steps], axis=0)
    sdf_all, tcache = model.template.forward(stacked)
    step_sdf = {s: sdf_all[k * n : (k + 1) * n] for k, s in enumerate(steps)}
    _, rec_terms, rec_grads = progressive_recon_loss_and_grad(step_sdf, batch.sdf, schedule)

    shifts = traj.shift
    pw, dshift_pw = pointwise_reg_and_grad(shifts, weights.huber_delta)
    pp, dshift_pp = pointpair_reg_and_grad(batch.points, shifts, batch.pairs, weights.eps_pp)
    code_rows = batch.code_rows
    cr, dcode_prior = code_reg_and_grad(codes.value[code_rows], weights.code_sigma)

    breakdown = LossBreakdown(
        recon=rec_terms,
        pointwise=weights.lambda_pw * pw,
        pointpair=weights.lambda_pp * pp,
        code=cr,
    )

    if backward:
        dstacked = model.template.backward(tcache, np.concatenate([rec_grads[s] for s in steps]))
        dpositions = [None] * (traj.steps + 1)
        for k, s in enumerate(steps):
            dpositions[s] = dstacked[k * n : (k + 1) * n]
        dfinal = weights.lambda_pw * dshift_pw + weights.lambda_pp * dshift_pp
        dpositions[-1] = dfinal if dpositions[-1] is None else dpositions[-1] + dfinal
        _, dcode_points = model.warp_backward(traj, dpositions)
        np.add.at(codes.grad, batch.rows, dcode_points)
        codes.grad[code_rows] += dcode_prior

    if batch.template_points is not None:
        lt = template_supervision_loss(
            model, batch.template_points, batch.template_sdf,
            backward=backward and weights.lambda_temp > 0, scale=weights.lambda_temp,
        )
        breakdown.template = weights.lambda_temp * lt

    if batch.correspondences is not None and len(batch.correspondences):
        lc = correspondence_loss(
            model, batch.correspondences, codes,
            backward=backward and weights.lambda_corr > 0, scale=weights.lambda_corr,
        )
        breakdown.correspondence = weights.lambda_corr * lc

    breakdown.total = math.fsum(breakdown.terms().values())
    return breakdown.total, breakdown
