"""
Using a trained model: latent inference for unseen shapes, mesh extraction,
code interpolation and canonical-space correspondence.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from src.config import CurriculumParams, config
from src.geometry import SampleSet
from src.grid import GridField, polygonize
from src.losses import code_reg_and_grad, curriculum_loss_and_grad
from src.mesh import Mesh
from src.model import ImplicitTemplateModel, LatentCode
from src.nn import Adam, ParamBlock

logging.basicConfig(level=config.LOG_LEVEL)
logger = logging.getLogger(__name__)

__all__ = [
    "GridField",
    "CorrespondenceQuery",
    "infer_latent",
    "extract_field",
    "extract_mesh",
    "extract_template_mesh",
    "interpolate_codes",
    "canonical_position",
    "correspond",
]


def infer_latent(
    samples: SampleSet,
    model: ImplicitTemplateModel,
    iterations: int = 800,
    lr: float = 5e-3,
    code_sigma: float = 100.0,
    seed: int = 0,
    batch_points: Optional[int] = None,
) -> LatentCode:
    """
    Fit a code to an unseen shape with the network frozen: curriculum loss at
    the final step with eps = lam = 0 (clamp-L1) plus the code prior.
    """
    if len(samples) == 0:
        raise ValueError(f"shape {samples.shape_id}: no samples to fit a latent code to")
    rng = np.random.default_rng(seed)
    code = ParamBlock("infer.code", rng.normal(0.0, 0.01, size=(1, model.latent_dim)))
    opt = Adam([code], lr=lr)
    params = CurriculumParams(0.0, 0.0)
    for it in range(iterations):
        if batch_points and batch_points < len(samples):
            idx = rng.choice(len(samples), size=batch_points, replace=False)
            points, sdf = samples.points[idx], samples.sdf[idx]
        else:
            points, sdf = samples.points, samples.sdf
        traj = model.warp(points, code.value[0])
        pred, cache = model.template.forward(traj.canonical)
        loss, dpred = curriculum_loss_and_grad(pred, sdf, params)
        dpos = [None] * (traj.steps + 1)
        dpos[-1] = model.template.backward(cache, dpred)
        _, dcode = model.warp_backward(traj, dpos)
        prior, dprior = code_reg_and_grad(code.value, code_sigma)
        code.accumulate(dcode.sum(axis=0, keepdims=True) + dprior)
        opt.step()
        if it % 100 == 0:
            logger.debug(f"infer shape {samples.shape_id} iter {it} loss={loss + prior:.5f}")
    # backward passes accumulated into the frozen network; discard
    model.zero_grad()
    return LatentCode(code.value[0].copy(), samples.shape_id)


def extract_field(
    model: ImplicitTemplateModel,
    code: Optional[LatentCode],
    resolution: int,
    steps: Optional[int] = None,
    bounds: Tuple[float, float] = (-1.0, 1.0),
    threads: int = config.THREADS,
    chunk: int = config.GRID_CHUNK,
) -> GridField:
    """F(p, c) truncated after `steps` warp steps, or T alone when `code` is None."""
    if code is None:
        fn = model.template_sdf
    else:
        fn = lambda pts: model.forward_sdf(pts, code, steps)  # noqa: E731
    return GridField.from_function(fn, resolution, bounds, chunk=chunk, threads=threads)


def extract_mesh(
    model: ImplicitTemplateModel,
    code: LatentCode,
    resolution: int,
    steps: Optional[int] = None,
    threads: int = config.THREADS,
    chunk: int = config.GRID_CHUNK,
) -> Mesh:
    """
    Marching cubes on the zero level set of F(., c). `steps < S` gives the
    intermediate shape T(p^(steps)). An empty mesh means no zero crossing.
    """
    mesh = polygonize(extract_field(model, code, resolution, steps, threads=threads, chunk=chunk))
    if mesh.is_empty:
        logger.warning(f"⚠️  No zero crossing for shape {code.shape_id} at resolution {resolution}")
    return mesh


def extract_template_mesh(
    model: ImplicitTemplateModel, resolution: int, threads: int = config.THREADS, chunk: int = config.GRID_CHUNK
) -> Mesh:
    mesh = polygonize(extract_field(model, None, resolution, threads=threads, chunk=chunk))
    if mesh.is_empty:
        logger.warning(f"⚠️  Template has no zero crossing at resolution {resolution}")
    return mesh


def interpolate_codes(c1: LatentCode, c2: LatentCode, t: float) -> LatentCode:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation weight must be in [0, 1] (got {t})")
    if c1.dim != c2.dim:
        raise ValueError(f"cannot interpolate codes of dimension {c1.dim} and {c2.dim}")
    return LatentCode((1.0 - t) * c1.values + t * c2.values)


def canonical_position(model: ImplicitTemplateModel, p, code: LatentCode) -> np.ndarray:
    """W(p, c) for one point (3,) or a batch (N, 3)."""
    points = np.asarray(p, dtype=np.float64)
    out = model.warp(points.reshape(-1, 3), code).canonical
    return out[0] if points.ndim == 1 else out


@dataclass
class CorrespondenceQuery:
    """Source points on shape k, the two codes and a pool sampled on the target surface."""

    source: np.ndarray
    source_code: LatentCode
    target_code: LatentCode
    pool: np.ndarray

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.float64).reshape(-1, 3)
        self.pool = np.asarray(self.pool, dtype=np.float64).reshape(-1, 3)
        if len(self.pool) == 0:
            raise ValueError("correspondence pool is empty")


def correspond(
    model: ImplicitTemplateModel, query: CorrespondenceQuery, chunk: int = 4096
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Nearest pool point in canonical space for every source point.
    Returns (target points, pool indices, canonical distances); ties go to the lowest index.
    """
    src = model.warp(query.source, query.source_code).canonical
    pool = np.empty_like(query.pool)
    for start in range(0, len(query.pool), chunk):
        pool[start : start + chunk] = model.warp(query.pool[start : start + chunk], query.target_code).canonical
    d2 = cdist(src, pool, "sqeuclidean")
    idx = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(len(src)), idx])
    return query.pool[idx], idx, dist
