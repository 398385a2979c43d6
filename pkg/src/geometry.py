"""
Analytic shape families and SDF sample-set generation.

Shapes are described by `ShapeSpec` (primitive kind, size parameters and a
rigid placement). `analytic_sdf` is the ground-truth oracle that replaces mesh
preprocessing: exact signed distance for every primitive, min over members
for unions. `sample_sdf` follows the DeepSDF recipe: two Gaussian
perturbation scales around surface points plus uniform samples in the unit
ball, truncated to [-delta, delta].
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from src.config import config
from src.errors import InvalidSpecError
from src.grid import GridField, polygonize
from src.mesh import Mesh, normalize_mesh, sample_mesh_surface

__all__ = [
    "ShapeKind",
    "ShapeSpec",
    "SdfSample",
    "SampleSet",
    "Mesh",
    "analytic_sdf",
    "bounding_radius",
    "clamp_tsdf",
    "normalize_mesh",
    "sample_mesh_surface",
    "sample_sdf",
    "surface_points",
    "box_corner_keypoints",
    "sphere_direction_keypoints",
]


class ShapeKind(str, Enum):
    SPHERE = "sphere"
    BOX = "box"
    ELLIPSOID = "ellipsoid"
    CAPSULE = "capsule"
    UNION = "union"


# Number of size parameters per primitive kind.
_PARAM_COUNT = {
    ShapeKind.SPHERE: 1,  # radius
    ShapeKind.BOX: 3,  # half-extents
    ShapeKind.ELLIPSOID: 3,  # semi-axes
    ShapeKind.CAPSULE: 2,  # radius, half-length of the z segment
    ShapeKind.UNION: 0,
}


@dataclass(frozen=True)
class ShapeSpec:
    kind: ShapeKind
    params: Tuple[float, ...] = ()
    rotation: Tuple[float, float, float] = (0.0, 0.0, 0.0)  # xyz Euler angles, degrees
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    members: Tuple["ShapeSpec", ...] = ()
    shape_id: int = 0

    def __post_init__(self):
        if not isinstance(self.kind, ShapeKind):
            try:
                object.__setattr__(self, "kind", ShapeKind(self.kind))
            except ValueError as e:
                raise InvalidSpecError(f"unknown shape kind {self.kind!r}") from e
        object.__setattr__(self, "params", tuple(float(v) for v in self.params))
        object.__setattr__(self, "rotation", tuple(float(v) for v in self.rotation))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        object.__setattr__(self, "members", tuple(self.members))

        expected = _PARAM_COUNT[self.kind]
        if len(self.params) != expected:
            raise InvalidSpecError(f"{self.kind.value} takes {expected} parameters, got {len(self.params)}")
        if any(not np.isfinite(v) or v <= 0 for v in self.params):
            raise InvalidSpecError(f"{self.kind.value}: size parameters must be finite and > 0, got {self.params}")
        if len(self.rotation) != 3 or len(self.translation) != 3:
            raise InvalidSpecError("rotation and translation must have three components")
        if self.kind is ShapeKind.UNION and not self.members:
            raise InvalidSpecError("union needs at least one member")
        if self.kind is not ShapeKind.UNION and self.members:
            raise InvalidSpecError(f"{self.kind.value} cannot have members")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ShapeSpec":
        try:
            return cls(
                kind=data["kind"],
                params=tuple(data.get("params", ())),
                rotation=tuple(data.get("rotation", (0.0, 0.0, 0.0))),
                translation=tuple(data.get("translation", (0.0, 0.0, 0.0))),
                members=tuple(cls.from_dict(m) for m in data.get("members", ())),
                shape_id=int(data.get("id", 0)),
            )
        except KeyError as e:
            raise InvalidSpecError(f"shape spec missing field {e}") from e
        except TypeError as e:
            raise InvalidSpecError(f"malformed shape spec: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "id": self.shape_id,
            "kind": self.kind.value,
            "params": list(self.params),
            "rotation": list(self.rotation),
            "translation": list(self.translation),
        }
        if self.members:
            out["members"] = [m.to_dict() for m in self.members]
        return out


@dataclass(frozen=True)
class SdfSample:
    point: Tuple[float, float, float]
    sdf: float


@dataclass
class SampleSet:
    """SDF samples of one shape; near-surface samples first, then uniform ones."""

    shape_id: int
    points: np.ndarray
    sdf: np.ndarray
    n_surface: int
    n_uniform: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.sdf = np.asarray(self.sdf, dtype=np.float64).reshape(-1)
        if len(self.points) != len(self.sdf):
            raise ValueError(f"shape {self.shape_id}: {len(self.points)} points but {len(self.sdf)} sdf values")
        if self.n_surface + self.n_uniform != len(self.sdf):
            raise ValueError(
                f"shape {self.shape_id}: counts {self.n_surface}+{self.n_uniform} != {len(self.sdf)} samples"
            )

    def __len__(self) -> int:
        return len(self.sdf)

    @property
    def samples(self) -> List[SdfSample]:
        return [SdfSample(tuple(p), float(s)) for p, s in zip(self.points, self.sdf)]


# --- analytic signed distances ---------------------------------------------------------


def _sphere(q: np.ndarray, params: Sequence[float]) -> np.ndarray:
    return np.linalg.norm(q, axis=1) - params[0]


def _box(q: np.ndarray, params: Sequence[float]) -> np.ndarray:
    d = np.abs(q) - np.asarray(params)
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
    inside = np.minimum(d.max(axis=1), 0.0)
    return outside + inside


def _capsule(q: np.ndarray, params: Sequence[float]) -> np.ndarray:
    radius, half_length = params
    axis_point = np.zeros_like(q)
    axis_point[:, 2] = np.clip(q[:, 2], -half_length, half_length)
    return np.linalg.norm(q - axis_point, axis=1) - radius


def _ellipsoid(q: np.ndarray, params: Sequence[float], iterations: int = 100) -> np.ndarray:
    """
    Exact distance to an axis-aligned ellipsoid.

    The closest point is x_i = e_i^2 y_i / (t + e_i^2) where t is the root of
    F(t) = sum (e_i y_i / (t + e_i^2))^2 - 1 on (-e_min^2, inf); F is monotone
    there, so bisection converges. Points on the minor-axis plane whose root
    falls outside that interval take the closed-form degenerate branch.
    """
    e = np.asarray(params, dtype=np.float64)
    if np.all(e == e[0]):
        return _sphere(q, params[:1])
    e2 = e**2
    y = np.abs(q)
    n = len(y)
    inside = ((y / e) ** 2).sum(axis=1) < 1.0

    def F(t):
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(y == 0.0, 0.0, (e * y / (t[:, None] + e2)) ** 2)
        return terms.sum(axis=1) - 1.0

    lo = np.full(n, -e2.min())
    hi = np.maximum(e.max() * np.linalg.norm(y, axis=1), 0.0)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        positive = F(mid) > 0.0
        lo = np.where(positive, mid, lo)
        hi = np.where(positive, hi, mid)
    t = 0.5 * (lo + hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(y == 0.0, 0.0, e2 * y / (t[:, None] + e2))
    dist = np.linalg.norm(x - y, axis=1)

    # Degenerate branch: zero component along the minor axis, root pinned at -e_min^2.
    k = int(np.argmin(e))
    major = e > e[k]
    if major.any():
        cand = np.zeros_like(y)
        cand[:, major] = e2[major] * y[:, major] / (e2[major] - e2[k])
        radicand = 1.0 - ((cand[:, major] / e[major]) ** 2).sum(axis=1)
        minor_zero = np.all(y[:, ~major] == 0.0, axis=1)
        degenerate = inside & minor_zero & (radicand > 0.0)
        if degenerate.any():
            cand[:, k] = e[k] * np.sqrt(np.maximum(radicand, 0.0))
            dist = np.where(degenerate, np.linalg.norm(cand - y, axis=1), dist)
    return np.where(inside, -dist, dist)


_PRIMITIVES = {
    ShapeKind.SPHERE: _sphere,
    ShapeKind.BOX: _box,
    ShapeKind.ELLIPSOID: _ellipsoid,
    ShapeKind.CAPSULE: _capsule,
}


def _to_local(spec: ShapeSpec, points: np.ndarray) -> np.ndarray:
    """World -> shape frame; the shape frame maps to world by p = R q + t."""
    R = Rotation.from_euler("xyz", spec.rotation, degrees=True).as_matrix()
    return (points - np.asarray(spec.translation)) @ R


def _sdf(spec: ShapeSpec, points: np.ndarray) -> np.ndarray:
    q = _to_local(spec, points)
    if spec.kind is ShapeKind.UNION:
        return np.min([_sdf(member, q) for member in spec.members], axis=0)
    return _PRIMITIVES[spec.kind](q, spec.params)


def analytic_sdf(spec: ShapeSpec, p: Union[Sequence[float], np.ndarray]) -> Union[float, np.ndarray]:
    """Signed distance (negative inside) at one point (3,) or a batch (N, 3)."""
    if not isinstance(spec, ShapeSpec):
        raise InvalidSpecError(f"expected a ShapeSpec, got {type(spec).__name__}")
    points = np.asarray(p, dtype=np.float64)
    single = points.ndim == 1
    values = _sdf(spec, points.reshape(-1, 3))
    return float(values[0]) if single else values


def bounding_radius(spec: ShapeSpec) -> float:
    """Radius of a sphere about the origin that encloses the shape."""
    shift = float(np.linalg.norm(spec.translation))
    if spec.kind is ShapeKind.UNION:
        return shift + max(bounding_radius(m) for m in spec.members)
    p = spec.params
    local = {
        ShapeKind.SPHERE: lambda: p[0],
        ShapeKind.BOX: lambda: float(np.linalg.norm(p)),
        ShapeKind.ELLIPSOID: lambda: max(p),
        ShapeKind.CAPSULE: lambda: p[0] + p[1],
    }[spec.kind]()
    return shift + local


def clamp_tsdf(s, delta: float):
    """min(delta, max(-delta, s)); scalars stay scalars."""
    if delta <= 0:
        raise ValueError(f"truncation bound must be > 0 (got {delta})")
    clipped = np.clip(s, -delta, delta)
    return float(clipped) if np.ndim(clipped) == 0 else clipped


# --- sampling ---------------------------------------------------------------------------


def surface_points(spec: ShapeSpec, count: int, seed: int, resolution: int = 64, newton_steps: int = 6) -> np.ndarray:
    """
    Uniform-ish samples on the exact zero level set.

    Seeds come from area-weighted sampling of the marching-cubes mesh of the
    analytic field, then Newton steps p <- p - s(p) grad s / |grad s|^2 pull
    them onto the surface.
    """
    field_ = GridField.from_function(lambda pts: _sdf(spec, pts), resolution)
    seed_mesh = polygonize(field_)
    if seed_mesh.is_empty:
        raise InvalidSpecError(f"shape {spec.shape_id} has no surface inside the unit cube")
    points = sample_mesh_surface(seed_mesh, count, seed)
    h = 1e-6
    offsets = np.eye(3) * h
    for _ in range(newton_steps):
        s = _sdf(spec, points)
        grad = np.stack(
            [(_sdf(spec, points + offsets[k]) - _sdf(spec, points - offsets[k])) / (2 * h) for k in range(3)],
            axis=1,
        )
        norm2 = np.maximum((grad**2).sum(axis=1), 1e-12)
        points = points - (s / norm2)[:, None] * grad
    return points


def _uniform_ball(rng: np.random.Generator, n: int) -> np.ndarray:
    directions = rng.normal(size=(n, 3))
    directions /= np.maximum(np.linalg.norm(directions, axis=1, keepdims=True), 1e-12)
    radii = rng.random(n) ** (1.0 / 3.0)
    return directions * radii[:, None]


def sample_sdf(
    spec: ShapeSpec,
    n_surface: int = 8000,
    n_uniform: int = 2000,
    noise_sigma: float = 0.005,
    delta: float = config.TSDF_DELTA,
    rng_seed: int = 0,
) -> SampleSet:
    """
    Near-surface samples at two perturbation scales (noise_sigma and
    noise_sigma / 10, half the budget each) plus uniform samples in the unit
    ball, with truncated ground-truth SDF. Deterministic for a fixed seed.
    """
    if n_surface <= 0 or n_uniform <= 0:
        raise ValueError(f"sample counts must be > 0 (got {n_surface}, {n_uniform})")
    if delta <= 0:
        raise ValueError(f"truncation bound must be > 0 (got {delta})")
    rng = np.random.default_rng(rng_seed)
    surface = surface_points(spec, n_surface, seed=rng_seed)
    coarse = n_surface // 2
    sigmas = np.where(np.arange(n_surface) < coarse, noise_sigma, noise_sigma / 10.0)
    near = surface + rng.normal(size=(n_surface, 3)) * sigmas[:, None]
    uniform = _uniform_ball(rng, n_uniform)
    points = np.concatenate([near, uniform], axis=0)
    sdf = clamp_tsdf(_sdf(spec, points), delta)
    return SampleSet(spec.shape_id, points, sdf, n_surface, n_uniform)


def box_corner_keypoints(spec: ShapeSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Labelled corners (labels 0..7, sign pattern order) of a placed box."""
    if spec.kind is not ShapeKind.BOX:
        raise InvalidSpecError(f"corner keypoints need a box, got {spec.kind.value}")
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    local = signs * np.asarray(spec.params)
    R = Rotation.from_euler("xyz", spec.rotation, degrees=True).as_matrix()
    return np.arange(8), local @ R.T + np.asarray(spec.translation)


_AXIS_DIRECTIONS = np.concatenate([np.eye(3), -np.eye(3)])


def sphere_direction_keypoints(spec: ShapeSpec, directions: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Points where fixed unit directions (default: the six axes) pierce a sphere."""
    if spec.kind is not ShapeKind.SPHERE:
        raise InvalidSpecError(f"direction keypoints need a sphere, got {spec.kind.value}")
    dirs = _AXIS_DIRECTIONS if directions is None else np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.arange(len(dirs)), np.asarray(spec.translation) + spec.params[0] * dirs
