"""
Regular sampling lattice over an axis-aligned cube and its iso-surface.

Both analytic fields (ground-truth surface seeding) and network fields
(mesh extraction) are polygonized through `polygonize`.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np
import trimesh
from skimage import measure

from src.mesh import Mesh


@dataclass
class GridField:
    resolution: int
    values: np.ndarray
    bounds: Tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError(f"grid resolution must be >= 2 (got {self.resolution})")
        r = self.resolution
        if self.values.shape != (r, r, r):
            raise ValueError(f"grid values shape {self.values.shape} != ({r}, {r}, {r})")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @property
    def spacing(self) -> float:
        lo, hi = self.bounds
        return (hi - lo) / (self.resolution - 1)

    @staticmethod
    def lattice(resolution: int, bounds: Tuple[float, float] = (-1.0, 1.0)) -> np.ndarray:
        """(R^3, 3) corner positions, x-major so reshape(R, R, R) indexes [ix, iy, iz]."""
        axis = np.linspace(bounds[0], bounds[1], resolution)
        xs, ys, zs = np.meshgrid(axis, axis, axis, indexing="ij")
        return np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)

    @classmethod
    def from_function(
        cls,
        fn: Callable[[np.ndarray], np.ndarray],
        resolution: int,
        bounds: Tuple[float, float] = (-1.0, 1.0),
        chunk: int = 32**3,
        threads: int = 1,
    ) -> "GridField":
        """Evaluate `fn` over the lattice in chunks; chunk results are placed by index."""
        if resolution < 2:
            raise ValueError(f"grid resolution must be >= 2 (got {resolution})")
        points = cls.lattice(resolution, bounds)
        starts = list(range(0, len(points), chunk))
        values = np.empty(len(points))

        def run(start: int):
            values[start : start + chunk] = fn(points[start : start + chunk])

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(run, starts))
        else:
            for start in starts:
                run(start)
        return cls(resolution, values.reshape(resolution, resolution, resolution), bounds)


def polygonize(field: GridField, level: float = 0.0, method: str = "lorensen") -> Mesh:
    """
    Marching cubes at `level` with linear edge interpolation.

    Returns an indexed mesh with merged vertices and no degenerate triangles,
    or an empty mesh when the field never crosses `level`.
    """
    vmin, vmax = float(field.values.min()), float(field.values.max())
    if not vmin < level < vmax:
        return Mesh.empty()
    h = field.spacing
    try:
        verts, faces, _, _ = measure.marching_cubes(field.values, level=level, spacing=(h, h, h), method=method)
    except (ValueError, RuntimeError):
        return Mesh.empty()
    verts = verts.astype(np.float64) + field.bounds[0]

    cleaned = trimesh.Trimesh(vertices=verts, faces=faces, process=False)
    cleaned.merge_vertices()
    cleaned.update_faces(cleaned.nondegenerate_faces())
    cleaned.remove_unreferenced_vertices()
    if len(cleaned.faces) == 0:
        return Mesh.empty()
    return Mesh(np.asarray(cleaned.vertices, dtype=np.float64), np.asarray(cleaned.faces, dtype=np.int64))
