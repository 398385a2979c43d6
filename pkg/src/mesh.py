import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
import trimesh

from src.config import config
from src.errors import DataFileError

logger = logging.getLogger(__name__)


@dataclass
class Mesh:
    """Indexed triangle mesh: (V, 3) float vertices, (T, 3) int triangles."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError(f"triangle indices out of range for {len(self.vertices)} vertices")

    @classmethod
    def empty(cls) -> "Mesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(vertices=self.vertices, faces=self.triangles, process=False)

    def is_watertight(self) -> bool:
        """Every edge shared by exactly two triangles."""
        if self.is_empty:
            return False
        return bool(self.to_trimesh().is_watertight)


def normalize_mesh(mesh: Mesh, margin: float = config.NORMALIZATION_MARGIN) -> Tuple[Mesh, float, np.ndarray]:
    """
    Center on the bounding-box midpoint and scale so the farthest vertex sits
    at radius 1/margin. Returns (mesh, scale, offset) with v' = (v + offset) * scale.
    """
    if len(mesh.vertices) == 0:
        raise ValueError("cannot normalize an empty mesh")
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    offset = -(lo + hi) / 2.0
    radius = float(np.linalg.norm(mesh.vertices + offset, axis=1).max())
    if radius <= 0.0:
        raise ValueError("cannot normalize a mesh with zero extent")
    scale = 1.0 / (margin * radius)
    return Mesh((mesh.vertices + offset) * scale, mesh.triangles.copy()), scale, offset


def sample_mesh_surface(mesh: Mesh, count: int, seed: int) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.is_empty:
        raise ValueError("cannot sample the surface of an empty mesh")
    points, _ = trimesh.sample.sample_surface(mesh.to_trimesh(), count, seed=seed)
    return np.asarray(points, dtype=np.float64)


def load_mesh(path: str) -> Mesh:
    """Read an ASCII OBJ or PLY file, keeping vertex order."""
    suffix = Path(path).suffix.lower().lstrip(".")
    if suffix not in ("obj", "ply"):
        raise DataFileError(path, f"unsupported mesh format '.{suffix}'")
    try:
        loaded = trimesh.load(path, file_type=suffix, process=False, force="mesh")
    except FileNotFoundError as e:
        raise DataFileError(path, "mesh file not found") from e
    except Exception as e:
        raise DataFileError(path, f"malformed mesh: {e}") from e
    return Mesh(np.asarray(loaded.vertices), np.asarray(loaded.faces))


def save_mesh_obj(mesh: Mesh, path: str):
    """Write ASCII OBJ (v/f lines). Empty meshes produce an empty file."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if mesh.is_empty:
        logger.warning(f"⚠️  Writing empty mesh to {path}")
        Path(path).write_text("")
        return
    text = trimesh.exchange.obj.export_obj(
        mesh.to_trimesh(), include_normals=False, include_color=False, include_texture=False, header=None
    )
    Path(path).write_text(text)
