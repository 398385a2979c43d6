"""
Reconstruction and correspondence metrics.

Chamfer uses squared distances, summed over both directed means; callers
scale by 1e3 for reports. EMD is an exact assignment on seeded subsamples.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from sklearn.neighbors import KDTree

from src.config import config
from src.geometry import ShapeKind, ShapeSpec, box_corner_keypoints, sphere_direction_keypoints
from src.inference import CorrespondenceQuery, correspond, extract_mesh
from src.model import ImplicitTemplateModel, LatentCode

CHAMFER_REPORT_SCALE = 1e3
PCK_THRESHOLDS = (0.01, 0.02)


@dataclass
class PointCloud:
    points: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)


def _cloud(x) -> np.ndarray:
    points = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("metric needs a non-empty point cloud")
    return points


def _directed(a: np.ndarray, b: np.ndarray) -> float:
    _, idx = KDTree(b).query(a, k=1)
    # distances recomputed from the matched points, not taken from the tree
    return float(((a - b[idx[:, 0]]) ** 2).sum(axis=1).mean())


def chamfer(a, b) -> float:
    """mean_a min_b |a - b|^2 + mean_b min_a |a - b|^2."""
    pa, pb = _cloud(a), _cloud(b)
    return _directed(pa, pb) + _directed(pb, pa)


def emd_approx(a, b, subsample: int = 500, seed: int = 0) -> float:
    """Mean matched Euclidean distance of the optimal bijection between seeded subsamples."""
    pa, pb = _cloud(a), _cloud(b)
    if subsample < 1:
        raise ValueError(f"subsample must be >= 1 (got {subsample})")
    if len(pa) < subsample or len(pb) < subsample:
        raise ValueError(f"EMD needs at least {subsample} points per cloud (got {len(pa)}, {len(pb)})")
    sa = pa[np.random.default_rng(seed).choice(len(pa), size=subsample, replace=False)]
    sb = pb[np.random.default_rng(seed).choice(len(pb), size=subsample, replace=False)]
    cost = cdist(sa, sb)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


@dataclass
class KeypointSet:
    labels: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.labels) != len(self.points):
            raise ValueError(f"{len(self.labels)} labels for {len(self.points)} keypoints")
        if len(np.unique(self.labels)) != len(self.labels):
            raise ValueError("keypoint labels must be unique")

    def __len__(self) -> int:
        return len(self.labels)

    def by_label(self) -> Dict[int, np.ndarray]:
        return {int(label): p for label, p in zip(self.labels, self.points)}


def keypoint_transfer(
    model: ImplicitTemplateModel,
    keypoints: KeypointSet,
    source_code: LatentCode,
    target_code: LatentCode,
    pool: np.ndarray,
) -> KeypointSet:
    """Move each labelled point to its canonical-space nearest neighbour in the target pool."""
    targets, _, _ = correspond(model, CorrespondenceQuery(keypoints.points, source_code, target_code, pool))
    return KeypointSet(keypoints.labels.copy(), targets)


def pck(predicted: KeypointSet, truth: KeypointSet, threshold: float) -> float:
    """Fraction of labels whose predicted point lies within `threshold` of the truth."""
    pred, gt = predicted.by_label(), truth.by_label()
    if set(pred) != set(gt):
        raise ValueError(f"label sets differ: {sorted(set(pred) ^ set(gt))}")
    if not gt:
        raise ValueError("pck needs at least one keypoint")
    hits = [np.linalg.norm(pred[k] - gt[k]) <= threshold for k in gt]
    return float(np.mean(hits))


def correspondence_error(predicted, truth) -> float:
    """Mean Euclidean distance between predicted and true corresponding points."""
    pred = np.asarray(predicted, dtype=np.float64).reshape(-1, 3)
    true = np.asarray(truth, dtype=np.float64).reshape(-1, 3)
    if len(pred) != len(true) or len(pred) == 0:
        raise ValueError(f"need matching non-empty point lists (got {len(pred)}, {len(true)})")
    return float(np.linalg.norm(pred - true, axis=1).mean())


def angular_deviation(source, predicted, source_center=(0, 0, 0), target_center=(0, 0, 0)) -> np.ndarray:
    """Angle in degrees between source and predicted directions about their shape centres."""
    u = np.asarray(source, dtype=np.float64).reshape(-1, 3) - np.asarray(source_center, dtype=np.float64)
    v = np.asarray(predicted, dtype=np.float64).reshape(-1, 3) - np.asarray(target_center, dtype=np.float64)
    cos = (u * v).sum(axis=1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def summarize(values: Iterable[float]) -> Dict[str, float]:
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        return {"mean": float("nan"), "median": float("nan"), "count": 0}
    return {"mean": float(arr.mean()), "median": float(np.median(arr)), "count": int(arr.size)}



def summarize_table(rows: Sequence[Dict[str, float]], keys: Sequence[str]) -> Dict[str, Dict[str, float]]:
    return {k: summarize(r[k] for r in rows if k in r) for k in keys}


# --- keypoint benchmark -----------------------------------------------------------------


def reference_keypoints(spec: ShapeSpec) -> Optional[KeypointSet]:
    """Analytic labelled keypoints: box corners or sphere axis directions. None for other kinds."""
    if spec.kind is ShapeKind.BOX:
        return KeypointSet(*box_corner_keypoints(spec))
    if spec.kind is ShapeKind.SPHERE:
        return KeypointSet(*sphere_direction_keypoints(spec))
    return None


def pck_key(threshold: float) -> str:
    return f"pck@{threshold:g}"


def keypoint_benchmark(
    model: ImplicitTemplateModel,
    codes: Dict[int, LatentCode],
    specs: Sequence[ShapeSpec],
    thresholds: Sequence[float] = PCK_THRESHOLDS,
    pool_resolution: int = 128,
    threads: int = config.THREADS,
) -> List[Dict[str, float]]:
    """
    Transfer reference keypoints between every ordered pair of distinct shapes of
    the same kind and score them against the target's analytic keypoints.

    One row per pair: PCK at each threshold and the mean correspondence error.
    Pairs whose target has no surface are reported with `empty=True`.
    """
    usable = [(s, reference_keypoints(s)) for s in specs if s.shape_id in codes]
    usable = [(s, kp) for s, kp in usable if kp is not None]
    pools: Dict[int, np.ndarray] = {}
    rows = []
    for src, src_kp in usable:
        for tgt, tgt_kp in usable:
            if src.shape_id == tgt.shape_id or src.kind is not tgt.kind:
                continue
            row = {"source": src.shape_id, "target": tgt.shape_id, "kind": src.kind.value}
            if tgt.shape_id not in pools:
                pools[tgt.shape_id] = extract_mesh(model, codes[tgt.shape_id], pool_resolution, threads=threads).vertices
            pool = pools[tgt.shape_id]
            row["empty"] = len(pool) == 0
            if len(pool):
                moved = keypoint_transfer(model, src_kp, codes[src.shape_id], codes[tgt.shape_id], pool)
                for t in thresholds:
                    row[pck_key(t)] = pck(moved, tgt_kp, t)
                row["corr_error"] = correspondence_error(moved.points, tgt_kp.points)
            rows.append(row)
    return rows
