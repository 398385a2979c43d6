import json
import struct
from pathlib import Path
from typing import Any, Dict, List, Sequence

import numpy as np
import pandas as pd

from src.errors import DataFileError, InvalidSpecError
from src.geometry import SampleSet, ShapeSpec, bounding_radius

SAMPLES_MAGIC = b"DITS"
SAMPLES_VERSION = 1


def load_shape_specs(path: str) -> List[ShapeSpec]:
    """Load a dataset description: a JSON list of shapes, or {"shapes": [...]}."""
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise DataFileError(path, "shape spec file not found") from e
    except json.JSONDecodeError as e:
        raise DataFileError(path, f"malformed JSON: {e}") from e

    entries = data.get("shapes") if isinstance(data, dict) else data
    if not isinstance(entries, list) or not entries:
        raise InvalidSpecError(f"{path}: expected a non-empty list of shapes")
    specs = []
    for i, entry in enumerate(entries):
        entry = dict(entry)
        entry.setdefault("id", i)
        spec = ShapeSpec.from_dict(entry)
        if bounding_radius(spec) > 1.0:
            raise InvalidSpecError(f"shape {spec.shape_id} does not fit in the unit sphere")
        specs.append(spec)
    ids = [s.shape_id for s in specs]
    if len(set(ids)) != len(ids):
        raise InvalidSpecError(f"{path}: duplicate shape ids")
    return specs


def save_sample_sets(sets: Sequence[SampleSet], path: str):
    """DITS file: header, then per shape id, counts and float32 (x, y, z, sdf) records."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(SAMPLES_MAGIC)
        f.write(struct.pack("<II", SAMPLES_VERSION, len(sets)))
        for s in sets:
            f.write(struct.pack("<qII", s.shape_id, s.n_surface, s.n_uniform))
            records = np.concatenate([s.points, s.sdf[:, None]], axis=1).astype("<f4")
            f.write(records.tobytes())


def load_sample_sets(path: str) -> List[SampleSet]:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise DataFileError(path, "sample file not found") from e
    if raw[:4] != SAMPLES_MAGIC:
        raise DataFileError(path, "not a sample file (bad magic)")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != SAMPLES_VERSION:
            raise DataFileError(path, f"unsupported sample file version {version}")
        offset = 12
        sets = []
        for _ in range(count):
            shape_id, n_surface, n_uniform = struct.unpack_from("<qII", raw, offset)
            offset += 16
            n = n_surface + n_uniform
            records = np.frombuffer(raw, dtype="<f4", count=4 * n, offset=offset).reshape(n, 4)
            offset += 16 * n
            sets.append(SampleSet(shape_id, records[:, :3], records[:, 3], n_surface, n_uniform))
    except (struct.error, ValueError) as e:
        raise DataFileError(path, f"truncated sample file: {e}") from e
    if offset != len(raw):
        raise DataFileError(path, "trailing bytes after last shape")
    return sets


def save_results(results: Any, path: str):
    """Save results to JSON file."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(results, f, indent=2, sort_keys=True)


def save_table(rows: List[Dict[str, Any]], path: str):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(path, index=False)


def load_keypoints_csv(path: str) -> Dict[str, np.ndarray]:
    """Keypoint CSV with columns label, x, y, z."""
    frame = _read_csv(path, ["label", "x", "y", "z"])
    return {"labels": frame["label"].to_numpy(dtype=np.int64), "points": frame[["x", "y", "z"]].to_numpy(np.float64)}


def load_correspondences_csv(path: str) -> Dict[str, np.ndarray]:
    """Annotated pairs: shape_k, px, py, pz, shape_l, qx, qy, qz (shape ids, not rows)."""
    frame = _read_csv(path, ["shape_k", "px", "py", "pz", "shape_l", "qx", "qy", "qz"])
    return {
        "shape_k": frame["shape_k"].to_numpy(dtype=np.int64),
        "p": frame[["px", "py", "pz"]].to_numpy(np.float64),
        "shape_l": frame["shape_l"].to_numpy(dtype=np.int64),
        "q": frame[["qx", "qy", "qz"]].to_numpy(np.float64),
    }


def _read_csv(path: str, columns: List[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError as e:
        raise DataFileError(path, "csv file not found") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataFileError(path, f"malformed csv: {e}") from e
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataFileError(path, f"missing columns {missing}")
    return frame


def print_metrics(summary: Dict[str, Dict[str, float]]):
    """Print mean/median per metric."""
    print("\n📊 Metrics:")
    print("-" * 60)
    for name, stats in summary.items():
        print(f"  {name:<24} mean={stats['mean']:.4f}  median={stats['median']:.4f}")
    print("-" * 60)
