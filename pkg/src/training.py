"""
Auto-decoder training: network parameters and per-shape latent codes are
optimised jointly, with every supervised warp step active from the first
iteration.

All randomness of iteration `it` comes from default_rng([seed, it]), so a run
resumed from a checkpoint replays the same batches as an uninterrupted one.
"""

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.config import ModelConfig, TrainConfig, config
from src.errors import CheckpointError, ConfigError, NonFiniteLossError
from src.geometry import SampleSet, ShapeSpec, sample_sdf
from src.losses import CorrespondenceSet, LossBreakdown, SampleBatch, total_loss
from src.model import ImplicitTemplateModel, LatentCode
from src.nn import Adam, ParamBlock
from src.utils import load_correspondences_csv, load_sample_sets, save_results

logging.basicConfig(level=config.LOG_LEVEL)
logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ditc"
LOSS_CSV = "losses.csv"


@dataclass
class LatentTable:
    """One code per training shape; row k belongs to shape ids[k]."""

    ids: np.ndarray
    block: ParamBlock

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if self.block.value.ndim != 2 or len(self.ids) != self.block.shape[0]:
            raise ValueError(f"latent table shape {self.block.shape} does not match {len(self.ids)} ids")
        if len(set(self.ids.tolist())) != len(self.ids):
            raise ValueError("latent table ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.block.shape[1]

    @property
    def values(self) -> np.ndarray:
        return self.block.value

    def row_of(self, shape_id: int) -> int:
        hits = np.flatnonzero(self.ids == shape_id)
        if len(hits) == 0:
            raise KeyError(f"no latent code for shape {shape_id}")
        return int(hits[0])

    def code(self, shape_id: int) -> LatentCode:
        return LatentCode(self.block.value[self.row_of(shape_id)].copy(), shape_id)


def init_latents(k: int, dim: int, std: float, seed: int, ids: Optional[Sequence[int]] = None) -> LatentTable:
    """K codes of i.i.d. N(0, std^2) entries."""
    if k <= 0 or dim <= 0:
        raise ValueError(f"latent table needs K > 0 and dim > 0 (got {k}, {dim})")
    if std < 0:
        raise ValueError(f"latent init std must be >= 0 (got {std})")
    values = np.random.default_rng(seed).normal(0.0, 1.0, size=(k, dim)) * std
    ids = np.arange(k) if ids is None else ids
    return LatentTable(ids, ParamBlock("latent.codes", values))


@dataclass
class Optimizers:
    net: Adam
    codes: Adam


def make_optimizers(model: ImplicitTemplateModel, latents: LatentTable, cfg: TrainConfig) -> Optimizers:
    return Optimizers(
        net=Adam(model.params(), lr=cfg.lr_net),
        codes=Adam([latents.block], lr=cfg.lr_code, sparse_rows=True),
    )


def train_step(
    batch: SampleBatch,
    model: ImplicitTemplateModel,
    latents: LatentTable,
    optimizers: Optimizers,
    cfg: TrainConfig,
) -> LossBreakdown:
    """Forward, backward, one Adam step on the network and one on the batch's codes."""
    model.zero_grad()
    latents.block.zero_grad()
    total, breakdown = total_loss(model, latents.block, batch, cfg.weights, cfg.schedule, backward=True)
    if not math.isfinite(total):
        raise FloatingPointError(breakdown)
    optimizers.net.step()
    optimizers.codes.step(rows=batch.code_rows)
    return breakdown


class Trainer:
    """Owns the model, latent table and optimizers for one training run."""

    def __init__(
        self,
        cfg: TrainConfig,
        sample_sets: Sequence[SampleSet],
        out_dir: Optional[str] = None,
    ):
        if not sample_sets:
            raise ValueError("training needs at least one shape")
        self.cfg = cfg
        self.sample_sets = list(sample_sets)
        self.out_dir = Path(out_dir) if out_dir else None
        self.model = ImplicitTemplateModel(cfg.model, seed=cfg.seed)
        self.latents = init_latents(
            len(self.sample_sets), cfg.model.latent_dim, cfg.latent_init_std, cfg.seed + 1,
            ids=[s.shape_id for s in self.sample_sets],
        )
        self.optimizers = make_optimizers(self.model, self.latents, cfg)
        self.iteration = 0
        self.history: List[Dict[str, float]] = []
        self.template_set = self._template_samples()
        self.correspondences = self._correspondences()

    # --- optional supervision ----------------------------------------------------------

    def _template_samples(self) -> Optional[SampleSet]:
        if self.cfg.template_spec is None:
            return None
        spec = ShapeSpec.from_dict(self.cfg.template_spec)
        n_uniform = max(1, self.cfg.template_samples // 5)
        logger.info(f"🧩 Template supervision from a {spec.kind.value} ({self.cfg.template_samples} samples)")
        return sample_sdf(spec, self.cfg.template_samples - n_uniform, n_uniform, rng_seed=self.cfg.seed)

    def _correspondences(self) -> Optional[CorrespondenceSet]:
        if not self.cfg.correspondence_file:
            return None
        raw = load_correspondences_csv(self.cfg.correspondence_file)
        try:
            rows_k = np.array([self.latents.row_of(s) for s in raw["shape_k"]], dtype=np.int64)
            rows_l = np.array([self.latents.row_of(s) for s in raw["shape_l"]], dtype=np.int64)
        except KeyError as e:
            raise ConfigError(f"{self.cfg.correspondence_file}: {e.args[0]}") from e
        logger.info(f"🔗 Correspondence supervision with {len(rows_k)} annotated pairs")
        return CorrespondenceSet(raw["p"], rows_k, raw["q"], rows_l)

    # --- batches -----------------------------------------------------------------------

    def sample_batch(self, iteration: int) -> SampleBatch:
        rng = np.random.default_rng([self.cfg.seed, iteration])
        k = len(self.sample_sets)
        n = self.cfg.points_per_shape
        chosen = np.sort(rng.choice(k, size=min(self.cfg.shapes_per_batch, k), replace=False))

        points, sdf, rows, pairs = [], [], [], []
        for block, row in enumerate(chosen):
            s = self.sample_sets[row]
            idx = rng.choice(len(s), size=n, replace=len(s) < n)
            points.append(s.points[idx])
            sdf.append(s.sdf[idx])
            rows.append(np.full(n, row, dtype=np.int64))
            # cyclic derangement of a random order: every point gets one partner
            order = rng.permutation(n) + block * n
            pairs.append(np.stack([order, np.roll(order, -1)], axis=1))

        batch = SampleBatch(
            points=np.concatenate(points),
            sdf=np.concatenate(sdf),
            rows=np.concatenate(rows),
            pairs=np.concatenate(pairs) if n > 1 else np.zeros((0, 2), dtype=np.int64),
            correspondences=self.correspondences,
        )
        if self.template_set is not None:
            idx = rng.choice(len(self.template_set), size=n, replace=len(self.template_set) < n)
            batch.template_points = self.template_set.points[idx]
            batch.template_sdf = self.template_set.sdf[idx]
        return batch

    # --- loop --------------------------------------------------------------------------

    def step(self) -> LossBreakdown:
        batch = self.sample_batch(self.iteration)
        try:
            breakdown = train_step(batch, self.model, self.latents, self.optimizers, self.cfg)
        except FloatingPointError as e:
            self.write_losses()
            raise NonFiniteLossError(self.iteration, self._dump_diagnostics(e.args[0])) from e
        self.history.append(breakdown.as_row(self.iteration))
        self.iteration += 1
        return breakdown

    def _dump_diagnostics(self, breakdown: LossBreakdown) -> str:
        if self.out_dir is None:
            return ""
        path = self.out_dir / f"nonfinite_{self.iteration:06d}.json"
        save_results(
            {
                "iteration": self.iteration,
                "terms": {k: repr(v) for k, v in breakdown.terms().items()},
                "param_finite": {p.name: bool(np.all(np.isfinite(p.value))) for p in self.model.params()},
                "codes_finite": bool(np.all(np.isfinite(self.latents.values))),
            },
            str(path),
        )
        logger.error(f"❌ Non-finite loss at iteration {self.iteration}; diagnostics in {path}")
        return str(path)

    def run(self) -> Checkpoint:
        """Train until cfg.iterations; writes periodic checkpoints and the loss CSV."""
        start = time.time()
        logger.info(
            f"🚀 Training {len(self.sample_sets)} shapes from iteration {self.iteration} to {self.cfg.iterations}"
        )
        while self.iteration < self.cfg.iterations:
            breakdown = self.step()
            it = self.iteration
            if it % self.cfg.log_every == 0 or it == self.cfg.iterations:
                terms = " ".join(f"{k}={v:.5f}" for k, v in breakdown.terms().items())
                logger.info(f"iter {it:5d} total={breakdown.total:.5f} {terms}")
            if self.out_dir is not None and it % self.cfg.checkpoint_every == 0 and it < self.cfg.iterations:
                save_checkpoint(str(self.out_dir / f"checkpoint_{it:06d}.ditc"), self.checkpoint())
            if it % self.cfg.log_every == 0 or it % self.cfg.checkpoint_every == 0:
                self.write_losses()
        ckpt = self.checkpoint()
        if self.out_dir is not None:
            save_checkpoint(str(self.out_dir / CHECKPOINT_NAME), ckpt)
            self.write_losses()
        logger.info(f"✅ Training finished in {time.time() - start:.1f}s")
        return ckpt

    def write_losses(self):
        """Rewrite the loss CSV with every row recorded so far; resumed runs keep earlier rows."""
        if self.out_dir is None or not self.history:
            return
        path = self.out_dir / LOSS_CSV
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(self.history).to_csv(path, index=False)

    # --- persistence -------------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        records = dict(self.model.state_dict())
        records.update(self.optimizers.net.state_arrays("adam.net"))
        records.update(self.optimizers.codes.state_arrays("adam.codes"))
        header = {
            "format": "dit-checkpoint",
            "iteration": self.iteration,
            "model": self.cfg.model.to_dict(),
            "train": self.cfg.to_dict(),
            "optimizer_steps": {"net": self.optimizers.net.t, "codes": self.optimizers.codes.t},
        }
        return Checkpoint(header, records, self.latents.ids.copy(), self.latents.values.copy())

    def restore(self, ckpt: Checkpoint):
        """Load model, latent table, optimizer moments, iteration and loss history."""
        if ckpt.header.get("model") != self.cfg.model.to_dict():
            raise CheckpointError("checkpoint model hyperparameters differ from the training config")
        if not np.array_equal(ckpt.latent_ids, self.latents.ids):
            raise CheckpointError("checkpoint latent table does not match the dataset shape ids")
        try:
            self.model.load_state_dict(ckpt.records)
            steps = ckpt.header["optimizer_steps"]
            self.optimizers.net.load_state_arrays("adam.net", ckpt.records, steps["net"])
            self.optimizers.codes.load_state_arrays("adam.codes", ckpt.records, steps["codes"])
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"incompatible checkpoint: {e}") from e
        self.latents.block.value[...] = ckpt.latent_codes
        self.iteration = int(ckpt.header["iteration"])
        if self.out_dir is not None and (self.out_dir / LOSS_CSV).exists():
            frame = pd.read_csv(self.out_dir / LOSS_CSV)
            self.history = [r for r in frame.to_dict("records") if r["iteration"] < self.iteration]


def train(
    cfg: TrainConfig,
    dataset: Union[str, Sequence[SampleSet]],
    out_dir: Optional[str] = None,
    resume: Optional[str] = None,
) -> Checkpoint:
    """Train on a sample file (or in-memory sets); optionally continue from a checkpoint."""
    sets = load_sample_sets(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    trainer = Trainer(cfg, sets, out_dir)
    if resume:
        trainer.restore(load_checkpoint(resume))
        logger.info(f"♻️  Resumed from {resume} at iteration {trainer.iteration}")
    return trainer.run()


def load_trained_model(path: str) -> Tuple[ImplicitTemplateModel, LatentTable, Checkpoint]:
    """Rebuild a model and its latent table from the hyperparameters stored in a checkpoint."""
    ckpt = load_checkpoint(path)
    try:
        model_cfg = ModelConfig.from_dict(ckpt.header["model"])
    except (KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"{path}: checkpoint header lacks valid model hyperparameters ({e})") from e
    model = ImplicitTemplateModel(model_cfg)
    try:
        model.load_state_dict(ckpt.records)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: parameters do not match the stored hyperparameters ({e})") from e
    if ckpt.latent_codes.shape[1] != model_cfg.latent_dim and len(ckpt.latent_ids):
        raise CheckpointError(f"{path}: latent dimension {ckpt.latent_codes.shape[1]} != {model_cfg.latent_dim}")
    latents = LatentTable(ckpt.latent_ids, ParamBlock("latent.codes", ckpt.latent_codes))
    return model, latents, ckpt
