"""Desk-scale end-to-end runs; deselected by default, select with `pytest -m slow`."""

from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from src.cli import shape_seed
from src.config import RunConfig
from src.geometry import ShapeSpec, box_corner_keypoints, sample_sdf, surface_points
from src.inference import (
    CorrespondenceQuery,
    correspond,
    extract_mesh,
    extract_template_mesh,
    infer_latent,
    interpolate_codes,
)
from src.mesh import sample_mesh_surface
from src.metrics import CHAMFER_REPORT_SCALE, KeypointSet, angular_deviation, chamfer, keypoint_transfer, pck
from src.training import LOSS_CSV, load_trained_model, train
from src.utils import load_shape_specs

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _sets(specs, seed):
    return [sample_sdf(s, rng_seed=shape_seed(seed, s.shape_id)) for s in specs]


def _sphere_deviation(ckpt_path, seed=0):
    model, latents, _ = load_trained_model(ckpt_path)
    src = ShapeSpec("sphere", (0.4,), shape_id=1)
    points = surface_points(src, 200, seed=seed)
    pool = extract_mesh(model, latents.code(3), 128).vertices
    targets, _, _ = correspond(model, CorrespondenceQuery(points, latents.code(1), latents.code(3), pool))
    return float(np.median(angular_deviation(points, targets)))


@pytest.fixture(scope="module")
def run():
    return RunConfig.from_json(str(CONFIGS / "default.json"))


@pytest.fixture(scope="module")
def toy_run(run, tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    specs = load_shape_specs(str(CONFIGS / "toy_shapes.json"))
    train(run.train, _sets(specs, run.seed), out_dir=str(out))
    return out, specs


@pytest.fixture(scope="module")
def sphere_runs(run, tmp_path_factory):
    specs = load_shape_specs(str(CONFIGS / "sphere_family.json"))
    sets = _sets(specs, run.seed)
    paths = {}
    for name, lambda_pp in (("regularized", run.train.weights.lambda_pp), ("no_pointpair", 0.0)):
        out = tmp_path_factory.mktemp(name)
        cfg = replace(run.train, weights=replace(run.train.weights, lambda_pp=lambda_pp))
        train(cfg, sets, out_dir=str(out))
        paths[name] = str(out / "checkpoint.ditc")
    return paths


class TestToyFamily:
    def test_loss_drops(self, toy_run):
        losses = pd.read_csv(toy_run[0] / LOSS_CSV)
        assert losses["total"].iloc[-1] < 0.2 * losses["total"].iloc[10]

    def test_train_set_chamfer(self, toy_run, run):
        out, specs = toy_run
        model, latents, _ = load_trained_model(str(out / "checkpoint.ditc"))
        scores = []
        for spec in specs:
            mesh = extract_mesh(model, latents.code(spec.shape_id), run.resolution)
            assert not mesh.is_empty
            seed = shape_seed(run.seed, spec.shape_id)
            truth = surface_points(spec, run.chamfer_points, seed=seed)
            scores.append(chamfer(sample_mesh_surface(mesh, run.chamfer_points, seed=seed + 1), truth))
        assert np.mean(scores) * CHAMFER_REPORT_SCALE < 1.0

    def test_inferred_code_reconstructs_training_shape(self, toy_run, run):
        out, specs = toy_run
        model, latents, _ = load_trained_model(str(out / "checkpoint.ditc"))
        spec = specs[0]
        seed = shape_seed(run.seed, spec.shape_id)
        truth = surface_points(spec, run.chamfer_points, seed=seed)

        def score(code):
            mesh = extract_mesh(model, code, run.resolution)
            assert not mesh.is_empty
            return chamfer(sample_mesh_surface(mesh, run.chamfer_points, seed=seed + 1), truth)

        inferred = infer_latent(
            sample_sdf(spec, rng_seed=seed), model, iterations=run.infer_iterations, lr=run.infer_lr, seed=run.seed
        )
        assert score(inferred) <= 2.0 * score(latents.code(spec.shape_id))

    def test_interpolated_meshes_are_nonempty(self, toy_run, run):
        out, specs = toy_run
        model, latents, _ = load_trained_model(str(out / "checkpoint.ditc"))
        c1, c2 = latents.code(specs[0].shape_id), latents.code(specs[-1].shape_id)
        for t in (0.0, 0.25, 0.5, 0.75, 1.0):
            assert not extract_mesh(model, interpolate_codes(c1, c2, t), run.resolution).is_empty

    def test_box_corner_transfer(self, toy_run):
        out, specs = toy_run
        model, latents, _ = load_trained_model(str(out / "checkpoint.ditc"))
        by_id = {s.shape_id: s for s in specs}
        source, target = by_id[4], by_id[5]
        pool = extract_mesh(model, latents.code(target.shape_id), 128).vertices
        gap = 2.0 / 127
        moved = keypoint_transfer(
            model, KeypointSet(*box_corner_keypoints(source)), latents.code(source.shape_id),
            latents.code(target.shape_id), pool,
        )
        truth = KeypointSet(*box_corner_keypoints(target))
        assert pck(moved, truth, 2 * gap) == 1.0


class TestSphereFamily:
    def test_template_is_sphere_like(self, sphere_runs, run):
        model, _, _ = load_trained_model(sphere_runs["regularized"])
        mesh = extract_template_mesh(model, run.resolution)
        assert not mesh.is_empty
        radii = np.linalg.norm(mesh.vertices, axis=1)
        h = 2.0 / (run.resolution - 1)
        assert np.abs(radii - radii.mean()).max() < 2 * h

    def test_radial_correspondence(self, sphere_runs):
        assert _sphere_deviation(sphere_runs["regularized"]) < 10.0

    def test_pointpair_ablation_is_worse(self, sphere_runs):
        assert _sphere_deviation(sphere_runs["no_pointpair"]) > _sphere_deviation(sphere_runs["regularized"])


def test_template_supervision_pins_template(run, tmp_path):
    specs = load_shape_specs(str(CONFIGS / "sphere_family.json"))
    cfg = replace(run.train, iterations=1000, template_spec={"kind": "sphere", "params": [0.45]})
    train(cfg, _sets(specs, run.seed), out_dir=str(tmp_path))
    model, _, _ = load_trained_model(str(tmp_path / "checkpoint.ditc"))
    mesh = extract_template_mesh(model, run.resolution)
    assert not mesh.is_empty
    h = 2.0 / (run.resolution - 1)
    assert np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.45).max() < 2 * h


def test_same_seed_same_checkpoint(run, tmp_path):
    specs = load_shape_specs(str(CONFIGS / "toy_shapes.json"))
    sets = _sets(specs, run.seed)
    cfg = replace(run.train, iterations=200)
    for name in ("a", "b"):
        train(cfg, sets, out_dir=str(tmp_path / name))
    assert (tmp_path / "a" / "checkpoint.ditc").read_bytes() == (tmp_path / "b" / "checkpoint.ditc").read_bytes()
