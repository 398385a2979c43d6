import numpy as np
import numpy.testing as npt
import pytest

from src.geometry import SampleSet, ShapeSpec, analytic_sdf
from src.grid import GridField, polygonize
from src.inference import (
    CorrespondenceQuery,
    canonical_position,
    correspond,
    extract_field,
    extract_mesh,
    extract_template_mesh,
    infer_latent,
    interpolate_codes,
)
from src.model import LatentCode
from tests.conftest import carve_octahedron


class TestPolygonize:
    def test_analytic_sphere(self):
        spec = ShapeSpec("sphere", (0.5,))
        field = GridField.from_function(lambda p: analytic_sdf(spec, p), 64)
        mesh = polygonize(field)
        radii = np.linalg.norm(mesh.vertices, axis=1)
        assert np.abs(radii - 0.5).max() <= field.spacing
        assert mesh.is_watertight()

    def test_constant_field_is_empty(self):
        field = GridField(8, np.full((8, 8, 8), 0.3))
        assert polygonize(field).is_empty

    def test_indices_and_bounds(self):
        spec = ShapeSpec("box", (0.4, 0.3, 0.2))
        mesh = polygonize(GridField.from_function(lambda p: analytic_sdf(spec, p), 32))
        assert mesh.triangles.min() >= 0
        assert mesh.triangles.max() < len(mesh.vertices)
        assert np.all(np.abs(mesh.vertices) <= 1.0 + 1e-12)

    def test_chunking_and_threads_do_not_change_values(self):
        spec = ShapeSpec("sphere", (0.3,))
        fn = lambda p: analytic_sdf(spec, p)  # noqa: E731
        a = GridField.from_function(fn, 16, chunk=16**3)
        b = GridField.from_function(fn, 16, chunk=100, threads=3)
        npt.assert_array_equal(a.values, b.values)

    def test_lattice_order(self):
        lattice = GridField.lattice(3)
        npt.assert_array_equal(lattice[1], [-1.0, -1.0, 0.0])
        npt.assert_array_equal(lattice[3], [-1.0, 0.0, -1.0])

    def test_rejects_bad_grids(self):
        with pytest.raises(ValueError):
            GridField(1, np.zeros((1, 1, 1)))
        with pytest.raises(ValueError):
            GridField(2, np.full((2, 2, 2), np.nan))


class TestExtraction:
    def test_identity_warp_matches_template(self, identity_model, rng):
        code = LatentCode(rng.normal(size=3))
        instance = extract_field(identity_model, code, 12)
        template = extract_field(identity_model, None, 12)
        npt.assert_array_equal(instance.values, template.values)
        a = extract_mesh(identity_model, code, 12)
        b = extract_template_mesh(identity_model, 12)
        npt.assert_array_equal(a.vertices, b.vertices)
        npt.assert_array_equal(a.triangles, b.triangles)

    def test_carved_template_is_closed(self, identity_model):
        mesh = extract_template_mesh(carve_octahedron(identity_model, 0.5), 24)
        assert not mesh.is_empty
        assert mesh.is_watertight()
        assert np.abs(np.abs(mesh.vertices).sum(axis=1) - 0.5).max() < 0.1

    def test_steps_zero_is_template(self, tiny_model, rng):
        code = LatentCode(rng.normal(size=3))
        npt.assert_array_equal(
            extract_field(tiny_model, code, 8, steps=0).values, extract_field(tiny_model, None, 8).values
        )

    def test_field_matches_forward(self, tiny_model, rng):
        code = LatentCode(rng.normal(size=3))
        field = extract_field(tiny_model, code, 6)
        expected = tiny_model.forward_sdf(GridField.lattice(6), code).reshape(6, 6, 6)
        npt.assert_array_equal(field.values, expected)


class TestInterpolation:
    def test_endpoints_and_midpoint(self):
        a, b = LatentCode([0.0, 2.0]), LatentCode([4.0, -2.0])
        npt.assert_array_equal(interpolate_codes(a, b, 0.0).values, a.values)
        npt.assert_array_equal(interpolate_codes(a, b, 1.0).values, b.values)
        npt.assert_allclose(interpolate_codes(a, b, 0.25).values, [1.0, 1.0])

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            interpolate_codes(LatentCode([0.0]), LatentCode([1.0]), 1.5)

    def test_rejects_dimension_mismatch(self):
        with pytest.raises(ValueError):
            interpolate_codes(LatentCode([0.0]), LatentCode([1.0, 2.0]), 0.5)


class TestInferLatent:
    def test_network_untouched(self, tiny_model, small_sample_sets):
        before = tiny_model.parameter_hash()
        code = infer_latent(small_sample_sets[0], tiny_model, iterations=5)
        assert tiny_model.parameter_hash() == before
        assert all(not p.grad.any() for p in tiny_model.params())
        assert code.dim == 3
        assert code.shape_id == 0

    def test_zero_iterations_returns_initialisation(self, tiny_model, small_sample_sets):
        code = infer_latent(small_sample_sets[1], tiny_model, iterations=0, seed=5)
        npt.assert_array_equal(code.values, np.random.default_rng(5).normal(0.0, 0.01, size=(1, 3))[0])

    def test_deterministic(self, tiny_model, small_sample_sets):
        a = infer_latent(small_sample_sets[0], tiny_model, iterations=4, batch_points=50, seed=1)
        b = infer_latent(small_sample_sets[0], tiny_model, iterations=4, batch_points=50, seed=1)
        npt.assert_array_equal(a.values, b.values)

    def test_empty_samples(self, tiny_model):
        with pytest.raises(ValueError):
            infer_latent(SampleSet(9, np.zeros((0, 3)), np.zeros(0), 0, 0), tiny_model)


class TestCorrespond:
    def test_canonical_position_shapes(self, tiny_model, rng):
        code = LatentCode(rng.normal(size=3))
        assert canonical_position(tiny_model, [0.1, 0.2, 0.3], code).shape == (3,)
        assert canonical_position(tiny_model, rng.normal(size=(4, 3)), code).shape == (4, 3)

    def test_self_match(self, tiny_model, rng):
        code = LatentCode(rng.normal(size=3))
        pool = rng.uniform(-0.5, 0.5, size=(40, 3))
        targets, idx, dist = correspond(tiny_model, CorrespondenceQuery(pool, code, code, pool))
        npt.assert_array_equal(idx, np.arange(40))
        npt.assert_array_equal(targets, pool)
        npt.assert_array_equal(dist, 0.0)

    def test_identity_warp_is_euclidean(self, identity_model, rng):
        source = rng.uniform(-0.5, 0.5, size=(15, 3))
        pool = rng.uniform(-0.5, 0.5, size=(60, 3))
        query = CorrespondenceQuery(source, LatentCode(rng.normal(size=3)), LatentCode(rng.normal(size=3)), pool)
        _, idx, dist = correspond(identity_model, query, chunk=7)
        d = np.linalg.norm(source[:, None, :] - pool[None, :, :], axis=2)
        npt.assert_array_equal(idx, d.argmin(axis=1))
        npt.assert_allclose(dist, d.min(axis=1), atol=1e-12)

    def test_ties_go_to_lowest_index(self, identity_model):
        pool = np.array([[0.5, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        code = LatentCode(np.zeros(3))
        _, idx, _ = correspond(identity_model, CorrespondenceQuery([[0.0, 0.1, 0.0]], code, code, pool))
        assert idx[0] == 1

    def test_empty_pool(self):
        code = LatentCode(np.zeros(3))
        with pytest.raises(ValueError):
            CorrespondenceQuery(np.zeros((1, 3)), code, code, np.zeros((0, 3)))
