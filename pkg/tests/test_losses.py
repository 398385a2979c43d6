import math

import numpy as np
import numpy.testing as npt
import pytest

from src.config import CURRICULUM_SCHEDULE, CurriculumParams, RegWeights, TrainConfig
from src.losses import (
    CorrespondenceSet,
    SampleBatch,
    code_reg,
    correspondence_loss,
    curriculum_loss,
    curriculum_weight,
    huber,
    pointpair_reg,
    pointwise_reg,
    progressive_recon_loss,
    template_supervision_loss,
    total_loss,
)
from src.model import ImplicitTemplateModel
from src.nn import ParamBlock, grad_check
from tests.conftest import tiny_model_config


def _batch(rng, rows=(0, 1, 2), n=8):
    points = rng.uniform(-0.8, 0.8, size=(len(rows) * n, 3))
    sdf = rng.uniform(-0.08, 0.08, size=len(points))
    row_ids = np.repeat(np.asarray(rows), n)
    pairs = []
    for b in range(len(rows)):
        order = rng.permutation(n) + b * n
        pairs.append(np.stack([order, np.roll(order, -1)], axis=1))
    return SampleBatch(points, sdf, row_ids, np.concatenate(pairs))


class TestCurriculumLoss:
    def test_hand_example(self):
        params = CurriculumParams(eps=0.01, lam=0.5, delta=0.1)
        assert curriculum_loss(0.02, 0.05, params) == pytest.approx(0.03)

    def test_reduces_to_clamp_l1(self, rng):
        for _ in range(10_000):
            delta = float(rng.uniform(0.01, 0.5))
            f, s = rng.uniform(-1, 1, size=2)
            expected = abs(np.clip(f, -delta, delta) - np.clip(s, -delta, delta))
            assert curriculum_loss(f, s, CurriculumParams(0.0, 0.0, delta)) == expected

    def test_tolerance_zone(self):
        assert curriculum_loss(0.031, 0.04, CurriculumParams(eps=0.01, lam=0.3)) == 0.0

    def test_nonincreasing_in_eps(self, rng):
        f, s = rng.uniform(-0.2, 0.2, size=200), rng.uniform(-0.2, 0.2, size=200)
        values = [curriculum_loss(f, s, CurriculumParams(eps, 0.2)) for eps in (0.0, 0.0025, 0.01, 0.025, 0.1)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert min(values) >= 0.0

    @pytest.mark.parametrize(
        "f, s, expected",
        [
            (0.08, 0.05, 0.5),  # outside, overshoot
            (0.02, 0.05, 1.5),  # outside, undershoot
            (-0.08, -0.05, 0.5),
            (-0.02, -0.05, 1.5),
        ],
    )
    def test_hard_example_weights(self, f, s, expected):
        assert curriculum_weight(np.array(f), np.array(s), 0.5) == expected

    def test_weight_bounds(self, rng):
        w = curriculum_weight(rng.normal(size=1000), rng.normal(size=1000), 0.3)
        assert w.min() >= 0.7 and w.max() <= 1.3


class TestProgressiveRecon:
    def test_perfect_predictions(self, rng):
        gt = rng.uniform(-0.1, 0.1, size=10)
        assert progressive_recon_loss({s: gt for s in CURRICULUM_SCHEDULE}, gt, CURRICULUM_SCHEDULE) == 0.0

    def test_final_step_only_is_l1(self, rng):
        gt, pred = rng.uniform(-0.1, 0.1, size=10), rng.uniform(-0.1, 0.1, size=10)
        value = progressive_recon_loss({8: pred}, gt, {8: CurriculumParams(0.0, 0.0)})
        assert value == pytest.approx(np.abs(pred - gt).mean(), rel=1e-12)

    def test_per_term_hand_values(self):
        gt = np.array([0.02, -0.03])
        step_sdf = {2: gt + 0.05, 4: gt + 0.005}
        schedule = {2: CURRICULUM_SCHEDULE[2], 4: CURRICULUM_SCHEDULE[4]}
        # s=2: |0.05| - 0.025 per sample, lam 0; s=4: inside the 0.01 tolerance
        assert progressive_recon_loss(step_sdf, gt, schedule) == pytest.approx(0.025)

    def test_missing_step(self, rng):
        gt = rng.uniform(size=4)
        with pytest.raises(KeyError):
            progressive_recon_loss({2: gt}, gt, CURRICULUM_SCHEDULE)


class TestPointwiseReg:
    def test_identity(self):
        assert pointwise_reg(np.zeros((5, 3)), 0.25) == 0.0

    @pytest.mark.parametrize("magnitude, expected", [(0.1, 0.02), (1.0, 0.875)])
    def test_huber_branches(self, magnitude, expected):
        assert pointwise_reg(np.array([[0.0, magnitude, 0.0]]), 0.25) == pytest.approx(expected)

    def test_huber_continuous_at_delta(self):
        assert huber(np.array([0.25]), 0.25)[0] == pytest.approx(0.125)


class TestPointpairReg:
    def test_hand_example(self):
        points = np.array([[0.1, 0.0, 0.0], [0.0, 0.0, 0.0]])
        shifts = np.array([[0.2, 0.0, 0.0], [0.0, 0.0, 0.0]])
        assert pointpair_reg(points, shifts, np.array([[0, 1]]), 0.5) == pytest.approx(1.5)

    def test_constant_shift_is_zero(self, rng):
        points = rng.uniform(-1, 1, size=(20, 3))
        shifts = np.tile(rng.normal(size=3), (20, 1))
        pairs = np.stack([np.arange(20), np.roll(np.arange(20), 1)], axis=1)
        assert pointpair_reg(points, shifts, pairs, 0.0) == 0.0

    def test_boundary_of_hinge(self):
        points = np.array([[0.5, 0.0, 0.0], [0.0, 0.0, 0.0]])
        shifts = np.array([[0.25, 0.0, 0.0], [0.0, 0.0, 0.0]])
        assert pointpair_reg(points, shifts, np.array([[0, 1]]), 0.5) == 0.0

    def test_coincident_pairs_skipped(self):
        points = np.zeros((2, 3))
        shifts = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        assert pointpair_reg(points, shifts, np.array([[0, 1]]), 0.5) == 0.0

    def test_invariant_to_added_constant(self, rng):
        points, shifts = rng.uniform(-1, 1, size=(10, 3)), rng.normal(size=(10, 3)) * 0.1
        pairs = np.stack([np.arange(10), np.roll(np.arange(10), 3)], axis=1)
        a = pointpair_reg(points, shifts, pairs, 0.5)
        b = pointpair_reg(points, shifts + np.array([0.3, -0.2, 0.1]), pairs, 0.5)
        assert a == pytest.approx(b, abs=1e-12)


class TestCodeReg:
    def test_zero(self):
        assert code_reg(np.zeros((4, 8)), 100.0) == 0.0

    def test_hand_example(self):
        assert code_reg(np.array([[3.0, 4.0, 0.0]]), 10.0) == pytest.approx(0.25)

    def test_sigma_scaling(self, rng):
        codes = rng.normal(size=(3, 5))
        assert code_reg(codes, 20.0) == pytest.approx(code_reg(codes, 10.0) / 4)


class TestExtensionLosses:
    def test_template_single_pair(self, tiny_model):
        last = tiny_model.template.mlp.layers[-1]
        last.weight.value[...] = 0.0
        last.bias.value[...] = 0.1
        value = template_supervision_loss(tiny_model, np.zeros((1, 3)), np.array([0.3]))
        assert value == pytest.approx(0.2)

    def test_template_empty(self, tiny_model):
        with pytest.raises(ValueError):
            template_supervision_loss(tiny_model, np.zeros((0, 3)), np.zeros(0))

    def test_correspondence_same_point(self, tiny_model, rng):
        codes = ParamBlock("codes", rng.normal(size=(2, 3)))
        p = rng.uniform(-1, 1, size=(4, 3))
        pairs = CorrespondenceSet(p, np.zeros(4), p, np.zeros(4))
        assert correspondence_loss(tiny_model, pairs, codes) == 0.0

    def test_correspondence_identity_warp(self, identity_model, rng):
        codes = ParamBlock("codes", rng.normal(size=(2, 3)))
        p, q = rng.uniform(-1, 1, size=(5, 3)), rng.uniform(-1, 1, size=(5, 3))
        value = correspondence_loss(identity_model, CorrespondenceSet(p, np.zeros(5), q, np.ones(5)), codes)
        assert value == pytest.approx(((p - q) ** 2).sum(axis=1).mean())

    def test_correspondence_matches_warp(self, tiny_model, rng):
        codes = ParamBlock("codes", rng.normal(size=(3, 3)))
        p, q = rng.uniform(-1, 1, size=(6, 3)), rng.uniform(-1, 1, size=(6, 3))
        rk, rl = rng.integers(0, 3, size=6), rng.integers(0, 3, size=6)
        expected = np.mean(
            [
                np.sum((tiny_model.warp(p[i], codes.value[rk[i]]).canonical - tiny_model.warp(q[i], codes.value[rl[i]]).canonical) ** 2)
                for i in range(6)
            ]
        )
        value = correspondence_loss(tiny_model, CorrespondenceSet(p, rk, q, rl), codes)
        assert value == pytest.approx(expected, rel=1e-12)

    def test_correspondence_unknown_row(self, tiny_model):
        codes = ParamBlock("codes", np.zeros((2, 3)))
        with pytest.raises(KeyError):
            correspondence_loss(tiny_model, CorrespondenceSet(np.zeros((1, 3)), [5], np.zeros((1, 3)), [0]), codes)


class TestTotalLoss:
    def test_zero_weights_perfect_prediction(self, identity_model, rng):
        batch = _batch(rng)
        batch.sdf = identity_model.template_sdf(batch.points)
        codes = ParamBlock("codes", np.zeros((3, 3)))
        weights = RegWeights(lambda_pw=0.0, lambda_pp=0.0)
        total, _ = total_loss(identity_model, codes, batch, weights, {8: CurriculumParams(0.0, 0.0, 10.0)})
        assert total == 0.0

    def test_breakdown_sums_to_total(self, tiny_model, rng):
        codes = ParamBlock("codes", rng.normal(size=(3, 3)))
        total, breakdown = total_loss(tiny_model, codes, _batch(rng), RegWeights(), CURRICULUM_SCHEDULE)
        assert abs(math.fsum(breakdown.terms().values()) - total) <= 1e-12
        assert total >= breakdown.code >= 0.0
        assert list(breakdown.as_row(3)) == ["iteration", "rec_s2", "rec_s4", "rec_s6", "rec_s8", "pointwise", "pointpair", "code", "total"]

    def test_matches_sub_operations(self, tiny_model, rng):
        codes = ParamBlock("codes", rng.normal(size=(3, 3)))
        batch = _batch(rng)
        weights = RegWeights(lambda_pw=0.1, lambda_pp=0.2)
        total, _ = total_loss(tiny_model, codes, batch, weights, CURRICULUM_SCHEDULE)

        traj = tiny_model.warp(batch.points, codes.value[batch.rows])
        step_sdf = {s: tiny_model.template_sdf(traj.positions[s]) for s in CURRICULUM_SCHEDULE}
        expected = (
            progressive_recon_loss(step_sdf, batch.sdf, CURRICULUM_SCHEDULE)
            + 0.1 * pointwise_reg(traj.shift, weights.huber_delta)
            + 0.2 * pointpair_reg(batch.points, traj.shift, batch.pairs, weights.eps_pp)
            + code_reg(codes.value, weights.code_sigma)
        )
        assert total == pytest.approx(expected, rel=1e-10)

    def test_schedule_beyond_steps(self, rng):
        model = ImplicitTemplateModel(tiny_model_config(steps=4), seed=0)
        codes = ParamBlock("codes", np.zeros((3, 3)))
        with pytest.raises(KeyError):
            total_loss(model, codes, _batch(rng), RegWeights(), CURRICULUM_SCHEDULE)

    def test_extension_terms_in_breakdown(self, tiny_model, rng):
        codes = ParamBlock("codes", rng.normal(size=(3, 3)))
        batch = _batch(rng)
        batch.template_points = rng.uniform(-1, 1, size=(10, 3))
        batch.template_sdf = rng.uniform(-0.1, 0.1, size=10)
        batch.correspondences = CorrespondenceSet(rng.uniform(-1, 1, (2, 3)), [0, 1], rng.uniform(-1, 1, (2, 3)), [2, 0])
        _, breakdown = total_loss(tiny_model, codes, batch, RegWeights(), CURRICULUM_SCHEDULE)
        assert "template" in breakdown.terms() and "correspondence" in breakdown.terms()

    def test_code_prior_covers_correspondence_rows(self, tiny_model, rng):
        codes = ParamBlock("codes", rng.normal(size=(3, 3)))
        batch = _batch(rng, rows=(0, 1))
        batch.correspondences = CorrespondenceSet(np.zeros((1, 3)), [0], np.zeros((1, 3)), [2])
        weights = RegWeights(code_sigma=2.0, lambda_corr=0.0)
        _, breakdown = total_loss(tiny_model, codes, batch, weights, CURRICULUM_SCHEDULE, backward=True)
        assert breakdown.code == pytest.approx(code_reg(codes.value, 2.0), rel=1e-12)
        npt.assert_allclose(codes.grad[2], 2.0 * codes.value[2] / 4.0, rtol=1e-12)

    def test_extension_gradients_follow_weights(self, tiny_model, rng):
        codes = ParamBlock("codes", rng.normal(size=(3, 3)))
        points, sdf = rng.uniform(-1, 1, size=(6, 3)), rng.uniform(-0.1, 0.1, size=6)
        pairs = CorrespondenceSet(rng.uniform(-1, 1, (2, 3)), [0, 1], rng.uniform(-1, 1, (2, 3)), [2, 0])
        grads = []
        for scale in (1.0, 0.25):
            tiny_model.zero_grad()
            codes.zero_grad()
            template_supervision_loss(tiny_model, points, sdf, backward=True, scale=scale)
            correspondence_loss(tiny_model, pairs, codes, backward=True, scale=scale)
            grads.append([p.grad.copy() for p in tiny_model.params()] + [codes.grad.copy()])
        for full, quarter in zip(*grads):
            npt.assert_allclose(quarter, 0.25 * full, rtol=1e-12, atol=1e-15)

    def test_gradients(self, rng):
        model = ImplicitTemplateModel(tiny_model_config(head_init_scale=0.5, softplus_beta=5.0), seed=5)
        codes = ParamBlock("codes", rng.normal(size=(3, 3)))
        batch = _batch(rng, n=4)
        batch.template_points = rng.uniform(-1, 1, size=(6, 3))
        batch.template_sdf = rng.uniform(-0.1, 0.1, size=6)
        batch.correspondences = CorrespondenceSet(rng.uniform(-1, 1, (2, 3)), [0, 1], rng.uniform(-1, 1, (2, 3)), [2, 0])
        weights = RegWeights(lambda_pw=0.3, lambda_pp=0.2)
        schedule = {s: CurriculumParams(p.eps, p.lam, delta=1.0) for s, p in CURRICULUM_SCHEDULE.items()}

        def closure(compute_grads):
            return total_loss(model, codes, batch, weights, schedule, backward=compute_grads)[0]

        assert grad_check(closure, model.params() + [codes]) < 1e-4

    def test_baseline_config_is_plain_l1(self, tiny_model, rng):
        cfg = TrainConfig.baseline(model=tiny_model_config())
        codes = ParamBlock("codes", np.zeros((3, 3)))
        batch = _batch(rng)
        total, breakdown = total_loss(tiny_model, codes, batch, cfg.weights, cfg.schedule)
        pred = tiny_model.forward_sdf(batch.points, codes.value[batch.rows])
        expected = np.abs(np.clip(pred, -0.1, 0.1) - np.clip(batch.sdf, -0.1, 0.1)).mean()
        assert breakdown.pointwise == 0.0 and breakdown.pointpair == 0.0
        assert total == pytest.approx(expected, rel=1e-12)
