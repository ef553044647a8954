import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stmn.autodiff import Tensor, finite_difference_check, sigmoid
from stmn.objective import (
    GroundTruth, LossWeights, bce_loss, dice_loss, mask_iou, rel_loss,
    score_loss, total_loss,
)
from stmn.scene import SuperpointPartition
from stmn.synth import SceneConfig, generate_scene


def _bce_oracle(pred, target):
    total = 0.0
    for m, y in zip(pred, target):
        m = min(max(m, 1e-7), 1 - 1e-7)
        total += -(y * math.log(m) + (1 - y) * math.log(1 - m))
    return total / len(pred)


class TestBce:
    def test_uninformative_point_is_ln2(self):
        pred = Tensor(np.full(6, 0.5))
        for target in (np.zeros(6), np.ones(6), np.array([0, 1, 0, 1, 0, 1.0])):
            assert abs(float(bce_loss(pred, target).data) - math.log(2)) < 1e-12

    def test_saturated_prediction_hits_clamp_floor(self):
        target = np.array([1.0, 0.0])
        pred = Tensor(np.array([1.0, 0.0]))
        loss = float(bce_loss(pred, target).data)
        assert loss == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(1, 30))
            pred = rng.uniform(0.01, 0.99, size=n)
            target = rng.integers(0, 2, size=n).astype(float)
            ours = float(bce_loss(Tensor(pred), target).data)
            assert abs(ours - _bce_oracle(pred, target)) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            bce_loss(Tensor(np.full(3, 0.5)), np.zeros(4))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.normal(size=(5,)), requires_grad=True)
        target = rng.integers(0, 2, size=5).astype(float)
        err = finite_difference_check(
            lambda: bce_loss(sigmoid(logits), target), [logits])
        assert err <= 1e-6


class TestDice:
    def test_perfect_binary_match_is_zero(self):
        m = np.array([1.0, 0.0, 1.0])
        assert float(dice_loss(Tensor(m), m).data) < 1e-9

    def test_disjoint_supports_near_one(self):
        loss = float(dice_loss(Tensor(np.array([1.0, 0.0])),
                               np.array([0.0, 1.0])).data)
        assert loss == pytest.approx(1.0, abs=1e-6)

    def test_both_empty_is_zero(self):
        assert float(dice_loss(Tensor(np.zeros(4)), np.zeros(4)).data) == 0.0

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20),
           st.lists(st.booleans(), min_size=1, max_size=20))
    @settings(max_examples=60, deadline=None)
    def test_range(self, pred, target):
        n = min(len(pred), len(target))
        loss = float(dice_loss(Tensor(np.array(pred[:n])),
                               np.array(target[:n], dtype=float)).data)
        assert -1e-12 <= loss <= 1.0 + 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(2)
        logits = Tensor(rng.normal(size=(6,)), requires_grad=True)
        target = np.array([1, 0, 1, 1, 0, 0], dtype=float)
        err = finite_difference_check(
            lambda: dice_loss(sigmoid(logits), target), [logits])
        assert err <= 1e-6


class TestRel:
    def test_uniform_scores_all_zero_labels(self):
        n_s, n_w = 8, 3
        s_r = Tensor(np.full(n_s, n_w / n_s))
        loss = float(rel_loss(s_r, np.zeros(n_s), n_w).data)
        assert loss == pytest.approx(-math.log(1 - 1 / n_s), rel=1e-9)

    def test_saturated_positive_labels(self):
        n_w = 4
        s_r = Tensor(np.full(5, float(n_w)))  # p -> 1 at the clamp
        loss = float(rel_loss(s_r, np.ones(5), n_w).data)
        assert loss == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        n_s, n_w = 11, 5
        s_r = rng.uniform(0, n_w, size=n_s)
        labels = rng.integers(0, 2, size=n_s).astype(float)
        ours = float(rel_loss(Tensor(s_r), labels, n_w).data)
        assert abs(ours - _bce_oracle(s_r / n_w, labels)) < 1e-12


class TestScore:
    def test_exact_match_is_zero(self):
        assert float(score_loss(Tensor(0.8), 0.8).data) == 0.0

    def test_gate_off_below_half(self):
        assert float(score_loss(Tensor(0.99), 0.4).data) == 0.0
        assert float(score_loss(Tensor(0.0), 0.5).data) == 0.0  # strict gate

    def test_absolute_difference(self):
        assert float(score_loss(Tensor(0.2), 0.9).data) == pytest.approx(0.7)

    def test_gradient_when_gated_on(self):
        s = Tensor(np.array(0.3), requires_grad=True)
        err = finite_difference_check(lambda: score_loss(s, 0.9), [s])
        assert err <= 1e-9


class TestTotal:
    def _components(self, b, d, r, s):
        return {"bce": Tensor(float(b)), "dice": Tensor(float(d)),
                "rel": Tensor(float(r)), "score": Tensor(float(s))}

    def test_zero_components(self):
        total = total_loss(self._components(0, 0, 0, 0), LossWeights())
        assert float(total.data) == 0.0

    def test_unit_components_default_weights(self):
        total = total_loss(self._components(1, 1, 1, 1), LossWeights())
        assert float(total.data) == pytest.approx(7.5)

    def test_monotone_in_components(self):
        w = LossWeights()
        low = float(total_loss(self._components(0.2, 0.1, 0.3, 0.0), w).data)
        high = float(total_loss(self._components(0.25, 0.1, 0.3, 0.0), w).data)
        assert high >= low

    def test_gradient_is_weighted_sum(self):
        rng = np.random.default_rng(4)
        logits = Tensor(rng.normal(size=(6,)), requires_grad=True)
        target = np.array([1, 1, 0, 0, 1, 0], dtype=float)
        w = LossWeights()

        def f():
            pred = sigmoid(logits)
            comps = {"bce": bce_loss(pred, target),
                     "dice": dice_loss(pred, target),
                     "rel": rel_loss(pred * 3.0, target, 3),
                     "score": Tensor(0.0)}
            return total_loss(comps, w)

        assert finite_difference_check(f, [logits]) <= 1e-6


class TestIoU:
    def test_identical_nonempty(self):
        m = np.array([1, 1, 0, 0])
        assert mask_iou(m, m) == 1.0

    def test_disjoint(self):
        assert mask_iou(np.array([1, 0]), np.array([0, 1])) == 0.0

    def test_hand_count(self):
        assert mask_iou(np.array([1, 1, 0, 0]),
                        np.array([0, 1, 1, 0])) == pytest.approx(1 / 3)

    def test_both_empty_convention(self):
        assert mask_iou(np.zeros(3), np.zeros(3)) == 1.0

    @given(st.lists(st.booleans(), min_size=1, max_size=16),
           st.lists(st.booleans(), min_size=1, max_size=16))
    @settings(max_examples=50, deadline=None)
    def test_symmetric(self, a, b):
        n = min(len(a), len(b))
        a, b = np.array(a[:n]), np.array(b[:n])
        assert mask_iou(a, b) == mask_iou(b, a)
        if a.any() or b.any():
            assert (mask_iou(a, b) == 1.0) == np.array_equal(a, b)


class TestGroundTruth:
    def test_build_from_scene(self):
        cfg = SceneConfig(n_points=500, n_objects=(2, 3))
        scene, records = generate_scene(cfg, seed=21)
        assignment = np.arange(scene.n_points) % 40
        part = SuperpointPartition.from_assignment(assignment)
        target = records[0]["instance"]
        gt = GroundTruth.build(scene, part, target,
                               [records[0]["category"]], cfg.category_ids())
        assert gt.point_mask.sum() > 0
        assert np.array_equal(np.unique(gt.superpoint_mask), [0.0, 1.0]) or \
            np.all(gt.superpoint_mask == 0.0)
        # relevance positives cover the pooled target mask when the
        # target's own category is mentioned
        covered = gt.relevance_labels[gt.superpoint_mask == 1.0]
        assert np.all(covered == 1.0)
