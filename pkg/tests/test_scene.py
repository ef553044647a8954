import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stmn.autodiff import Tensor, backward, finite_difference_check
from stmn.scene import (
    PointCloudScene, PointEncoder, SuperpointPartition, build_superpoints,
    expand_mask, knn_indices, pool_gt_mask, superpoint_pool,
)
from stmn.synth import SceneConfig, generate_scene


@pytest.fixture(scope="module")
def small_scene():
    scene, _ = generate_scene(SceneConfig(n_points=600, n_objects=(2, 3)), seed=7)
    return scene


def _partition(assignment):
    return SuperpointPartition.from_assignment(np.asarray(assignment))


class TestGenerator:
    def test_deterministic_bytes(self, tmp_path):
        cfg = SceneConfig(n_points=400, n_objects=(2, 2))
        a, _ = generate_scene(cfg, seed=3)
        b, _ = generate_scene(cfg, seed=3)
        pa, pb = tmp_path / "a.json", tmp_path / "b.json"
        a.save(pa)
        b.save(pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_single_object_has_two_instances(self):
        scene, records = generate_scene(
            SceneConfig(n_points=300, n_objects=(1, 1)), seed=5)
        assert np.unique(scene.instance_id).size == 2
        assert len(records) == 1

    def test_exact_point_count(self):
        for seed in (1, 2, 9):
            cfg = SceneConfig(n_points=512, n_objects=(2, 4))
            scene, _ = generate_scene(cfg, seed)
            assert scene.n_points == 512

    def test_scene_file_round_trip(self, tmp_path, small_scene):
        path = tmp_path / "scene.json"
        small_scene.save(path)
        loaded = PointCloudScene.load(path)
        loaded.validate()
        assert loaded.scene_id == small_scene.scene_id
        assert np.allclose(loaded.positions, small_scene.positions, atol=1e-5)
        assert np.array_equal(loaded.instance_id, small_scene.instance_id)

    def test_rejects_bad_format_version(self, tmp_path, small_scene):
        doc = small_scene.to_json()
        doc["format"] = 999
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ValueError, match="format"):
            PointCloudScene.load(path)


class TestBuildSuperpoints:
    def test_two_separated_cubes(self):
        # connected-components oracle: two well-separated uniform cubes
        rng = np.random.default_rng(0)
        half = 120
        pts_a = rng.uniform(0, 1, size=(half, 3))
        pts_b = rng.uniform(0, 1, size=(half, 3)) + np.array([5.0, 0, 0])
        positions = np.vstack([pts_a, pts_b])
        aux = np.hstack([np.full((2 * half, 3), 0.5),
                         np.tile([0.0, 0.0, 1.0], (2 * half, 1))])
        scene = PointCloudScene(positions, aux,
                                np.zeros(2 * half, dtype=np.int64),
                                np.zeros(2 * half, dtype=np.int64), "cubes")
        part = build_superpoints(scene, knn=6, spatial_w=1.0, color_w=1.0,
                                 normal_w=1.0, threshold=1.0, max_cell=10 ** 6)
        part.validate()
        assert part.count == 2
        # oracle: each cube is one cell
        assert np.unique(part.assignment[:half]).size == 1
        assert np.unique(part.assignment[half:]).size == 1

    def test_unique_colors_yield_singletons(self):
        rng = np.random.default_rng(1)
        n = 40
        positions = rng.uniform(0, 0.1, size=(n, 3))
        colors = np.linspace(0, 1, n)[:, None] * np.ones((1, 3))
        aux = np.hstack([colors, np.tile([0.0, 0.0, 1.0], (n, 1))])
        scene = PointCloudScene(positions, aux, np.zeros(n, dtype=np.int64),
                                np.zeros(n, dtype=np.int64), "rainbow")
        part = build_superpoints(scene, knn=4, spatial_w=0.0, color_w=100.0,
                                 normal_w=0.0, threshold=0.5, max_cell=10 ** 6)
        assert part.count == n

    def test_partition_invariant_on_generated_scene(self, small_scene):
        part = build_superpoints(small_scene, knn=8, threshold=0.25,
                                 max_cell=200)
        part.validate()
        assert part.count >= 2

    def test_max_cell_is_respected(self, small_scene):
        part = build_superpoints(small_scene, knn=8, threshold=0.25, max_cell=40)
        assert max(c.size for c in part.cells) <= 40


class TestPooling:
    def test_hand_means(self):
        part = _partition([0, 0, 1])
        out = superpoint_pool(Tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]), part)
        assert np.array_equal(out.data, [[2.0, 3.0], [5.0, 6.0]])

    def test_singleton_cells_identity(self):
        part = _partition([0, 1, 2])
        x = np.random.default_rng(2).normal(size=(3, 4))
        out = superpoint_pool(Tensor(x), part)
        assert np.array_equal(out.data, x)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(3)
        n, c = 50, 6
        assignment = rng.integers(0, 9, size=n)
        assignment[:9] = np.arange(9)  # every cell nonempty
        part = _partition(assignment)
        x = rng.normal(size=(n, c))
        out = superpoint_pool(Tensor(x), part).data
        for i, cell in enumerate(part.cells):
            expected = x[cell].mean(axis=0)
            assert np.max(np.abs(out[i] - expected)) < 1e-12

    def test_point_count_mismatch(self):
        with pytest.raises(ValueError):
            superpoint_pool(Tensor(np.zeros((5, 2))), _partition([0, 0, 1]))

    def test_gradient_mass_conservation(self):
        rng = np.random.default_rng(4)
        part = _partition(rng.integers(0, 4, size=20))
        x = Tensor(rng.normal(size=(20, 3)), requires_grad=True)
        pooled = superpoint_pool(x, part)
        w = rng.normal(size=(part.count, 3))
        backward((pooled * w).sum())
        for i, cell in enumerate(part.cells):
            assert np.max(np.abs(x.grad[cell].sum(axis=0) - w[i])) < 1e-12

    def test_pool_backward_fd(self):
        rng = np.random.default_rng(5)
        part = _partition(rng.integers(0, 3, size=10))
        x = Tensor(rng.normal(size=(10, 2)), requires_grad=True)
        def f():
            pooled = superpoint_pool(x, part)
            return (pooled * pooled).sum()

        err = finite_difference_check(f, [x])
        assert err <= 1e-7


class TestGtMask:
    def test_two_thirds_is_positive(self):
        assert pool_gt_mask([1, 1, 0], _partition([0, 0, 0]))[0] == 1.0

    def test_exact_half_is_background(self):
        assert pool_gt_mask([1, 0], _partition([0, 0]))[0] == 0.0

    def test_all_zero(self):
        out = pool_gt_mask([0, 0, 0], _partition([0, 1, 1]))
        assert np.all(out == 0.0)

    @given(st.lists(st.booleans(), min_size=4, max_size=24))
    @settings(max_examples=50, deadline=None)
    def test_monotone_in_positives(self, bits):
        mask = np.array(bits, dtype=float)
        assignment = np.arange(len(bits)) % 3
        part = _partition(assignment)
        base = pool_gt_mask(mask, part)
        grown = mask.copy()
        grown[0] = 1.0
        after = pool_gt_mask(grown, part)
        assert np.all(after >= base)


class TestExpandMask:
    def test_hand_case(self):
        out = expand_mask([1.0, 0.0], _partition([0, 0, 1]))
        assert np.array_equal(out, [1.0, 1.0, 0.0])

    def test_all_ones(self):
        out = expand_mask(np.ones(3), _partition([0, 1, 2]))
        assert np.all(out == 1.0)

    @given(st.lists(st.booleans(), min_size=1, max_size=8))
    @settings(max_examples=40, deadline=None)
    def test_pool_expand_round_trip(self, bits):
        sp_mask = np.array(bits, dtype=float)
        assignment = np.repeat(np.arange(len(bits)), 3)
        part = _partition(assignment)
        assert np.array_equal(pool_gt_mask(expand_mask(sp_mask, part), part),
                              sp_mask)

    def test_constant_round_trip_exact(self):
        part = _partition([0, 0, 1, 1, 1])
        const = np.full(2, 0.75)
        expanded = expand_mask(const, part)
        pooled = np.array([expanded[c].mean() for c in part.cells])
        assert np.array_equal(pooled, const)


class TestPointEncoder:
    def test_output_shape(self, small_scene):
        enc = PointEncoder(c_p=8, knn=4)
        out = enc.encode(small_scene)
        assert out.data.shape == (small_scene.n_points, 8)

    def test_identical_points_identical_features(self):
        positions = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0],
                              [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        aux = np.hstack([np.full((4, 3), 0.3),
                         np.tile([0.0, 0.0, 1.0], (4, 1))])
        scene = PointCloudScene(positions, aux, np.zeros(4, dtype=np.int64),
                                np.zeros(4, dtype=np.int64), "dup")
        enc = PointEncoder(c_p=6, knn=3)
        out = enc.encode(scene).data
        assert np.allclose(out[0], out[1])

    def test_gradients_pass_fd_check(self):
        rng = np.random.default_rng(6)
        n = 12
        positions = rng.uniform(0, 1, size=(n, 3))
        normals = rng.normal(size=(n, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        aux = np.hstack([rng.uniform(0, 1, size=(n, 3)), normals])
        scene = PointCloudScene(positions, aux, np.zeros(n, dtype=np.int64),
                                np.zeros(n, dtype=np.int64), "fd")
        enc = PointEncoder(c_p=4, knn=3, rng=rng)
        idx = knn_indices(scene.positions, 3)
        params = list(enc.parameters().values())
        err = finite_difference_check(
            lambda: (enc.encode(scene, idx) * enc.encode(scene, idx)).mean(),
            params)
        assert err <= 1e-5
