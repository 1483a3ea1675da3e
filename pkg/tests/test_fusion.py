import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdfrecon.calib import ViewRig
from sdfrecon.fusion import (
    body_visibility,
    depth_eps,
    fuse_average,
    fuse_body_visibility,
    fuse_normal_based,
    fuse_occlusion_aware,
    fuse_weighted,
    normal_weights,
    normalize_weights,
    occlusion_weight,
    occlusion_weights,
)
from sdfrecon.geometry import build_bvh

from meshes import make_cube, make_icosphere


@pytest.fixture(scope="module")
def cube():
    m = make_cube()
    return m, build_bvh(m)


class TestOcclusionWeight:
    def test_point_on_front_surface_maximal(self, cube):
        mesh, bvh = cube
        rig = ViewRig.identity(scale=100.0)
        eps = depth_eps(mesh)
        # Camera looks along +z: the visible face is z = -1.
        w = occlusion_weight([0.25, 0.25, -1.0], rig, bvh, mesh)
        assert w == pytest.approx(1.0 / eps)

    def test_point_behind_by_gap(self, cube):
        mesh, bvh = cube
        rig = ViewRig.identity(scale=100.0)
        w = occlusion_weight([0.0, 0.0, -0.7], rig, bvh, mesh)
        assert w == pytest.approx(1.0 / 0.3)

    def test_ray_miss_maximal(self, cube):
        mesh, bvh = cube
        rig = ViewRig.identity(scale=100.0)
        eps = depth_eps(mesh)
        assert occlusion_weight([5.0, 5.0, 0.0], rig, bvh, mesh) == pytest.approx(1.0 / eps)

    def test_worked_two_view_example(self):
        raw = np.array([[1.0 / 0.1, 1.0 / 0.3]])
        w = normalize_weights(raw)
        assert np.allclose(w, [[0.75, 0.25]])

    def test_weights_sum_to_one(self, cube):
        mesh, bvh = cube
        rigs = [ViewRig.yaw(a, scale=100.0) for a in (0.0, 1.0, 2.5)]
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1.5, 1.5, size=(40, 3))
        w = normalize_weights(occlusion_weights(bvh, mesh, rigs, pts))
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-9)
        assert (w >= 0).all()


class TestFuseOcclusionAware:
    def test_single_view_identity(self):
        t = np.array([[1.0, 2.0, 3.0]])
        fused = fuse_occlusion_aware(t, np.array([7.0]))
        assert np.allclose(fused, t[0])

    def test_two_view_exact_weights(self):
        tuples = np.array([[1.0, 0.0], [0.0, 1.0]])
        fused = fuse_occlusion_aware(tuples, np.array([1.0 / 0.1, 1.0 / 0.3]))
        assert np.allclose(fused, [0.75, 0.25])

    def test_equal_gaps_average(self):
        tuples = np.array([[2.0], [4.0]])
        fused = fuse_occlusion_aware(tuples, np.array([5.0, 5.0]))
        assert fused[0] == pytest.approx(3.0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        tuples = rng.normal(size=(4, 6, 10))
        w = rng.uniform(0.1, 2.0, size=(6, 4))
        fused = fuse_occlusion_aware(tuples, w)
        perm = [2, 0, 3, 1]
        fused_p = fuse_occlusion_aware(tuples[perm], w[:, perm])
        assert np.allclose(fused, fused_p)

    def test_convexity(self):
        rng = np.random.default_rng(2)
        tuples = rng.normal(size=(3, 5, 7))
        w = rng.uniform(0.0, 1.0, size=(5, 3))
        fused = fuse_occlusion_aware(tuples, w)
        assert (fused <= tuples.max(axis=0) + 1e-12).all()
        assert (fused >= tuples.min(axis=0) - 1e-12).all()

    def test_dominance(self):
        tuples = np.array([[1.0], [5.0]])
        for gap in (1e-1, 1e-2, 1e-3, 1e-5):
            fused = fuse_occlusion_aware(tuples, np.array([1.0 / gap, 1.0]))
            if gap <= 1e-5:
                assert abs(fused[0] - 1.0) < 1e-3

    @given(st.integers(1, 5), st.integers(1, 4))
    @settings(max_examples=50, deadline=None)
    def test_single_view_identity_property(self, dim, seed):
        rng = np.random.default_rng(seed)
        t = rng.normal(size=(1, dim))
        assert np.allclose(fuse_occlusion_aware(t, np.array([rng.uniform(0.1, 3)])), t[0])


class TestFuseAverage:
    def test_identity(self):
        t = np.array([[3.0, -1.0]])
        assert np.allclose(fuse_average(t), t[0])

    def test_identical_tuples(self):
        t = np.stack([np.array([1.0, 2.0])] * 3)
        assert np.allclose(fuse_average(t), [1.0, 2.0])

    def test_zero_one_average(self):
        t = np.array([[0.0], [1.0]])
        assert fuse_average(t)[0] == pytest.approx(0.5)


class TestFuseNormalBased:
    def test_front_facing_weight(self):
        # Antiparallel normal/view: tanh(pi).
        assert np.tanh(np.pi) == pytest.approx(0.99627, abs=1e-5)

    def test_weights_from_sphere(self, cube):
        mesh = make_icosphere(subdiv=2)
        bvh = build_bvh(mesh)
        rig = ViewRig.identity(scale=100.0)
        # Point in front of the sphere: nearest vertex faces the camera.
        w = normal_weights(bvh, mesh, [rig], [[0.0, 0.0, -1.2]])
        assert w[0, 0] == pytest.approx(np.tanh(np.pi), abs=1e-2)
        # Point behind: nearest vertex faces away -> tanh(0) = 0.
        w = normal_weights(bvh, mesh, [rig], [[0.0, 0.0, 1.2]])
        assert w[0, 0] == pytest.approx(0.0, abs=1e-2)

    def test_orthogonal(self):
        assert np.tanh(np.pi / 2) == pytest.approx(0.91715, abs=1e-5)

    def test_all_zero_falls_back_to_uniform(self):
        tuples = np.array([[1.0], [3.0]])
        fused = fuse_normal_based(tuples, np.zeros(2))
        assert fused[0] == pytest.approx(2.0)


class TestFuseBodyVisibility:
    def test_all_visible_equals_average(self):
        rng = np.random.default_rng(3)
        tuples = rng.normal(size=(3, 4, 5))
        vis = np.ones((4, 3), dtype=bool)
        fused, fallback = fuse_body_visibility(tuples, vis)
        assert np.allclose(fused, fuse_average(tuples))
        assert not fallback.any()

    def test_single_visible_view(self):
        tuples = np.array([[1.0, 1.0], [9.0, 9.0]])
        fused, fallback = fuse_body_visibility(tuples, np.array([False, True]))
        assert np.allclose(fused, [9.0, 9.0])
        assert not fallback

    def test_none_visible_fallback(self):
        tuples = np.array([[2.0], [4.0]])
        fused, fallback = fuse_body_visibility(tuples, np.array([False, False]))
        assert fused[0] == pytest.approx(3.0)
        assert fallback

    def test_visibility_geometry(self, cube):
        mesh, bvh = cube
        rig = ViewRig.identity(scale=100.0)
        # Nearest vertex to a point near the front face is visible; near the
        # back face it is blocked by the cube itself.
        vis_front = body_visibility(bvh, mesh, [rig], [[0.9, 0.9, -1.05]])
        vis_back = body_visibility(bvh, mesh, [rig], [[0.9, 0.9, 1.05]])
        assert vis_front[0, 0]
        assert not vis_back[0, 0]
