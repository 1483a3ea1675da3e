import numpy as np
import pytest

from sdfrecon.body import BodyParams, lbs_forward, make_procedural_template
from sdfrecon.calib import ViewRig
from sdfrecon.features import (
    FeatureImage,
    PIXEL_CHANNELS,
    VOLUME_CHANNELS,
    ViewSet,
    assemble_point_feature,
    load_feature_image,
    render_feature_image,
    sample_pixel_channels,
    sample_pixel_feature,
    sample_space_channels,
    sample_space_feature,
    save_feature_image,
    splat_volume,
    volume_bounds,
)
from sdfrecon.geometry import TriangleMesh, build_bvh

from meshes import make_cube, make_icosphere


@pytest.fixture(scope="module")
def cube_image():
    return render_feature_image(make_cube(), ViewRig.identity(scale=100.0))


class TestRenderFeatureImage:
    def test_front_face_depth_constant(self, cube_image):
        # The camera looks along +z, so it sees the z = -1 face at depth -1.
        depth = cube_image.channels[1]
        mask = cube_image.channels[0] > 0
        assert np.allclose(depth[mask], -1.0, atol=1e-12)
        assert np.isinf(depth[~mask]).all()

    def test_off_screen_all_zero_with_sentinel(self):
        rig = ViewRig(np.eye(3), np.array([50.0, 0.0, 0.0]), 100.0)
        img = render_feature_image(make_cube(), rig)
        assert img.channels[0].sum() == 0
        assert np.isinf(img.channels[5]).all()

    def test_sphere_center_normal(self):
        img = render_feature_image(make_icosphere(subdiv=3), ViewRig.identity(scale=100.0))
        n = img.channels[2:5, 256, 256]
        # Nearest surface point faces the camera: normal (0, 0, -1) in camera frame.
        assert n[2] == pytest.approx(-1.0, abs=1e-3)
        assert abs(n[0]) < 1e-2 and abs(n[1]) < 1e-2

    def test_distance_transform(self, cube_image):
        dt = cube_image.channels[5]
        mask = cube_image.channels[0] > 0
        assert np.allclose(dt[mask], 0.0)
        # One pixel outside the 200x200 square: distance 1/512.
        assert dt[256, 155] == pytest.approx(1.0 / 512)

    def test_sesf_roundtrip(self, cube_image, tmp_path):
        p = tmp_path / "img.sesf"
        save_feature_image(p, cube_image)
        back = load_feature_image(p)
        assert back.channels.shape == cube_image.channels.shape
        finite = np.isfinite(cube_image.channels)
        assert np.allclose(back.channels[finite], cube_image.channels[finite], atol=1e-6)
        assert np.isinf(back.channels[~finite]).all()


class TestSamplePixel:
    def test_integer_pixel_passthrough(self, cube_image):
        got = sample_pixel_channels(cube_image, 256.5, 256.5)[0]
        assert np.allclose(got, cube_image.channels[:, 256, 256])

    def test_midpoint_average(self):
        chans = np.zeros((1, 4, 4))
        chans[0, 1, 1] = 0.0
        chans[0, 1, 2] = 1.0
        img = FeatureImage(channels=chans, names=("x",))
        got = sample_pixel_channels(img, 2.0, 1.5)[0, 0]
        assert got == pytest.approx(0.5)

    def test_out_of_image_zero(self, cube_image):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(256, len(PIXEL_CHANNELS)))
        b = rng.normal(size=256)
        got = sample_pixel_feature(cube_image, (w, b), -5.0, 10.0)
        assert np.allclose(got, b)

    def test_background_depth_sanitized(self, cube_image):
        got = sample_pixel_channels(cube_image, 10.0, 10.0)[0]
        assert np.isfinite(got).all()

    def test_embedding_dimension(self, cube_image):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(256, len(PIXEL_CHANNELS)))
        b = rng.normal(size=256)
        out = sample_pixel_feature(cube_image, (w, b), 200.0, 200.0)
        assert out.shape == (1, 256)


class TestSplatVolume:
    def test_single_vertex_cell(self):
        mesh = make_cube()
        labels = np.zeros(mesh.n_vertices, dtype=int)
        vol = splat_volume(mesh, labels, bounds=(np.full(3, -2.0), np.full(3, 2.0)), resolution=4)
        # Each cube corner lands in its own cell of the 4^3 grid.
        filled = vol.values[..., 0] > 0
        assert filled.sum() == 8
        idx = np.argwhere(filled)[0]
        cell = vol.values[tuple(idx)]
        assert np.linalg.norm(cell[4:7]) == pytest.approx(1.0, abs=1e-9)

    def test_opposite_normals_cancel(self):
        verts = np.array([[1.0, 1.0, 1.0], [2.0, 1.0, 1.0], [0.0, -10.0, 0.0]])
        faces = np.array([[0, 1, 2]])
        mesh = TriangleMesh(verts, faces, clean=False)
        mesh._vertex_normals = np.array([[0.0, 0, 1], [0, 0, -1.0], [0, 0, 1.0]])
        vol = splat_volume(mesh, [0, 0, 0], bounds=(np.full(3, -16.0), np.full(3, 16.0)), resolution=2)
        cell = vol.values[1, 1, 1]  # the two z-opposed vertices share this cell
        assert cell[0] == 1.0
        assert np.allclose(cell[4:7], 0.0)

    def test_empty_cells_zero(self):
        mesh = make_cube()
        vol = splat_volume(mesh, np.zeros(8, int), resolution=8)
        empty = vol.values[..., 0] == 0
        assert empty.any()
        assert np.allclose(vol.values[empty], 0.0)

    def test_out_of_bounds_clamped(self):
        mesh = make_cube()
        with pytest.warns(UserWarning):
            splat_volume(mesh, np.zeros(8, int), bounds=(np.full(3, -0.5), np.full(3, 0.5)), resolution=4)


class TestSampleSpace:
    @pytest.fixture(scope="class")
    def vol(self):
        mesh = make_cube()
        return splat_volume(mesh, np.zeros(8, int), bounds=(np.full(3, -2.0), np.full(3, 2.0)), resolution=4)

    def test_cell_center_exact(self, vol):
        lo, hi = vol.bounds
        cell = (np.asarray(hi) - lo) / vol.resolution
        center = lo + (np.array([1, 1, 1]) + 0.5) * cell
        got = sample_space_channels(vol, center)[0]
        assert np.allclose(got, vol.values[1, 1, 1])

    def test_midpoint_average(self, vol):
        lo, hi = vol.bounds
        cell = (np.asarray(hi) - lo) / vol.resolution
        a = lo + (np.array([1, 1, 1]) + 0.5) * cell
        b = lo + (np.array([2, 1, 1]) + 0.5) * cell
        got = sample_space_channels(vol, (a + b) / 2)[0]
        expect = (vol.values[1, 1, 1] + vol.values[2, 1, 1]) / 2
        assert np.allclose(got, expect)

    def test_outside_zero(self, vol):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(128, VOLUME_CHANNELS))
        b = rng.normal(size=128)
        got = sample_space_feature(vol, (w, b), [50.0, 0.0, 0.0])
        assert np.allclose(got, b)

    def test_partition_of_unity(self, vol):
        # Interpolating the constant hit-flag field inside a filled region
        # reproduces the constant.
        filled = vol.values.copy()
        filled[..., 0] = 1.0
        from sdfrecon.features import FeatureVolume

        v2 = FeatureVolume(values=filled, bounds=vol.bounds)
        rng = np.random.default_rng(1)
        pts = rng.uniform(-1.0, 1.0, size=(50, 3))
        got = sample_space_channels(v2, pts)
        assert np.allclose(got[:, 0], 1.0, atol=1e-12)


class TestAssemble:
    @pytest.fixture(scope="class")
    def scene(self):
        model = make_procedural_template(seed=0)
        body = lbs_forward(model, BodyParams.zeros(model))
        bvh = build_bvh(body)
        labels = np.argmax(model.skin_weights, axis=1)
        vol = splat_volume(body, labels, bounds=volume_bounds(body))
        rigs = [ViewRig.yaw(a, scale=220.0) for a in np.deg2rad([0, 120, 240])]
        images = [render_feature_image(body, rig) for rig in rigs]
        return ViewSet(body_mesh=body, body_bvh=bvh, volume=vol, rigs=rigs, images=images)

    def test_on_body_distance_near_zero(self, scene):
        x = scene.body_mesh.vertices[100]
        out = assemble_point_feature(scene, x)
        assert abs(out["d_body"][0]) < 1e-9
        assert abs(out["denc"][0, 0]) < 1e-9

    def test_single_view_tuple_count(self, scene):
        single = ViewSet(scene.body_mesh, scene.body_bvh, scene.volume,
                         scene.rigs[:1], scene.images[:1])
        out = assemble_point_feature(single, np.zeros(3))
        assert out["raw2d"].shape[0] == 1
        assert out["z"].shape[0] == 1

    def test_centroid_shared_distance_distinct_depth(self, scene):
        x = scene.body_mesh.vertices.mean(axis=0)
        out = assemble_point_feature(scene, x)
        assert np.ptp(out["z"][:, 0, 0]) > 1e-6 or len(scene.rigs) == 1
        # d' is computed once in model space: identical across views by construction.
        assert out["denc"].shape == (1, 13)

    def test_normal_magnitude_view_invariant(self, scene):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-0.5, 0.5, size=(20, 3))
        out = assemble_point_feature(scene, pts)
        norms = np.linalg.norm(out["normal"], axis=2)
        assert np.allclose(norms, norms[0], atol=1e-12)

    def test_zero_channels_still_finite(self, scene):
        zero_images = [FeatureImage(channels=np.zeros_like(im.channels)) for im in scene.images]
        views = ViewSet(scene.body_mesh, scene.body_bvh, scene.volume, scene.rigs, zero_images)
        out = assemble_point_feature(views, np.zeros((4, 3)))
        for key in ("raw2d", "raw3d", "denc", "normal", "z"):
            assert np.isfinite(out[key]).all()
