import numpy as np
import pytest

from sdfrecon.body import BodyParams, lbs_forward, make_procedural_template, posed_joints
from sdfrecon.calib import (
    CalibrationError,
    FitConfig,
    Observation,
    ViewRig,
    _JointProblem,
    init_shared_model,
    load_observation,
    project_orthographic,
    rasterize_silhouette,
    read_pgm,
    refine_joint,
    save_observation,
    silhouette_iou,
    write_pgm,
)
from sdfrecon.rotations import axis_angle_to_matrix, geodesic_angle

from meshes import make_cube, make_icosphere


@pytest.fixture(scope="module")
def model():
    return make_procedural_template(seed=0)


def synthesize(model, gt_params, angles, scale=220.0, hidden_views=()):
    """Ground-truth rigs plus observations rendered from the posed body."""
    mesh = lbs_forward(model, gt_params)
    joints = posed_joints(model, gt_params)
    rigs = [ViewRig.yaw(a, scale=scale) for a in angles]
    obs = []
    for k, rig in enumerate(rigs):
        u, v, _ = project_orthographic(rig, joints)
        vis = np.zeros(len(joints), bool) if k in hidden_views else np.ones(len(joints), bool)
        obs.append(Observation(
            keypoints=np.stack([u, v], axis=1),
            visible=vis,
            mask=rasterize_silhouette(mesh, rig),
            joint_names=list(model.joint_names),
        ))
    return rigs, obs


def jitter_rigs(rigs, rng, rot_deg, trans_frac, diag):
    out = []
    for rig in rigs:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        pert = axis_angle_to_matrix(axis * np.deg2rad(rot_deg))
        t = rng.normal(size=3)
        t[2] = 0.0  # orthographic depth offset is unobservable
        t *= trans_frac * diag / max(np.linalg.norm(t), 1e-12)
        out.append(ViewRig(pert @ rig.rotation, rig.translation + t, rig.ortho_scale))
    return out


def relative_errors(rigs, gt_rigs, diag):
    rot, tr = [], []
    for i in range(1, len(rigs)):
        ra = rigs[i].rotation @ rigs[0].rotation.T
        rb = gt_rigs[i].rotation @ gt_rigs[0].rotation.T
        rot.append(np.rad2deg(geodesic_angle(ra, rb)))
        ta = rigs[i].translation - ra @ rigs[0].translation
        tb = gt_rigs[i].translation - rb @ gt_rigs[0].translation
        tr.append(np.linalg.norm(ta - tb) / diag)
    return max(rot), max(tr)


class TestProjection:
    def test_identity_center(self):
        rig = ViewRig.identity(scale=1.0)
        assert project_orthographic(rig, [0, 0, 0]) == (256.0, 256.0, 0.0)

    def test_unit_x_scale_100(self):
        rig = ViewRig.identity(scale=100.0)
        u, v, z = project_orthographic(rig, [1, 0, 0])
        assert (u, v, z) == (356.0, 256.0, 0.0)

    def test_yaw_90_maps_z_to_x(self):
        a = project_orthographic(ViewRig.yaw(np.pi / 2, scale=100.0), [0, 0, 1])
        b = project_orthographic(ViewRig.identity(scale=100.0), [1, 0, 0])
        assert np.allclose(a[:2], b[:2], atol=1e-9)

    def test_batch_shape(self):
        rig = ViewRig.identity()
        u, v, z = project_orthographic(rig, np.zeros((5, 3)))
        assert u.shape == (5,)

    def test_invalid_scale(self):
        with pytest.raises(ValueError):
            ViewRig.identity(scale=0.0)


class TestSilhouette:
    def test_cube_square(self):
        mask = rasterize_silhouette(make_cube(), ViewRig.identity(scale=100.0))
        assert mask.sum() == 200 * 200
        rows = np.nonzero(mask.any(axis=1))[0]
        cols = np.nonzero(mask.any(axis=0))[0]
        assert rows.min() == 156 and rows.max() == 355
        assert cols.min() == 156 and cols.max() == 355

    def test_off_screen(self):
        rig = ViewRig(np.eye(3), np.array([100.0, 0, 0]), 100.0)
        assert rasterize_silhouette(make_cube(), rig).sum() == 0

    def test_icosphere_disk_area(self):
        mask = rasterize_silhouette(make_icosphere(subdiv=3), ViewRig.identity(scale=100.0))
        assert abs(mask.sum() - np.pi * 100 ** 2) < 0.02 * np.pi * 100 ** 2

    def test_iou_identical(self):
        m = np.zeros((64, 64), np.uint8)
        m[10:30, 10:30] = 1
        assert silhouette_iou(m, m) == 1.0

    def test_iou_disjoint(self):
        a = np.zeros((64, 64), np.uint8)
        b = np.zeros((64, 64), np.uint8)
        a[:10], b[-10:] = 1, 1
        assert silhouette_iou(a, b) == 0.0

    def test_iou_shifted_square(self):
        a = np.zeros((512, 512), np.uint8)
        b = np.zeros((512, 512), np.uint8)
        a[100:300, 100:300] = 1
        b[100:300, 200:400] = 1
        assert silhouette_iou(a, b) == pytest.approx(1.0 / 3.0)


class TestInitSharedModel:
    def test_single_view_passthrough(self, model):
        p = BodyParams.zeros(model)
        p.theta[0] = [0.1, 0.2, 0.3]
        rig = ViewRig.yaw(0.5)
        shared, rigs = init_shared_model([(p, rig)])
        assert np.array_equal(shared.theta, p.theta)
        assert np.array_equal(rigs[0].rotation, rig.rotation)

    def test_identical_fits(self, model):
        p = BodyParams.zeros(model)
        p.beta[:] = 0.3
        p.theta[2] = [0.0, 0.1, 0.0]
        fits = [(p.copy(), ViewRig.yaw(a)) for a in (0.0, 1.0)]
        shared, rigs = init_shared_model(fits, model)
        assert np.allclose(shared.beta, p.beta)
        assert np.allclose(shared.theta[2], p.theta[2], atol=1e-12)

    def test_symmetric_rotations_cancel(self, model):
        a = BodyParams.zeros(model)
        b = BodyParams.zeros(model)
        a.theta[5] = [0, 0, np.deg2rad(10)]
        b.theta[5] = [0, 0, -np.deg2rad(10)]
        shared, _ = init_shared_model([(a, ViewRig.yaw(0.0)), (b, ViewRig.yaw(1.0))], model)
        assert np.allclose(shared.theta[5], 0.0, atol=1e-12)

    def test_root_folded_into_rig(self, model):
        # Projections of the shared model under folded rigs match the
        # original per-view fits.
        p = BodyParams.zeros(model)
        p.theta[0] = [0.0, 0.4, 0.0]
        p.trans = np.array([0.05, 0.0, -0.02])
        rig = ViewRig.yaw(0.7, scale=200.0)
        fits = [(p.copy(), rig.copy()), (p.copy(), ViewRig.yaw(2.0, scale=200.0))]
        shared, rigs = init_shared_model(fits, model)
        joints_orig = posed_joints(model, p)
        joints_shared = posed_joints(model, shared)
        u0, v0, _ = project_orthographic(rig, joints_orig)
        u1, v1, _ = project_orthographic(rigs[0], joints_shared)
        assert np.allclose(u0, u1, atol=1e-9)
        assert np.allclose(v0, v1, atol=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            init_shared_model([])


class TestRefineJoint:
    def test_ground_truth_fixed_point(self, model):
        rng = np.random.default_rng(0)
        gt = BodyParams.zeros(model)
        gt.theta[1:] = rng.normal(scale=0.05, size=(15, 3))
        rigs, obs = synthesize(model, gt, np.deg2rad([0, 120, 240]))
        cfg = FitConfig(max_outer=4)
        params, out_rigs, report = refine_joint(model, gt.copy(), rigs, obs, cfg)
        assert max(report.keypoint_rmse) < 1e-9
        assert np.allclose(params.theta, gt.theta, atol=1e-9)
        for r_out, r_in in zip(out_rigs, rigs):
            assert geodesic_angle(r_out.rotation, r_in.rotation) < 1e-9

    def test_jittered_rig_recovery(self, model):
        rng = np.random.default_rng(5)
        gt = BodyParams.zeros(model)
        gt.theta[1:] = rng.normal(scale=0.08, size=(15, 3))
        gt.beta = rng.normal(scale=0.5, size=model.n_shape)
        gt_rigs, obs = synthesize(model, gt, np.deg2rad([0, 120, 240]))
        diag = lbs_forward(model, gt).bbox_diagonal()
        init = jitter_rigs(gt_rigs, rng, rot_deg=5.0, trans_frac=0.05, diag=diag)
        params, rigs, report = refine_joint(model, gt.copy(), init, obs, FitConfig(max_outer=12))
        rot_err, trans_err = relative_errors(rigs, gt_rigs, diag)
        assert rot_err < 0.5
        assert trans_err < 0.005
        assert np.mean(report.silhouette_iou) > 0.98

    def test_keypoint_free_view(self, model):
        rng = np.random.default_rng(9)
        gt = BodyParams.zeros(model)
        gt.theta[1:] = rng.normal(scale=0.05, size=(15, 3))
        gt_rigs, obs = synthesize(model, gt, np.deg2rad([0, 120, 240]), hidden_views=(1,))
        init = [r.copy() for r in gt_rigs]
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        init[1] = ViewRig(axis_angle_to_matrix(axis * np.deg2rad(4.0)) @ gt_rigs[1].rotation,
                          gt_rigs[1].translation, gt_rigs[1].ortho_scale)
        params, rigs, report = refine_joint(model, gt.copy(), init, obs, FitConfig(max_outer=10))
        assert report.keypoint_free_views == ["view 1: keypoint-free view"]
        err = geodesic_angle(rigs[1].rotation @ rigs[0].rotation.T,
                             gt_rigs[1].rotation @ gt_rigs[0].rotation.T)
        assert np.rad2deg(err) < 1.5
        assert np.isnan(report.keypoint_rmse[1])

    def test_objective_never_worse(self, model):
        rng = np.random.default_rng(2)
        gt = BodyParams.zeros(model)
        gt.theta[1:] = rng.normal(scale=0.05, size=(15, 3))
        gt_rigs, obs = synthesize(model, gt, np.deg2rad([0, 150]))
        diag = lbs_forward(model, gt).bbox_diagonal()
        init = jitter_rigs(gt_rigs, rng, 4.0, 0.04, diag)
        cfg = FitConfig(max_outer=3)
        before = _JointProblem(model, gt.copy(), init, obs, cfg).objective()
        params, rigs, _ = refine_joint(model, gt.copy(), init, obs, cfg)
        after = _JointProblem(model, params, rigs, obs, cfg).objective()
        assert after <= before + 1e-12

    def test_gauge_relative_rotations(self, model):
        # Two global re-parameterizations of the same scene must agree on all
        # relative rotations.
        rng = np.random.default_rng(4)
        gt = BodyParams.zeros(model)
        gt.theta[1:] = rng.normal(scale=0.05, size=(15, 3))
        base_rigs, obs = synthesize(model, gt, np.deg2rad([0, 120, 240]))
        diag = lbs_forward(model, gt).bbox_diagonal()
        init = jitter_rigs(base_rigs, rng, 2.0, 0.02, diag)
        cfg = FitConfig(max_outer=6)
        solutions = []
        for aa in ([0.0, 0.0, 0.0], [0.2, -0.3, 0.4]):
            g = axis_angle_to_matrix(np.asarray(aa))
            rigs_g = [ViewRig(r.rotation @ g.T, r.translation, r.ortho_scale) for r in init]
            # the same scene seen with a globally rotated model frame
            obs_g = obs
            params, rigs, _ = refine_joint(model, gt.copy(), rigs_g, obs_g, cfg)
            solutions.append(rigs)
        for i in range(1, 3):
            rel_a = solutions[0][i].rotation @ solutions[0][0].rotation.T
            rel_b = solutions[1][i].rotation @ solutions[1][0].rotation.T
            assert geodesic_angle(rel_a, rel_b) < 1e-6

    def test_unsolvable(self, model):
        obs = [Observation(keypoints=np.zeros((16, 2)), visible=np.zeros(16, bool),
                           mask=np.zeros((512, 512), np.uint8))]
        with pytest.raises(CalibrationError):
            refine_joint(model, BodyParams.zeros(model), [ViewRig.identity(scale=200.0)], obs)


class TestObservationIO:
    def test_pgm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        mask = (rng.random((48, 64)) > 0.5).astype(np.uint8)
        p = tmp_path / "m.pgm"
        write_pgm(p, mask)
        assert np.array_equal(read_pgm(p), mask)

    def test_observation_roundtrip(self, tmp_path, model):
        rng = np.random.default_rng(1)
        obs = Observation(
            keypoints=rng.uniform(0, 512, size=(16, 2)),
            visible=rng.random(16) > 0.3,
            mask=(rng.random((32, 32)) > 0.5).astype(np.uint8),
            joint_names=list(model.joint_names),
        )
        save_observation(tmp_path / "view_0", obs)
        back = load_observation(tmp_path / "view_0", model.joint_names)
        assert np.allclose(back.keypoints, obs.keypoints)
        assert np.array_equal(back.visible, obs.visible)
        assert np.array_equal(back.mask, obs.mask)
