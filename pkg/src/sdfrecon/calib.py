"""Self-calibration of uncalibrated orthographic views.

One shared body model plus per-view rigid motions are fitted to all views at
once: Gauss-Newton with analytic Jacobians on keypoint reprojection,
alternated with finite-difference coordinate refinement of silhouette IoU on
low-resolution rasters. The first view's rotation is held at its
initialization to fix the shared-model/rig gauge.

Observations live in ``view_k/keypoints.json`` (joint name -> [u, v,
visible]) and ``view_k/mask.pgm`` (binary P5); fit reports serialize to JSON.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import _kernels
from .body import BodyModel, BodyParams, joint_world_transforms, lbs_forward, posed_joints
from .geometry import TriangleMesh
from .rotations import (
    axis_angle_to_matrix,
    axis_angle_to_quat,
    quat_mean_hemispherized,
    quat_to_axis_angle,
    rotation_jacobian,
)

__all__ = [
    "ViewRig",
    "Observation",
    "FitConfig",
    "FitReport",
    "project_orthographic",
    "rasterize_silhouette",
    "render_depth_buffers",
    "silhouette_iou",
    "init_shared_model",
    "refine_joint",
    "save_observation",
    "load_observation",
    "write_pgm",
    "read_pgm",
]


@dataclass
class ViewRig:
    """Per-view rigid motion plus orthographic scale.

    Camera coordinates are R @ x + T; pixel u = scale * cam.x + width/2,
    v = scale * cam.y + height/2, and depth Z = cam.z (smaller Z is closer
    to the image).
    """

    rotation: np.ndarray
    translation: np.ndarray
    ortho_scale: float
    image_size: tuple = (512, 512)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.ortho_scale <= 0:
            raise ValueError("ortho_scale must be positive")
        rtr = self.rotation.T @ self.rotation
        if not np.allclose(rtr, np.eye(3), atol=1e-8) or np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation must be orthonormal with det +1")

    @classmethod
    def identity(cls, scale=1.0, image_size=(512, 512)):
        return cls(np.eye(3), np.zeros(3), scale, image_size)

    @classmethod
    def yaw(cls, angle, scale=1.0, image_size=(512, 512), translation=None):
        """Camera orbited by ``angle`` about the vertical (y) axis."""
        c, s = np.cos(angle), np.sin(angle)
        rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        t = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)
        return cls(rot, t, scale, image_size)

    def scaled_to(self, res: int):
        """Same view at a square ``res`` raster (for low-res IoU fitting)."""
        factor = res / max(self.image_size)
        return ViewRig(self.rotation.copy(), self.translation.copy(),
                       self.ortho_scale * factor, (res, res))

    def copy(self):
        return ViewRig(self.rotation.copy(), self.translation.copy(),
                       self.ortho_scale, tuple(self.image_size))

    def to_dict(self):
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "ortho_scale": self.ortho_scale,
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["rotation"]), np.asarray(d["translation"]),
                   float(d["ortho_scale"]), tuple(d["image_size"]))


@dataclass
class Observation:
    """Per-view 2D evidence: joint keypoints with visibility, and a mask."""

    keypoints: np.ndarray  # (J, 2) pixels
    visible: np.ndarray    # (J,) bool
    mask: np.ndarray       # (H, W) uint8 in {0, 1}
    joint_names: list = field(default_factory=list)


def project_orthographic(rig: ViewRig, x):
    """Project point(s): returns (u, v, Z) arrays (or scalars for one point)."""
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    cam = pts @ rig.rotation.T + rig.translation
    w, h = rig.image_size
    u = rig.ortho_scale * cam[:, 0] + w / 2.0
    v = rig.ortho_scale * cam[:, 1] + h / 2.0
    z = cam[:, 2]
    if np.asarray(x).ndim == 1:
        return float(u[0]), float(v[0]), float(z[0])
    return u, v, z


def render_depth_buffers(mesh: TriangleMesh, rig: ViewRig):
    """Z-buffer rasterization of the mesh under an orthographic rig.

    Returns (zbuf, fid, bary_u, bary_v): camera depth per pixel (+inf where
    nothing is hit), covering face index (-1 background) and the first two
    barycentric weights for attribute interpolation.
    """
    w, h = rig.image_size
    cam = mesh.vertices @ rig.rotation.T + rig.translation
    pts2d = np.empty((len(cam), 2))
    pts2d[:, 0] = rig.ortho_scale * cam[:, 0] + w / 2.0
    pts2d[:, 1] = rig.ortho_scale * cam[:, 1] + h / 2.0
    zbuf = np.full((h, w), np.inf)
    fid = np.full((h, w), -1, dtype=np.int64)
    bu = np.zeros((h, w))
    bv = np.zeros((h, w))
    if mesh.n_faces:
        _kernels.rasterize_faces(
            np.ascontiguousarray(pts2d), np.ascontiguousarray(cam[:, 2]),
            mesh.faces, w, h, zbuf, fid, bu, bv,
        )
    return zbuf, fid, bu, bv


def rasterize_silhouette(mesh: TriangleMesh, rig: ViewRig):
    """Binary mask: 1 where the orthographic ray through the pixel center hits."""
    _, fid, _, _ = render_depth_buffers(mesh, rig)
    return (fid >= 0).astype(np.uint8)


def silhouette_iou(a, b) -> float:
    """Intersection over union of two binary masks (1.0 when both empty)."""
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def init_shared_model(per_view_fits, model: BodyModel | None = None):
    """Average per-view fits into one shared model plus per-view rigs.

    Shape and expression coefficients are arithmetic means; each non-root
    joint rotation is the hemispherized unit-quaternion mean. Every view
    keeps its own global orientation: the per-view root rotation and
    translation are folded into that view's rig, and the shared root pose is
    zeroed. Passing ``model`` supplies the exact root pivot for the folding;
    without it the pivot is the origin and refinement absorbs the offset.
    """
    if not per_view_fits:
        raise ValueError("need at least one per-view fit")
    if len(per_view_fits) == 1:
        params, rig = per_view_fits[0]
        return params.copy(), [rig.copy()]
    all_params = [p for p, _ in per_view_fits]
    n_joints = all_params[0].theta.shape[0]
    shared = BodyParams(
        beta=np.mean([p.beta for p in all_params], axis=0),
        theta=np.zeros((n_joints, 3)),
        phi=np.mean([p.phi for p in all_params], axis=0),
    )
    for j in range(1, n_joints):
        quats = [axis_angle_to_quat(p.theta[j]) for p in all_params]
        shared.theta[j] = quat_to_axis_angle(quat_mean_hemispherized(quats))

    rigs = []
    for params, rig in per_view_fits:
        r_root = axis_angle_to_matrix(params.theta[0])
        root = model.rest_joints(params.beta)[0] if model is not None else np.zeros(3)
        new_rot = rig.rotation @ r_root
        # Fold the per-view root pivot and translation into T so the shared
        # zero-root model projects identically: cam = R(R0(x-r0)+r0+t) + T.
        new_t = rig.rotation @ ((np.eye(3) - r_root) @ root + params.trans) + rig.translation
        rigs.append(ViewRig(new_rot, new_t, rig.ortho_scale, tuple(rig.image_size)))
    return shared, rigs


@dataclass
class FitConfig:
    max_outer: int = 50
    tol: float = 1e-6
    raster_res: int = 128
    iou_weight: float = 100.0
    fd_rot_step: float = 0.02
    fd_trans_step: float = 0.02
    fd_scale_rel_step: float = 0.01
    fd_coef_step: float = 0.05
    gn_max_inner: int = 8
    min_visible_for_gn: int = 4


@dataclass
class FitReport:
    keypoint_rmse: list
    silhouette_iou: list
    keypoint_free_views: list
    iterations: int
    converged: bool
    objective: float

    def to_json(self):
        return json.dumps(asdict(self), indent=2)


class CalibrationError(RuntimeError):
    pass


class _JointProblem:
    """Parameter packing and objective evaluation for the shared fit.

    Unknowns: beta, theta (all joints), phi, and per view a rotation
    increment (view 0 excluded: gauge), translation and log ortho scale.
    """

    def __init__(self, model, shared, rigs, observations, config):
        self.model = model
        self.params = shared.copy()
        self.rigs = [r.copy() for r in rigs]
        self.obs = observations
        self.cfg = config
        self.n_views = len(rigs)
        self.nb = model.n_shape
        self.nj = model.n_joints
        self.ne = model.n_expr
        # Pre-shrunk observation masks for the low-res IoU term.
        factor = max(1, max(rigs[0].image_size) // config.raster_res)
        self.small_masks = [o.mask[factor // 2::factor, factor // 2::factor] for o in observations]
        self._raster_cache = [None] * self.n_views
        # d(rest joints)/d(beta): (K_s, J, 3)
        self.djoint_dbeta = np.stack(
            [model.joint_regressor @ model.shape_basis[b] for b in range(self.nb)]
        ) if self.nb else np.zeros((0, self.nj, 3))

    # ---- objective -------------------------------------------------------

    def keypoint_sq(self, view, joints=None):
        """Mean squared pixel residual over visible keypoints of one view."""
        o = self.obs[view]
        if not o.visible.any():
            return 0.0
        if joints is None:
            joints = posed_joints(self.model, self.params)
        u, v, _ = project_orthographic(self.rigs[view], joints)
        du = u[o.visible] - o.keypoints[o.visible, 0]
        dv = v[o.visible] - o.keypoints[o.visible, 1]
        return float(np.mean(du ** 2 + dv ** 2))

    def view_iou(self, view, mesh=None):
        if mesh is None:
            mesh = lbs_forward(self.model, self.params)
        raster = rasterize_silhouette(mesh, self._lowres_rig(self.rigs[view]))
        return silhouette_iou(raster, self.small_masks[view])

    def _lowres_rig(self, rig):
        """Low-res rig whose pixel centers coincide with the subsampled mask.

        The observed mask keeps source pixels f*i + f//2; shifting the
        principal point by (f/2 - f//2 - 0.5)/f pixels makes the low-res
        raster sample exactly those centers, so a perfect fit reaches IoU 1.
        """
        res = self.cfg.raster_res
        small = rig.scaled_to(res)
        f = max(rig.image_size) / res
        delta = (f / 2.0 - f // 2 - 0.5) / f
        small.translation = small.translation + np.array(
            [delta / small.ortho_scale, delta / small.ortho_scale, 0.0]
        )
        return small

    def objective(self):
        mesh = lbs_forward(self.model, self.params)
        joints = posed_joints(self.model, self.params)
        kp = sum(self.keypoint_sq(v, joints) for v in range(self.n_views))
        iou = np.mean([self.view_iou(v, mesh) for v in range(self.n_views)])
        return kp + self.cfg.iou_weight * (1.0 - iou)

    # ---- Gauss-Newton on keypoints ---------------------------------------

    def _gn_views(self):
        return [v for v in range(self.n_views)
                if self.obs[v].visible.sum() >= self.cfg.min_visible_for_gn]

    def pack_count(self):
        return self.nb + 3 * self.nj + self.n_views * 7

    def _rig_slices(self):
        """(rot_slice, trans_slice, scale_index) per view."""
        base = self.nb + 3 * self.nj
        out = []
        cursor = base
        for v in range(self.n_views):
            rot = slice(cursor, cursor + 3)
            cursor += 3
            trans = slice(cursor, cursor + 3)
            cursor += 3
            out.append((rot, trans, cursor))
            cursor += 1
        return out

    def gauss_newton_step(self, subset="all"):
        """One damped GN step on the stacked keypoint residuals.

        ``subset="rigs"`` freezes the body and solves per-view motion only;
        that problem is small and well-posed, so it is run first to land in
        the right basin before body parameters are released. Returns True
        when a step improving the combined objective was taken.
        """
        views = self._gn_views()
        if not views:
            return False
        r_world, t_world, rest = joint_world_transforms(self.model, self.params)
        joints = t_world
        # World-frame rotation generators per (joint, axis-angle component).
        gens = np.empty((self.nj, 3, 3, 3))
        for j in range(self.nj):
            par = self.model.parents[j]
            r_par = np.eye(3) if par < 0 else r_world[par]
            dr = rotation_jacobian(self.params.theta[j])
            r_local_t = axis_angle_to_matrix(self.params.theta[j]).T
            for a in range(3):
                gens[j, a] = r_par @ dr[a] @ r_local_t @ r_par.T
        # descendants[j] = joints strictly below j.
        desc = [[] for _ in range(self.nj)]
        for k in range(self.nj):
            p = self.model.parents[k]
            while p >= 0:
                desc[p].append(k)
                p = self.model.parents[p]

        # d joints / d theta: (J_joints, 3, nj, 3)
        djoint_dtheta = np.zeros((self.nj, 3, self.nj, 3))
        for j in range(self.nj):
            for a in range(3):
                for k in desc[j]:
                    djoint_dtheta[k, :, j, a] = gens[j, a] @ (joints[k] - joints[j])
        # d joints / d beta through the rest skeleton (rotations held fixed).
        djoint_dbeta = np.zeros((self.nj, 3, self.nb))
        for b in range(self.nb):
            dj = np.zeros((self.nj, 3))
            drest = self.djoint_dbeta[b]
            dj[0] = drest[0]
            for k in range(1, self.nj):
                par = self.model.parents[k]
                dj[k] = dj[par] + r_world[par] @ (drest[k] - drest[par])
            djoint_dbeta[:, :, b] = dj

        slices = self._rig_slices()
        n_par = self.pack_count()
        rows = []
        resid = []
        for v in views:
            o = self.obs[v]
            rig = self.rigs[v]
            vis = np.where(o.visible)[0]
            cam = joints @ rig.rotation.T + rig.translation
            s = rig.ortho_scale
            w, h = rig.image_size
            u = s * cam[:, 0] + w / 2.0
            vv = s * cam[:, 1] + h / 2.0
            rot_sl, trans_sl, scale_ix = slices[v]
            for k in vis:
                for comp, proj in ((0, u[k]), (1, vv[k])):
                    row = np.zeros(n_par)
                    # d proj / d joint position: s * R[comp]
                    dproj_dx = s * rig.rotation[comp]
                    row[: self.nb] = dproj_dx @ djoint_dbeta[k]
                    row[self.nb: self.nb + 3 * self.nj] = (
                        dproj_dx @ djoint_dtheta[k].reshape(3, -1)
                    )
                    # Left-increment: cam = exp(d) R x + T -> dcam = -hat(Rx) d
                    y = cam[k]
                    dcam = np.array([
                        [0.0, y[2], -y[1]],
                        [-y[2], 0.0, y[0]],
                        [y[1], -y[0], 0.0],
                    ])
                    row[rot_sl] = s * dcam[comp]
                    row[trans_sl.start + comp] = s
                    row[scale_ix] = cam[k, comp] * s  # d/d log s
                    rows.append(row)
                    resid.append(proj - o.keypoints[k, comp])
        jac = np.asarray(rows)
        res = np.asarray(resid)
        if subset == "rigs":
            # Body frozen: no gauge ambiguity, every rig param free.
            jac[:, : self.nb + 3 * self.nj] = 0.0
        else:
            # Joint problem: hold view 0's rotation to fix the shared-model /
            # rig decomposition gauge.
            jac[:, slices[0][0]] = 0.0
        jtj = jac.T @ jac
        jtr = jac.T @ res
        before = float(res @ res)
        lam = 1e-6 * max(np.trace(jtj) / n_par, 1e-12)
        for _ in range(8):
            try:
                delta = np.linalg.solve(jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-12)), -jtr)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            delta = self._trust_region(delta)
            saved = self._snapshot()
            self._apply_delta(delta, slices)
            after = self.keypoint_total()
            if np.isfinite(after) and after < before * (1.0 - 1e-12):
                return True
            self._restore(saved)
            lam *= 10
        return False

    def keypoint_total(self):
        """Summed squared keypoint residual over the GN-eligible views."""
        joints = posed_joints(self.model, self.params)
        total = 0.0
        for v in self._gn_views():
            o = self.obs[v]
            u, vv, _ = project_orthographic(self.rigs[v], joints)
            du = u[o.visible] - o.keypoints[o.visible, 0]
            dv = vv[o.visible] - o.keypoints[o.visible, 1]
            total += float(du @ du + dv @ dv)
        return total

    def _trust_region(self, delta):
        """Cap body-parameter steps so one GN jump cannot leave the basin."""
        cap = 1.0
        th = np.abs(delta[self.nb: self.nb + 3 * self.nj])
        if th.size and th.max() > 0.2:
            cap = min(cap, 0.2 / th.max())
        be = np.abs(delta[: self.nb])
        if be.size and be.max() > 0.5:
            cap = min(cap, 0.5 / be.max())
        return delta * cap

    def _snapshot(self):
        return (self.params.copy(), [r.copy() for r in self.rigs])

    def _restore(self, saved):
        self.params, self.rigs = saved[0].copy(), [r.copy() for r in saved[1]]

    def _apply_delta(self, delta, slices):
        self.params.beta = self.params.beta + delta[: self.nb]
        self.params.theta = self.params.theta + delta[self.nb: self.nb + 3 * self.nj].reshape(self.nj, 3)
        for v, (rot_sl, trans_sl, scale_ix) in enumerate(slices):
            rig = self.rigs[v]
            step = delta[rot_sl]
            if np.any(step):
                rig.rotation = axis_angle_to_matrix(step) @ rig.rotation
            rig.translation = rig.translation + delta[trans_sl]
            rig.ortho_scale = rig.ortho_scale * float(np.exp(delta[scale_ix]))

    # ---- coordinate refinement on silhouette IoU --------------------------

    def _coords(self, h):
        """(getter, setter, step) triple per refinable coordinate."""
        out = []
        for b in range(self.nb):
            out.append(("beta", b, self.cfg.fd_coef_step * h))
        for j in range(self.nj):
            for a in range(3):
                out.append(("theta", (j, a), self.cfg.fd_rot_step * h))
        for e in range(self.ne):
            out.append(("phi", e, self.cfg.fd_coef_step * h))
        for v in range(self.n_views):
            if v != 0:
                for a in range(3):
                    out.append(("rot", (v, a), self.cfg.fd_rot_step * h))
            for a in range(3):
                out.append(("trans", (v, a), self.cfg.fd_trans_step * h))
            out.append(("scale", v, self.cfg.fd_scale_rel_step * h))
        return out

    def _nudge(self, kind, which, step):
        if kind == "beta":
            self.params.beta[which] += step
        elif kind == "theta":
            self.params.theta[which] += step
        elif kind == "phi":
            self.params.phi[which] += step
        elif kind == "rot":
            v, a = which
            aa = np.zeros(3)
            aa[a] = step
            self.rigs[v].rotation = axis_angle_to_matrix(aa) @ self.rigs[v].rotation
        elif kind == "trans":
            v, a = which
            self.rigs[v].translation[a] += step
        elif kind == "scale":
            self.rigs[which].ortho_scale *= float(np.exp(step))

    def _coord_value(self, kind, which):
        if kind == "beta":
            return self.params.beta[which]
        if kind == "theta":
            return self.params.theta[which]
        if kind == "phi":
            return self.params.phi[which]
        if kind == "rot":
            return self.rigs[which[0]].rotation.copy()
        if kind == "trans":
            return self.rigs[which[0]].translation[which[1]]
        return self.rigs[which].ortho_scale

    def _coord_set(self, kind, which, value):
        if kind == "beta":
            self.params.beta[which] = value
        elif kind == "theta":
            self.params.theta[which] = value
        elif kind == "phi":
            self.params.phi[which] = value
        elif kind == "rot":
            self.rigs[which[0]].rotation = value
        elif kind == "trans":
            self.rigs[which[0]].translation[which[1]] = value
        else:
            self.rigs[which].ortho_scale = value

    def fd_sweep(self, h):
        """Try +/- steps on every coordinate; keep combined improvements.

        Returns the total decrease of the combined objective.
        """
        start = current = self.objective()
        for kind, which, step in self._coords(h):
            best_obj = current
            best_sign = 0
            saved = self._coord_value(kind, which)
            for sign in (+1.0, -1.0):
                self._nudge(kind, which, sign * step)
                obj = self.objective()
                self._coord_set(kind, which, saved)
                if obj < best_obj - 1e-15:
                    best_obj = obj
                    best_sign = sign
            if best_sign != 0:
                self._nudge(kind, which, best_sign * step)
                current = best_obj
        return start - current


def refine_joint(model, shared, rigs, observations, config=None):
    """Optimize shared body params and per-view rigs against all views.

    Alternates (a) damped Gauss-Newton with analytic Jacobians on the summed
    squared keypoint reprojection residual and (b) finite-difference
    coordinate refinement of 1 - mean IoU on low-resolution rasters; both
    stages only accept steps that improve the combined objective, so the
    returned state is never worse than the input. Stops when the combined
    objective improves by less than ``config.tol`` over an outer iteration,
    or after ``config.max_outer`` iterations; a final Gauss-Newton polish
    then tightens the keypoint optimum.
    """
    config = config or FitConfig()
    if len(rigs) != len(observations) or not rigs:
        raise ValueError("need one observation per rig")
    if all(o.visible.sum() < config.min_visible_for_gn for o in observations) and \
       all(o.mask.sum() == 0 for o in observations):
        raise CalibrationError("no view has enough keypoints or a usable mask")

    prob = _JointProblem(model, shared, rigs, observations, config)
    if not np.isfinite(prob.objective()):
        raise CalibrationError(f"non-finite objective at init: {_state_dump(prob)}")

    # Warm-up: per-view motion only (body frozen). Small, well-posed, and
    # keeps the subsequent joint refinement in the correct basin.
    for _ in range(4 * config.gn_max_inner):
        if not prob.gauss_newton_step(subset="rigs"):
            break

    h = 1.0
    initial = prob.objective()
    initial_state = prob._snapshot()
    best_seen = initial
    stall = 0
    iterations = 0
    converged = False
    for it in range(config.max_outer):
        iterations = it + 1
        for _ in range(config.gn_max_inner):
            if not prob.gauss_newton_step():
                break
        if prob.fd_sweep(h) < config.tol:
            h *= 0.5
        now = prob.objective()
        if not np.isfinite(now):
            raise CalibrationError(f"non-finite objective: {_state_dump(prob)}")
        if now < best_seen - config.tol:
            best_seen = now
            stall = 0
        else:
            stall += 1
        if stall >= 2 and h < 0.26:
            converged = True
            break
    # Final keypoint polish (tiny steps no longer move the IoU rasters).
    for _ in range(config.gn_max_inner):
        if not prob.gauss_newton_step():
            break
    # Never return a state with a worse combined objective than the input.
    if prob.objective() > initial:
        prob._restore(initial_state)

    joints = posed_joints(model, prob.params)
    mesh = lbs_forward(model, prob.params)
    rmse = []
    ious = []
    free = []
    for v in range(prob.n_views):
        o = observations[v]
        if o.visible.any():
            u, vv, _ = project_orthographic(prob.rigs[v], joints)
            du = u[o.visible] - o.keypoints[o.visible, 0]
            dv = vv[o.visible] - o.keypoints[o.visible, 1]
            rmse.append(float(np.sqrt(np.mean(du ** 2 + dv ** 2))))
        else:
            rmse.append(float("nan"))
            free.append(f"view {v}: keypoint-free view")
        ious.append(silhouette_iou(rasterize_silhouette(mesh, prob.rigs[v]), o.mask))
    report = FitReport(
        keypoint_rmse=rmse,
        silhouette_iou=ious,
        keypoint_free_views=free,
        iterations=iterations,
        converged=converged,
        objective=float(prob.objective()),
    )
    return prob.params, prob.rigs, report


def _state_dump(prob):
    return json.dumps({
        "beta": prob.params.beta.tolist(),
        "theta": prob.params.theta.tolist(),
        "rigs": [r.to_dict() for r in prob.rigs],
    })


# ---------------------------------------------------------------------------
# Observation IO
# ---------------------------------------------------------------------------

def write_pgm(path, mask):
    mask = (np.asarray(mask) > 0).astype(np.uint8) * 255
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(mask.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM")
    # Header: magic, width, height, maxval, separated by whitespace/comments.
    tokens = []
    i = 2
    while len(tokens) < 3:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        tokens.append(int(data[i:j]))
        i = j
    i += 1
    w, h, _maxval = tokens
    img = np.frombuffer(data[i:i + w * h], dtype=np.uint8).reshape(h, w)
    return (img > 127).astype(np.uint8)


def save_observation(view_dir, obs: Observation):
    view_dir = Path(view_dir)
    view_dir.mkdir(parents=True, exist_ok=True)
    names = obs.joint_names or [f"joint_{j:02d}" for j in range(len(obs.keypoints))]
    doc = {
        n: [float(obs.keypoints[j, 0]), float(obs.keypoints[j, 1]), int(obs.visible[j])]
        for j, n in enumerate(names)
    }
    with open(view_dir / "keypoints.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
    write_pgm(view_dir / "mask.pgm", obs.mask)


def load_observation(view_dir, joint_names=None):
    view_dir = Path(view_dir)
    with open(view_dir / "keypoints.json", "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    names = joint_names or list(doc.keys())
    kp = np.array([[doc[n][0], doc[n][1]] for n in names])
    vis = np.array([bool(doc[n][2]) for n in names])
    mask = read_pgm(view_dir / "mask.pgm")
    return Observation(keypoints=kp, visible=vis, mask=mask, joint_names=list(names))
