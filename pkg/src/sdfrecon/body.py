"""Linear-blend-skinned parametric body with a procedural test template.

The model follows the usual skinned-template decomposition: a canonical mesh
plus linear shape/expression/pose blendshapes, joints regressed from the
shaped template, and per-vertex skinning over a kinematic tree. The
procedural template is a watertight capsule-limb humanoid extracted from a
smooth-min capsule union, so no licensed asset is required.

Model files are a single JSON document with fields ``template_vertices``,
``faces``, ``shape_basis``, ``expr_basis``, ``pose_basis``,
``joint_regressor`` (triplet sparse form), ``skin_weights``, ``parents``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import TriangleMesh
from .rotations import axis_angle_to_matrix

__all__ = [
    "BodyModel",
    "BodyParams",
    "JOINT_NAMES",
    "lbs_forward",
    "joint_world_transforms",
    "posed_joints",
    "make_procedural_template",
    "load_model",
    "save_model",
]

JOINT_NAMES = [
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
]


@dataclass
class BodyModel:
    """Template mesh, blendshape bases, joint regressor and skin weights."""

    template: TriangleMesh
    shape_basis: np.ndarray      # (K_s, V, 3)
    expr_basis: np.ndarray       # (K_e, V, 3)
    pose_basis: np.ndarray       # (9*(J-1), V, 3)
    joint_regressor: np.ndarray  # (J, V), rows sum to 1
    skin_weights: np.ndarray     # (V, J), rows sum to 1, non-negative
    parents: np.ndarray          # (J,), parents[0] == -1
    joint_names: list = field(default_factory=list)

    def __post_init__(self):
        if not self.joint_names:
            self.joint_names = [f"joint_{j:02d}" for j in range(self.n_joints)]
        self.validate()

    @property
    def n_joints(self):
        return len(self.parents)

    @property
    def n_shape(self):
        return len(self.shape_basis)

    @property
    def n_expr(self):
        return len(self.expr_basis)

    def validate(self):
        v = self.template.n_vertices
        j = self.n_joints
        if self.skin_weights.shape != (v, j):
            raise ValueError("skin_weights shape mismatch")
        if (self.skin_weights < -1e-12).any():
            raise ValueError("negative skin weight")
        sums = self.skin_weights.sum(axis=1)
        bad = np.abs(sums - 1.0) > 1e-6
        if bad.any():
            raise ValueError(f"skin weight row {int(np.argmax(bad))} sums to {sums[bad][0]:.6g}")
        if self.joint_regressor.shape != (j, v):
            raise ValueError("joint_regressor shape mismatch")
        rsums = self.joint_regressor.sum(axis=1)
        badr = np.abs(rsums - 1.0) > 1e-6
        if badr.any():
            raise ValueError(f"joint regressor row {int(np.argmax(badr))} sums to {rsums[badr][0]:.6g}")
        if self.pose_basis.shape[0] != 9 * (j - 1):
            raise ValueError("pose_basis must have 9*(J-1) fields")
        if self.parents[0] != -1 or (self.parents[1:] >= np.arange(1, j)).any():
            raise ValueError("parents must be topologically ordered with a single root")

    def rest_joints(self, beta=None, phi=None):
        """Joint locations regressed from the shaped template, J(beta)."""
        v = self.template.vertices
        if beta is not None and self.n_shape:
            v = v + np.einsum("k,kvc->vc", beta, self.shape_basis)
        return self.joint_regressor @ v


@dataclass
class BodyParams:
    """Shape, per-joint axis-angle pose, expression, global translation."""

    beta: np.ndarray
    theta: np.ndarray  # (J, 3)
    phi: np.ndarray
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def zeros(cls, model: BodyModel):
        return cls(
            beta=np.zeros(model.n_shape),
            theta=np.zeros((model.n_joints, 3)),
            phi=np.zeros(model.n_expr),
        )

    def copy(self):
        return BodyParams(self.beta.copy(), self.theta.copy(), self.phi.copy(), self.trans.copy())


def _check_params(model, params):
    if len(params.beta) != model.n_shape:
        raise ValueError(f"beta has {len(params.beta)} coefficients, model expects {model.n_shape}")
    if params.theta.shape != (model.n_joints, 3):
        raise ValueError("theta must be (J, 3) axis-angle")
    if len(params.phi) != model.n_expr:
        raise ValueError(f"phi has {len(params.phi)} coefficients, model expects {model.n_expr}")
    if not np.isfinite(params.theta).all():
        raise ValueError("non-finite pose")


def joint_world_transforms(model: BodyModel, params: BodyParams):
    """Per-joint world rotations/translations composed along the tree.

    Returns (R_world (J,3,3), t_world (J,3), rest (J,3)); joint j's posed
    location is t_world[j] + params.trans.
    """
    _check_params(model, params)
    rest = model.rest_joints(params.beta)
    rots = axis_angle_to_matrix(params.theta)
    j = model.n_joints
    r_world = np.empty((j, 3, 3))
    t_world = np.empty((j, 3))
    r_world[0] = rots[0]
    t_world[0] = rest[0]
    for k in range(1, j):
        p = model.parents[k]
        r_world[k] = r_world[p] @ rots[k]
        t_world[k] = r_world[p] @ (rest[k] - rest[p]) + t_world[p]
    return r_world, t_world, rest


def posed_joints(model: BodyModel, params: BodyParams):
    _, t_world, _ = joint_world_transforms(model, params)
    return t_world + params.trans


def lbs_forward(model: BodyModel, params: BodyParams) -> TriangleMesh:
    """Pose the template: blendshapes, joint regression, blended rigid motion.

    Pose blendshape features are the vectorized (R(theta_j) - I) per
    non-root joint.
    """
    _check_params(model, params)
    v = model.template.vertices.copy()
    if model.n_shape:
        v += np.einsum("k,kvc->vc", params.beta, model.shape_basis)
    if model.n_expr:
        v += np.einsum("k,kvc->vc", params.phi, model.expr_basis)
    rots = axis_angle_to_matrix(params.theta)
    if model.n_joints > 1:
        feat = (rots[1:] - np.eye(3)).reshape(-1)
        v += np.einsum("k,kvc->vc", feat, model.pose_basis)

    r_world, t_world, rest = joint_world_transforms(model, params)
    # Blend x' = sum_j w_j (R_j (x - r_j) + t_j).
    blended_r = np.einsum("vj,jab->vab", model.skin_weights, r_world)
    offsets = t_world - np.einsum("jab,jb->ja", r_world, rest)
    blended_t = model.skin_weights @ offsets
    posed = np.einsum("vab,vb->va", blended_r, v) + blended_t + params.trans
    return TriangleMesh(posed, model.template.faces.copy(), clean=False)


# ---------------------------------------------------------------------------
# Procedural template
# ---------------------------------------------------------------------------

def _segment_distance(points, a, b):
    """Distance from each point to segment ab."""
    ab = b - a
    denom = max(float(ab @ ab), 1e-30)
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def _capsule_union_sdf(points, capsules, blend):
    """Exponential smooth-min over capsule SDFs."""
    acc = np.zeros(len(points))
    for a, b, r in capsules:
        d = _segment_distance(points, a, b) - r
        acc += np.exp(-d / blend)
    return -blend * np.log(np.maximum(acc, 1e-300))


def _skeleton(rng):
    """Joint rest positions, per-joint bone segments and capsule primitives.

    The body stands along +y (height axis) facing -z, so cameras orbiting
    the y axis see it upright. Proportions vary a few percent with the seed
    so different seeds give distinct (but always watertight) bodies.
    """
    j = lambda lo, hi: rng.uniform(lo, hi)
    arm_h = 1.38 * j(0.98, 1.02)
    arm_reach = j(0.24, 0.27)
    leg_x = 0.12 * j(0.95, 1.05)
    joints = {
        "pelvis": [0.0, 0.95, 0.0],
        "spine": [0.0, 1.15 * j(0.98, 1.02), 0.0],
        "neck": [0.0, 1.42 * j(0.99, 1.01), 0.0],
        "head": [0.0, 1.54, 0.0],
        "l_shoulder": [0.18, arm_h, 0.0],
        "l_elbow": [0.18 + arm_reach, arm_h, 0.0],
        "l_wrist": [0.18 + 2 * arm_reach, arm_h, 0.0],
        "r_shoulder": [-0.18, arm_h, 0.0],
        "r_elbow": [-0.18 - arm_reach, arm_h, 0.0],
        "r_wrist": [-0.18 - 2 * arm_reach, arm_h, 0.0],
        "l_hip": [leg_x, 0.90, 0.0],
        "l_knee": [leg_x + 0.01, 0.50 * j(0.97, 1.03), 0.0],
        "l_ankle": [leg_x + 0.02, 0.10, 0.0],
        "r_hip": [-leg_x, 0.90, 0.0],
        "r_knee": [-leg_x - 0.01, 0.50 * j(0.97, 1.03), 0.0],
        "r_ankle": [-leg_x - 0.02, 0.10, 0.0],
    }
    pos = np.array([joints[n] for n in JOINT_NAMES])
    parents = np.array([-1, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14])

    # Leaf joints extend to a tip so hands/head/feet have geometry to bind.
    name = {n: i for i, n in enumerate(JOINT_NAMES)}
    tips = {
        "head": pos[name["head"]] + [0.0, 0.08, 0.0],
        "l_wrist": pos[name["l_wrist"]] + [0.09, 0.0, 0.0],
        "r_wrist": pos[name["r_wrist"]] + [-0.09, 0.0, 0.0],
        "l_ankle": pos[name["l_ankle"]] + [0.015, -0.055, -0.09],
        "r_ankle": pos[name["r_ankle"]] + [-0.015, -0.055, -0.09],
    }
    bones = []
    for i, n in enumerate(JOINT_NAMES):
        children = [k for k in range(16) if parents[k] == i]
        if children:
            end = pos[children].mean(axis=0)
        else:
            end = tips[n]
        bones.append((pos[i], end))

    r_torso = 0.145 * j(0.95, 1.05)
    r_arm = 0.052 * j(0.95, 1.05)
    r_leg = 0.070 * j(0.95, 1.05)
    clavicle_base = np.array([0.0, pos[name["spine"]][1] + 0.18, 0.0])
    capsules = [
        (pos[name["pelvis"]] - [0, 0.06, 0], pos[name["spine"]], r_torso),
        (pos[name["spine"]], pos[name["neck"]], r_torso * 0.92),
        (pos[name["neck"]], pos[name["head"]], 0.055),
        (pos[name["head"]], tips["head"], 0.095),
        (clavicle_base, pos[name["l_shoulder"]], 0.06),
        (clavicle_base, pos[name["r_shoulder"]], 0.06),
    ]
    for side in ("l", "r"):
        capsules += [
            (pos[name[f"{side}_shoulder"]], pos[name[f"{side}_elbow"]], r_arm),
            (pos[name[f"{side}_elbow"]], pos[name[f"{side}_wrist"]], r_arm * 0.9),
            (pos[name[f"{side}_wrist"]], tips[f"{side}_wrist"], 0.042),
            (pos[name[f"{side}_hip"]], pos[name[f"{side}_knee"]], r_leg),
            (pos[name[f"{side}_knee"]], pos[name[f"{side}_ankle"]], r_leg * 0.75),
            (pos[name[f"{side}_ankle"]], tips[f"{side}_ankle"], 0.042),
        ]
    return pos, parents, bones, capsules


def make_procedural_template(seed: int = 0, resolution: int = 8) -> BodyModel:
    """Watertight capsule-limb humanoid with synthetic blendshape bases.

    ``resolution`` sets lattice cells per upper-arm length (>= 8). The same
    seed always yields a bit-identical model.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8 segments per limb")
    from .recon import OccupancyGrid, marching_cubes  # deferred: avoids cycle

    rng = np.random.default_rng(seed)
    joints, parents, bones, capsules = _skeleton(rng)

    cell = 0.26 / resolution
    center = np.array([0.0, 0.83, 0.0])
    half = 0.90
    dim = int(np.ceil(2 * half / cell)) + 1
    lo = center - half
    hi = center + half
    axes = [np.linspace(lo[k], hi[k], dim) for k in range(3)]
    xx, yy, zz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    sdf = _capsule_union_sdf(pts, capsules, blend=0.018)
    grid = OccupancyGrid(values=-sdf.reshape(dim, dim, dim), bounds=(lo, hi))
    mesh = marching_cubes(grid, iso=0.0)

    verts = mesh.vertices - center
    joints = joints - center
    bones = [(a - center, b - center) for a, b in bones]
    mesh = TriangleMesh(verts, mesh.faces, clean=False)

    # Smooth distance-based skin weights over the bone segments.
    dists = np.stack([_segment_distance(verts, a, b) for a, b in bones], axis=1)
    w = np.exp(-((dists / 0.055) ** 2))
    w = np.maximum(w, 1e-12)
    skin = w / w.sum(axis=1, keepdims=True)

    regressor = _exact_joint_regressor(verts, joints)
    shape_basis = _shape_fields(verts, joints, skin, rng)
    expr_basis = _expr_fields(verts, joints, rng)
    pose_basis = _pose_fields(verts, joints, rng)

    return BodyModel(
        template=mesh,
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        pose_basis=pose_basis,
        joint_regressor=regressor,
        skin_weights=skin,
        parents=parents,
        joint_names=list(JOINT_NAMES),
    )


def _exact_joint_regressor(verts, joints, k=32):
    """Sparse rows reproducing each rest joint (nearly) exactly.

    Minimum-norm weights over the k nearest vertices subject to
    sum(w) = 1 and sum(w * (v - joint)) = 0, in joint-centered coordinates
    for conditioning; rows are renormalized so sums are exactly 1.
    """
    j = len(joints)
    reg = np.zeros((j, len(verts)))
    for i in range(j):
        idx = np.argsort(np.linalg.norm(verts - joints[i], axis=1))[:k]
        local = verts[idx] - joints[i]
        scale = max(np.abs(local).max(), 1e-9)
        c = np.concatenate([local.T / scale, np.ones((1, k))])  # (4, k)
        rhs = np.array([0.0, 0.0, 0.0, 1.0])
        # min ||w||^2 s.t. C w = rhs  ->  w = C^T (C C^T)^-1 rhs
        gram = c @ c.T + 1e-9 * np.eye(4)
        w = c.T @ np.linalg.solve(gram, rhs)
        reg[i, idx] = w / w.sum()
    return reg


def _bump(verts, center, radius):
    return np.exp(-np.sum((verts - center) ** 2, axis=1) / (2.0 * radius ** 2))


def _shape_fields(verts, joints, skin, rng):
    """Eight synthetic shape displacement fields (height, girth, limbs...)."""
    v = verts
    y = v[:, 1]
    ymin = y.min()
    height = y.max() - ymin
    torso_w = skin[:, [0, 1]].sum(axis=1)
    arm_w = skin[:, 4:10].sum(axis=1)
    leg_w = skin[:, 10:16].sum(axis=1)
    head_w = skin[:, [2, 3]].sum(axis=1)
    amp = rng.uniform(0.9, 1.1, size=8)

    fields = np.zeros((8, len(v), 3))
    fields[0, :, 1] = 0.07 * amp[0] * (y - ymin) / height
    radial = v * [1.0, 0.0, 1.0]
    fields[1] = 0.22 * amp[1] * radial * torso_w[:, None]
    arm_reach = np.clip(np.abs(v[:, 0]) - 0.17, 0.0, None)
    fields[2, :, 0] = 0.12 * amp[2] * np.sign(v[:, 0]) * arm_reach * arm_w
    hip_y = joints[10, 1]
    fields[3, :, 1] = -0.08 * amp[3] * np.clip(hip_y - y, 0.0, None) / max(hip_y - ymin, 1e-6) * leg_w
    head_c = joints[3]
    fields[4] = 0.5 * amp[4] * (v - head_c) * (head_w * _bump(v, head_c, 0.16))[:, None]
    fields[5, :, 0] = 0.05 * amp[5] * np.sign(v[:, 0]) * np.clip(arm_w + torso_w * (np.abs(v[:, 0]) > 0.08), 0, 1)
    fields[6, :, 2] = 0.20 * amp[6] * v[:, 2] * torso_w
    belly = joints[0] + np.array([0.0, 0.03, -0.12])
    fields[7, :, 2] = -0.06 * amp[7] * _bump(v, belly, 0.12)
    return fields


def _expr_fields(verts, joints, rng):
    """Two tiny face-localized expression fields (face looks along -z)."""
    head_c = joints[3]
    jaw = head_c + np.array([0.0, -0.03, -0.08])
    brow = head_c + np.array([0.0, 0.04, -0.08])
    fields = np.zeros((2, len(verts), 3))
    fields[0, :, 2] = -0.015 * _bump(verts, jaw, 0.05)
    fields[1, :, 2] = -0.012 * _bump(verts, brow, 0.05)
    return fields


def _pose_fields(verts, joints, rng):
    """Small pose-corrective fields, one per (non-root joint, R-I entry).

    Values are rounded and thresholded so serialized models stay compact.
    """
    n = 9 * (len(joints) - 1)
    fields = np.zeros((n, len(verts), 3))
    for j in range(1, len(joints)):
        bump = _bump(verts, joints[j], 0.09)
        for c in range(9):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            f = 0.004 * bump[:, None] * direction
            f = np.round(f, 6)
            f[np.abs(f) < 1e-6] = 0.0
            fields[(j - 1) * 9 + c] = f
    return fields


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_model(model: BodyModel, path):
    reg = model.joint_regressor
    rows, cols = np.nonzero(reg)
    doc = {
        "template_vertices": model.template.vertices.tolist(),
        "faces": model.template.faces.tolist(),
        "shape_basis": model.shape_basis.tolist(),
        "expr_basis": model.expr_basis.tolist(),
        "pose_basis": model.pose_basis.tolist(),
        "joint_regressor": {
            "shape": list(reg.shape),
            "rows": rows.tolist(),
            "cols": cols.tolist(),
            "values": reg[rows, cols].tolist(),
        },
        "skin_weights": model.skin_weights.tolist(),
        "parents": model.parents.tolist(),
        "joint_names": list(model.joint_names),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_model(path) -> BodyModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    verts = np.asarray(doc["template_vertices"], dtype=np.float64)
    faces = np.asarray(doc["faces"], dtype=np.int64)
    if faces.size and faces.max() >= len(verts):
        raise ValueError(f"face index {int(faces.max())} out of range for {len(verts)} vertices")
    reg_doc = doc["joint_regressor"]
    reg = np.zeros(reg_doc["shape"])
    reg[np.asarray(reg_doc["rows"]), np.asarray(reg_doc["cols"])] = reg_doc["values"]
    model = BodyModel(
        template=TriangleMesh(verts, faces, clean=False),
        shape_basis=np.asarray(doc["shape_basis"], dtype=np.float64),
        expr_basis=np.asarray(doc["expr_basis"], dtype=np.float64),
        pose_basis=np.asarray(doc["pose_basis"], dtype=np.float64),
        joint_regressor=reg,
        skin_weights=np.asarray(doc["skin_weights"], dtype=np.float64),
        parents=np.asarray(doc["parents"], dtype=np.int64),
        joint_names=list(doc.get("joint_names", [])),
    )
    return model
