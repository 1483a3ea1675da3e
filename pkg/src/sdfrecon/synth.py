"""Synthetic scene factory: clothed ground truth, posed views, observations.

A scene is a posed body whose surface is displaced along vertex normals by
band-limited value noise (the "clothing" the reconstruction must recover),
seen by orthographic rigs spaced around the vertical axis, with rendered
masks, feature images and projected joints as keypoints.

Scene directory: ``gt.obj``, ``body.json``, ``params.json``,
``view_k/{mask.pgm, keypoints.json, features.sesf, rig.json}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body import BodyModel, BodyParams, lbs_forward, load_model, posed_joints, save_model
from .calib import (
    Observation,
    ViewRig,
    load_observation,
    project_orthographic,
    rasterize_silhouette,
    save_observation,
)
from .features import (
    FeatureImage,
    ViewSet,
    load_feature_image,
    render_feature_image,
    save_feature_image,
    splat_volume,
    volume_bounds,
)
from .geometry import TriangleMesh, build_bvh, read_obj, write_obj
from .rotations import axis_angle_to_matrix

__all__ = [
    "Scene",
    "generate_clothed_mesh",
    "generate_views",
    "generate_scene",
    "make_dataset",
    "export_scene",
    "load_scene",
    "scene_viewset",
    "value_noise",
]

SCENE_FORMAT_VERSION = 1
MAX_CLOTH_AMP = 0.02  # of the bbox diagonal; beyond this normal-offset
                      # displacement can cross the medial axis of thin limbs


def value_noise(points, seed, octaves=3, base_cells=4):
    """Band-limited lattice noise in [-1, 1], smooth in space.

    Trilinearly interpolated random lattices at doubling frequencies and
    halving amplitudes; deterministic in (seed, octaves, base_cells).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    lo = pts.min(axis=0) - 1e-9
    hi = pts.max(axis=0) + 1e-9
    span = np.maximum(hi - lo, 1e-12)
    unit = (pts - lo) / span
    rng = np.random.default_rng(seed)
    total = np.zeros(len(pts))
    norm = 0.0
    for octave in range(octaves):
        cells = base_cells * 2 ** octave
        amp = 0.5 ** octave
        lattice = rng.uniform(-1.0, 1.0, size=(cells + 1,) * 3)
        g = unit * cells
        gi = np.minimum(g.astype(np.int64), cells - 1)
        f = g - gi
        f = f * f * (3.0 - 2.0 * f)  # smoothstep fade
        acc = np.zeros(len(pts))
        for dx in (0, 1):
            wx = f[:, 0] if dx else 1 - f[:, 0]
            for dy in (0, 1):
                wy = f[:, 1] if dy else 1 - f[:, 1]
                for dz in (0, 1):
                    wz = f[:, 2] if dz else 1 - f[:, 2]
                    acc += wx * wy * wz * lattice[gi[:, 0] + dx, gi[:, 1] + dy, gi[:, 2] + dz]
        total += amp * acc
        norm += amp
    return total / norm


def generate_clothed_mesh(model: BodyModel, params: BodyParams, cloth_amp: float,
                          noise_seed: int) -> TriangleMesh:
    """Body surface displaced along vertex normals by smooth noise.

    The displacement magnitude is bounded by cloth_amp * bbox diagonal;
    amplitudes above MAX_CLOTH_AMP are rejected to keep the surface
    embedded (and hence watertight).
    """
    if cloth_amp < 0:
        raise ValueError("cloth_amp must be >= 0")
    if cloth_amp > MAX_CLOTH_AMP:
        raise ValueError(f"cloth_amp {cloth_amp} exceeds the watertight-safe "
                         f"maximum {MAX_CLOTH_AMP}")
    body = lbs_forward(model, params)
    if cloth_amp == 0:
        return body
    noise = value_noise(body.vertices, noise_seed)
    disp = cloth_amp * body.bbox_diagonal() * noise
    return TriangleMesh(body.vertices + body.vertex_normals * disp[:, None],
                        body.faces.copy(), clean=False)


def generate_views(gt_mesh: TriangleMesh, model: BodyModel, params: BodyParams,
                   n: int, jitter_seed: int = 0, jitter_deg: float = 0.0,
                   jitter_frac: float = 0.0, image_size: int = 512):
    """Rigs spaced 360/n degrees apart around the vertical axis.

    Optional rotation/translation jitter creates the self-calibration
    problem's unknowns (translation jitter stays in the image plane: the
    depth offset of an orthographic camera is unobservable). Returns (rigs,
    observations); keypoints are the posed joints projected under the
    returned rigs, so they reproject exactly.
    """
    if n < 1:
        raise ValueError("need at least one view")
    rng = np.random.default_rng(jitter_seed)
    diag = gt_mesh.bbox_diagonal()
    scale = 0.85 * image_size / diag
    joints = posed_joints(model, params)
    rigs = []
    observations = []
    for k in range(n):
        rig = ViewRig.yaw(2.0 * np.pi * k / n, scale=scale, image_size=(image_size, image_size))
        if jitter_deg > 0:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            rig.rotation = axis_angle_to_matrix(axis * np.deg2rad(jitter_deg)) @ rig.rotation
        if jitter_frac > 0:
            t = rng.normal(size=3)
            t[2] = 0.0
            t *= jitter_frac * diag / max(np.linalg.norm(t), 1e-12)
            rig.translation = rig.translation + t
        u, v, _ = project_orthographic(rig, joints)
        observations.append(Observation(
            keypoints=np.stack([u, v], axis=1),
            visible=np.ones(len(joints), dtype=bool),
            mask=rasterize_silhouette(gt_mesh, rig),
            joint_names=list(model.joint_names),
        ))
        rigs.append(rig)
    return rigs, observations


@dataclass
class Scene:
    model: BodyModel
    params: BodyParams
    gt_mesh: TriangleMesh
    rigs: list
    observations: list
    images: list
    seed: int = 0
    cloth_amp: float = 0.0

    @property
    def n_views(self):
        return len(self.rigs)

    def body_mesh(self):
        return lbs_forward(self.model, self.params)


def generate_scene(model: BodyModel, seed: int, n_views: int = 3,
                   cloth_amp: float = 0.012, pose_scale: float = 0.10,
                   shape_scale: float = 0.6, jitter_deg: float = 0.0,
                   jitter_frac: float = 0.0, image_size: int = 512) -> Scene:
    """Random scene: sampled body parameters, clothed surface, views."""
    rng = np.random.default_rng(seed)
    params = BodyParams.zeros(model)
    params.beta = rng.normal(scale=shape_scale, size=model.n_shape)
    params.theta[1:] = rng.normal(scale=pose_scale, size=(model.n_joints - 1, 3))
    params.phi = rng.normal(scale=0.5, size=model.n_expr)
    gt = generate_clothed_mesh(model, params, cloth_amp, noise_seed=seed + 1)
    rigs, obs = generate_views(gt, model, params, n_views, jitter_seed=seed + 2,
                               jitter_deg=jitter_deg, jitter_frac=jitter_frac,
                               image_size=image_size)
    images = [render_feature_image(gt, rig) for rig in rigs]
    return Scene(model=model, params=params, gt_mesh=gt, rigs=rigs,
                 observations=obs, images=images, seed=seed, cloth_amp=cloth_amp)


def make_dataset(model: BodyModel, n_train: int = 24, n_test: int = 8,
                 train_seed0: int = 100, test_seed0: int = 900, **scene_kwargs):
    """Train/test scene split by disjoint seed ranges."""
    train = [generate_scene(model, train_seed0 + i, **scene_kwargs) for i in range(n_train)]
    test = [generate_scene(model, test_seed0 + i, **scene_kwargs) for i in range(n_test)]
    return train, test


def scene_viewset(scene: Scene, rigs=None, volume_resolution: int = 64) -> ViewSet:
    """Calibrated view bundle for the pipeline (ground-truth rigs by default)."""
    body = scene.body_mesh()
    labels = np.argmax(scene.model.skin_weights, axis=1)
    volume = splat_volume(body, labels, bounds=volume_bounds(body),
                          resolution=volume_resolution)
    return ViewSet(
        body_mesh=body,
        body_bvh=build_bvh(body),
        volume=volume,
        rigs=list(rigs) if rigs is not None else [r.copy() for r in scene.rigs],
        images=list(scene.images),
    )


def export_scene(scene: Scene, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_obj(scene.gt_mesh, out / "gt.obj")
    save_model(scene.model, out / "body.json")
    with open(out / "params.json", "w", encoding="utf-8") as fh:
        json.dump({
            "version": SCENE_FORMAT_VERSION,
            "seed": scene.seed,
            "cloth_amp": scene.cloth_amp,
            "beta": scene.params.beta.tolist(),
            "theta": scene.params.theta.tolist(),
            "phi": scene.params.phi.tolist(),
            "trans": scene.params.trans.tolist(),
        }, fh, indent=1)
    for k, (rig, obs, img) in enumerate(zip(scene.rigs, scene.observations, scene.images)):
        view_dir = out / f"view_{k}"
        save_observation(view_dir, obs)
        save_feature_image(view_dir / "features.sesf", img)
        with open(view_dir / "rig.json", "w", encoding="utf-8") as fh:
            json.dump(rig.to_dict(), fh, indent=1)


_MODEL_CACHE = {}


def _load_model_cached(path):
    key = (str(path), Path(path).stat().st_mtime_ns, Path(path).stat().st_size)
    if key not in _MODEL_CACHE:
        _MODEL_CACHE.clear()
        _MODEL_CACHE[key] = load_model(path)
    return _MODEL_CACHE[key]


def load_scene(scene_dir) -> Scene:
    d = Path(scene_dir)
    if not (d / "gt.obj").exists():
        raise FileNotFoundError(f"missing gt.obj in {d}")
    with open(d / "params.json", "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != SCENE_FORMAT_VERSION:
        raise ValueError(f"scene format version {doc.get('version')} != {SCENE_FORMAT_VERSION}")
    model = _load_model_cached(d / "body.json")
    params = BodyParams(
        beta=np.asarray(doc["beta"], dtype=np.float64),
        theta=np.asarray(doc["theta"], dtype=np.float64),
        phi=np.asarray(doc["phi"], dtype=np.float64),
        trans=np.asarray(doc["trans"], dtype=np.float64),
    )
    gt = read_obj(d / "gt.obj")
    rigs, obs, imgs = [], [], []
    for k in range(64):
        view_dir = d / f"view_{k}"
        if not view_dir.exists():
            break
        with open(view_dir / "rig.json", "r", encoding="utf-8") as fh:
            rigs.append(ViewRig.from_dict(json.load(fh)))
        obs.append(load_observation(view_dir, model.joint_names))
        imgs.append(load_feature_image(view_dir / "features.sesf"))
    if not rigs:
        raise FileNotFoundError(f"no view_k directories in {d}")
    return Scene(model=model, params=params, gt_mesh=gt, rigs=rigs,
                 observations=obs, images=imgs,
                 seed=int(doc["seed"]), cloth_amp=float(doc["cloth_amp"]))
