"""Synthetic single-person scenes: ground-truth body, simulated sweep,
projected keypoints and a perturbed initialisation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import body_model as bm
from .body_model import BodyModel, BodyParams
from .fit import PosePriorMoG
from .geometry import (CameraModel, axis_angle_to_matrix, matrix_to_axis_angle, project)
from .lidar_sim import SensorSpec, Sweep, get_spec, simulate_sweep
from .visibility import Keypoints2D

# body frame is y-up / z-forward; this turns it to face a y-down camera
FACE_CAMERA = np.array([np.pi, 0.0, 0.0])

LOW_CONFIDENCE = 0.1


def default_camera() -> CameraModel:
    return CameraModel(fx=600.0, fy=600.0, cx=320.0, cy=240.0, width=640, height=480)


def compose_aa(aa, delta):
    """Axis-angle of ``R(aa) @ R(delta)``."""
    return matrix_to_axis_angle(axis_angle_to_matrix(aa) @ axis_angle_to_matrix(delta))


def _unit(rng, n=3):
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


def twist_axes(model: BodyModel):
    """Index (0, 1, 2) of the rest-pose limb axis at every body joint.

    Rotation about this axis twists the limb; it is the bone direction
    towards the joint's children, or from its parent for leaf joints.
    """
    rest = bm.regress_joints(model, model.template_vertices)
    parents = model.kinematic_parents
    axes = []
    for j in range(1, model.n_joints):
        kids = np.flatnonzero(parents == j)
        d = (rest[kids] - rest[j]).mean(0) if len(kids) else rest[j] - rest[parents[j]]
        axes.append(int(np.argmax(np.abs(d))))
    return np.array(axes)


def toy_pose_prior(model: BodyModel, swing_std=0.5, twist_std=0.05) -> PosePriorMoG:
    """Single-Gaussian pose prior with tight limb twist and hinge axes.

    Twist about a limb axis is nearly invisible to keypoints, hinge joints
    only flex about their flexion axis and end effectors carry no keypoint
    beyond them; this mimics a prior learned from real poses, which keeps
    all three small.
    """
    n = model.n_joints - 1
    std = np.full((n, 3), swing_std)
    std[np.arange(n), twist_axes(model)] = twist_std
    for j, ax, _ in model.hinge_joints:
        std[j - 1] = twist_std
        std[j - 1, ax] = swing_std
    # end effectors (hands) have no keypoint beyond them
    leaves = np.setdiff1d(np.arange(1, model.n_joints), model.kinematic_parents)
    std[leaves - 1] = twist_std
    var = std.reshape(-1) ** 2
    return PosePriorMoG([1.0], np.zeros((1, len(var))), np.diag(var)[None])


def random_truth(model: BodyModel, rng, depth=3.0, beta_std=0.15,
                 pose_prior: PosePriorMoG | None = None) -> BodyParams:
    """Ground-truth parameters: pose drawn from ``pose_prior`` (default: the
    toy prior narrowed to 0.2 rad swings), hinge joints folded out of
    hyperextension."""
    prior = pose_prior or toy_pose_prior(model, swing_std=0.2)
    beta = np.clip(rng.normal(0.0, beta_std, model.n_betas), -2, 2)
    theta_body = prior.sample(rng)[0].reshape(-1, 3)
    for j, ax, sgn in model.hinge_joints:
        theta_body[j - 1, ax] = -sgn * abs(theta_body[j - 1, ax])
    tg = compose_aa(FACE_CAMERA, rng.normal(0.0, 0.15, 3))
    t = np.array([rng.uniform(-0.2, 0.2), rng.uniform(0.0, 0.3), depth + rng.uniform(-0.3, 0.3)])
    return BodyParams(beta, tg, theta_body, t)


def perturb(params: BodyParams, rng, translation=0.05, rotation=0.1) -> BodyParams:
    """Offset the translation by ``translation`` metres in a random direction
    and every joint (global included) by a ``rotation`` radian rotation."""
    tb = np.array([compose_aa(a, rotation * _unit(rng)) for a in params.theta_body])
    tg = compose_aa(params.theta_global, rotation * _unit(rng))
    return params.replace(theta_global=tg, theta_body=tb,
                          t_cam=params.t_cam + translation * _unit(rng))


def keypoints_from_joints(model: BodyModel, joints, camera: CameraModel, low_parts=(),
                          j_conf=0.6, drop_low=False) -> Keypoints2D:
    """Noise-free detections; joints informative for ``low_parts`` get low
    confidence (or are left out with ``drop_low``) so those parts read as
    occluded."""
    uv = project(camera, camera.to_camera(joints))
    ids, pos, conf = [], [], []
    low = set()
    for p in low_parts:
        low.update(model.part_joint_sets[p])
    # a joint shared with a visible part keeps that part visible
    for p, js in model.part_joint_sets.items():
        if p not in low_parts and set(js) <= low:
            raise ValueError(f"occluding {sorted(low_parts)} would also hide part {p}")
    for j, det in enumerate(model.keypoint_map):
        if det < 0 or (drop_low and det in low):
            continue
        ids.append(int(det))
        pos.append(uv[j])
        conf.append(LOW_CONFIDENCE if det in low else 1.0)
    assert LOW_CONFIDENCE < j_conf
    return Keypoints2D(ids, pos, conf)


@dataclass
class Scene:
    model: BodyModel
    camera: CameraModel
    truth: BodyParams
    init: BodyParams
    keypoints: Keypoints2D
    sweep: Sweep
    lidar: np.ndarray
    occluded_parts: tuple = ()

    @property
    def truth_vertices(self):
        return bm.pose_mesh(self.model, self.truth)[0]

    @property
    def truth_joints(self):
        return bm.pose_mesh(self.model, self.truth)[1]


def make_scene(model: BodyModel, seed: int, sensor: SensorSpec | str = "Ouster-128",
               noiseless=True, occluded_parts=(), camera: CameraModel | None = None,
               translation=0.05, rotation=0.1, beta_std=0.15,
               pose_prior: PosePriorMoG | None = None, truth: BodyParams | None = None) -> Scene:
    rng = np.random.default_rng(seed)
    camera = camera or default_camera()
    spec = get_spec(sensor) if isinstance(sensor, str) else sensor
    if noiseless:
        spec = spec.noiseless()
    if truth is None:
        truth = random_truth(model, rng, beta_std=beta_std, pose_prior=pose_prior)
    init = perturb(truth, rng, translation, rotation)
    verts, joints = bm.pose_mesh(model, truth)
    sweep = simulate_sweep(spec, model.mesh(verts), camera, seed)
    lidar = sweep.to_world(camera)
    if occluded_parts:
        # an occluder in front of these parts blocks their returns
        face_part = model.part_of_vertex[model.faces[sweep.faces, 0]]
        lidar = lidar[~np.isin(face_part, list(occluded_parts))]
    # an occluded joint yields no detection at all
    kp = keypoints_from_joints(model, joints, camera, occluded_parts, drop_low=True)
    return Scene(model, camera, truth, init, kp, sweep, lidar, tuple(occluded_parts))


def random_problem(model: BodyModel, seed: int, n_points=150, occluded_parts=(),
                   weights=None) -> tuple:
    """A small randomised fit problem for gradient checks.

    Returns ``(problem, params)``: LiDAR points scattered near the truth
    surface, noisy keypoints with mixed confidences, and evaluation params
    away from the truth so every term has a non-trivial gradient.
    """
    from .fit import FitProblem, FitWeights
    rng = np.random.default_rng(seed)
    camera = default_camera()
    truth = random_truth(model, rng)
    verts, joints = bm.pose_mesh(model, truth)
    pick = rng.choice(len(verts), size=n_points)
    lidar = verts[pick] + rng.normal(0.0, 0.01, (n_points, 3))
    uv = project(camera, camera.to_camera(joints)) + rng.normal(0.0, 5.0, (len(joints), 2))
    kp = Keypoints2D(model.keypoint_map, uv, rng.uniform(0.3, 1.0, len(joints)))
    visible = np.sort(rng.choice(len(verts), size=len(verts) // 2, replace=False))
    occ = bm.occluded_joints_from_parts(model, occluded_parts) if occluded_parts else \
        tuple(int(j) for j in rng.choice(np.arange(1, model.n_joints), size=2, replace=False))
    problem = FitProblem(model, perturb(truth, rng, 0.05, 0.1), kp, camera, lidar, visible, occ,
                         weights or FitWeights(), pose_prior=toy_pose_prior(model))
    params = perturb(truth, rng, 0.03, 0.15)
    return problem, params
