"""Per-person fitting pipeline: visibility filter, rigid ICP, then joint
refinement of shape, pose and translation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import body_model as bm
from .body_model import BodyModel, BodyParams
from .fit import (DatasetConfig, FitProblem, OptimizeConfig, OptimizeResult,
                  PosePriorMoG, ShapePrior, loss_total, optimize)
from .geometry import CameraModel
from .registration import ICPConfig, RegistrationError, apply_global_update, icp_align
from .visibility import Keypoints2D, visible_set

log = logging.getLogger(__name__)


@dataclass
class FitOutcome:
    params: BodyParams
    after_icp: BodyParams
    visible: np.ndarray
    occluded_parts: set
    occluded_joints: tuple
    icp_rmse: float | None
    stage_losses: dict = field(default_factory=dict)
    result: OptimizeResult | None = None
    mode: str = "2d+3d"


def fit_person(model: BodyModel, init: BodyParams, keypoints: Keypoints2D, camera: CameraModel,
               lidar, config: DatasetConfig, opt_config: OptimizeConfig = OptimizeConfig(),
               icp_config: ICPConfig = ICPConfig(), pose_prior: PosePriorMoG | None = None,
               shape_prior: ShapePrior | None = None, use_visibility: bool = True) -> FitOutcome:
    lidar = np.asarray(lidar, dtype=float).reshape(-1, 3)
    verts0, _ = bm.pose_mesh(model, init)
    if use_visibility:
        visible, parts = visible_set(model.mesh(verts0), camera, keypoints,
                                     config.visibility, model.part_joint_sets)
    else:
        visible, parts = np.arange(model.n_vertices), set()
    occ_joints = tuple(bm.occluded_joints_from_parts(model, parts))

    mode = "2d+3d"
    params = init
    rmse = None
    if len(visible) == 0 or len(lidar) < 3:
        mode = "2d-only"
        log.warning("no usable LiDAR correspondence set (|V|=%d, |P|=%d); fitting 2D terms only",
                    len(visible), len(lidar))
    elif opt_config.max_iters > 0:
        # a zero iteration budget means no refinement stage runs at all
        try:
            icp = icp_align(verts0[visible], lidar, config=icp_config)
            params = apply_global_update(init, icp.transform)
            rmse = icp.rmse
        except RegistrationError as exc:
            log.warning("ICP skipped: %s", exc)

    problem = FitProblem(model=model, init=init, keypoints=keypoints, camera=camera,
                         lidar=lidar if mode == "2d+3d" else np.zeros((0, 3)),
                         visible=visible if mode == "2d+3d" else [],
                         occluded_joints=occ_joints, weights=config.weights,
                         pose_prior=pose_prior, shape_prior=shape_prior)
    stage = {"init": loss_total(problem, init)[0], "icp": loss_total(problem, params)[0]}
    result = optimize(problem, opt_config, start=params)
    stage["final"] = result.loss
    return FitOutcome(params=result.params, after_icp=params, visible=visible,
                      occluded_parts=parts, occluded_joints=occ_joints, icp_rmse=rmse,
                      stage_losses=stage, result=result, mode=mode)
