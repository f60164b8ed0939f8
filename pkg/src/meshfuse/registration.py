"""Rigid point-to-point ICP and the global-pose update it feeds."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body_model import BodyParams
from .geometry import (RigidTransform, axis_angle_to_matrix, build_nn_index,
                       matrix_to_axis_angle)


class RegistrationError(ValueError):
    pass


@dataclass(frozen=True)
class ICPConfig:
    max_iters: int = 50
    tolerance: float = 1e-8       # m^2, minimum improvement of the mean squared error
    reject_factor: float = 3.0    # drop pairs farther than this multiple of the median


@dataclass
class ICPResult:
    transform: RigidTransform
    rmse: float
    iterations: int
    mse_history: list = field(default_factory=list)
    converged: bool = False


def best_rigid_transform(src, dst):
    """Least-squares rotation and translation mapping ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    cs, cd = src.mean(0), dst.mean(0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


def _check_spread(points):
    if len(points) < 3:
        raise RegistrationError("ICP needs at least 3 points per cloud")
    s = np.linalg.svd(points - points.mean(0), compute_uv=False)
    if s[1] <= 1e-9 * max(s[0], 1e-12) or s[0] == 0:
        raise RegistrationError("degenerate source cloud: rotation is unobservable")


def icp_align(source, target, init: RigidTransform | None = None,
              config: ICPConfig = ICPConfig()) -> ICPResult:
    """Align ``source`` to ``target``; returns the transform applied to source."""
    src = np.asarray(source, dtype=float).reshape(-1, 3)
    dst = np.asarray(target, dtype=float).reshape(-1, 3)
    if len(src) == 0 or len(dst) == 0:
        raise RegistrationError("ICP inputs must be non-empty")
    if len(dst) < 3:
        raise RegistrationError("ICP needs at least 3 target points")
    _check_spread(src)
    index = build_nn_index(dst)
    T = init if init is not None else RigidTransform()
    tau = np.inf

    def correspond(T, tau):
        """Matches under ``T``, the rejection threshold, kept mask and error.

        The threshold is the rejection multiple of the median distance but
        never grows, and rejected pairs count at the threshold. The reported
        error ``mean(min(d^2, tau^2))`` then cannot rise from one iteration
        to the next: the rigid step lowers the kept part with matches fixed,
        re-matching lowers every distance, and a tighter threshold lowers
        the cap.
        """
        moved = T.apply(src)
        d2, idx = index.query(moved)
        tau = min(tau, config.reject_factor * float(np.median(np.sqrt(d2))))
        keep = d2 <= tau * tau
        return moved, idx, keep, tau, float(np.minimum(d2, tau * tau).mean())

    moved, idx, keep, tau, mse = correspond(T, tau)
    history = [mse]
    converged = False
    it = 0
    while it < config.max_iters:
        R, t = best_rigid_transform(moved[keep], dst[idx[keep]])
        T_new = RigidTransform(R, t).compose(T)
        nxt = correspond(T_new, tau)
        if nxt[4] > mse:
            # only reachable through round-off once converged
            converged = True
            break
        it += 1
        improvement = mse - nxt[4]
        T = T_new
        moved, idx, keep, tau, mse = nxt
        history.append(mse)
        if improvement < config.tolerance:
            converged = True
            break
    return ICPResult(T, float(np.sqrt(history[-1])), it, history, converged)


def apply_global_update(params: BodyParams, T: RigidTransform) -> BodyParams:
    """Left-compose a rigid transform onto the body's global pose."""
    R = T.rotation @ axis_angle_to_matrix(params.theta_global)
    return params.replace(theta_global=matrix_to_axis_angle(R),
                          t_cam=T.rotation @ params.t_cam + T.translation)
