"""Multi-term mesh fitting objective, its exact gradient, and the optimizer.

Objective over ``(beta, theta, t_cam)``::

    L = L_J + l_3d L_3d + l_theta L_theta + l_a L_a + l_beta L_beta + l_occ L_occ

``L_J`` is a confidence-weighted Geman-McClure penalty on 2D reprojection
residuals in pixels, ``L_3d`` the symmetric size-normalised Chamfer distance
between visible vertices and LiDAR points, ``L_theta`` a Gaussian-mixture
negative log-likelihood of the body pose, ``L_a`` the exponential
anti-hyperextension prior, ``L_beta`` a quadratic shape prior and ``L_occ``
the quaternion consistency penalty on occluded joints.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from . import body_model as bm
from .body_model import BodyModel, BodyParams
from .geometry import (CameraModel, NNIndex, axis_angle_to_quaternion,
                       axis_angle_to_quaternion_jacobian, build_nn_index, project_jacobian)
from .visibility import Keypoints2D, VisibilityConfig

log = logging.getLogger(__name__)

TERMS = ("J", "3d", "theta", "a", "beta", "occ")


class FitError(RuntimeError):
    pass


class PriorError(ValueError):
    pass


@dataclass(frozen=True)
class FitWeights:
    rho: float = 100.0
    lambda_theta: float = 2.2
    lambda_a: float = 11.0
    lambda_beta: float = 5.0
    lambda_3d: float = 800.0
    lambda_occ: float = 35.0

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("Geman-McClure scale must be positive")
        for k in ("lambda_theta", "lambda_a", "lambda_beta", "lambda_3d", "lambda_occ"):
            if not getattr(self, k) >= 0:
                raise ValueError(f"{k} must be non-negative")

    def weight(self, term):
        return {"J": 1.0, "3d": self.lambda_3d, "theta": self.lambda_theta, "a": self.lambda_a,
                "beta": self.lambda_beta, "occ": self.lambda_occ}[term]


@dataclass(frozen=True)
class DatasetConfig:
    weights: FitWeights
    visibility: VisibilityConfig


# per-dataset hyperparameters: rho, l_theta, l_a, l_beta, l_3d, l_occ, w, j_conf
DATASET_TABLE = {
    "3dpw": (100, 2.2, 11.0, 5.0, 800, 35, 0.2, 0.6),
    "sloper4d": (100, 0.75, 8.5, 1.0, 500, 55, 0.2, 0.7),
    "humanm3": (100, 1.0, 3.0, 17.5, 600, 135, -1.0, 0.6),
    "ut_campus": (100, 1.4, 10.0, 10.0, 300, 50, 0.2, 0.7),
}


def dataset_config(name: str) -> DatasetConfig:
    key = name.lower().replace(" ", "_").replace("-", "_")
    if key not in DATASET_TABLE:
        raise KeyError(f"unknown weight set {name!r}; known: {sorted(DATASET_TABLE)}")
    rho, lt, la, lb, l3, lo, w, jc = DATASET_TABLE[key]
    return DatasetConfig(FitWeights(rho, lt, la, lb, l3, lo), VisibilityConfig(w, jc))


# ---------------------------------------------------------------------------
# priors


class PosePriorMoG:
    """Gaussian mixture over the flattened body pose."""

    def __init__(self, weights, means, covs):
        g = np.asarray(weights, dtype=float).reshape(-1)
        mu = np.asarray(means, dtype=float).reshape(len(g), -1)
        cov = np.asarray(covs, dtype=float).reshape(len(g), mu.shape[1], mu.shape[1])
        if np.any(g <= 0) or abs(g.sum() - 1.0) > 1e-9:
            raise PriorError("mixture weights must be positive and sum to one")
        if np.abs(cov - cov.transpose(0, 2, 1)).max() > 1e-9:
            raise PriorError("mixture covariances must be symmetric")
        d = mu.shape[1]
        prec = np.empty_like(cov)
        log_norm = np.empty(len(g))
        for j in range(len(g)):
            try:
                L = np.linalg.cholesky(cov[j])
            except np.linalg.LinAlgError as exc:
                raise PriorError(f"covariance {j} is not positive definite") from exc
            Linv = np.linalg.inv(L)
            prec[j] = Linv.T @ Linv
            log_norm[j] = -0.5 * d * math.log(2 * math.pi) - np.log(np.diag(L)).sum()
        self.weights, self.means, self.covs, self.precisions = g, mu, cov, prec
        self._log_coef = np.log(g) + log_norm

    @property
    def dim(self):
        return self.means.shape[1]

    @classmethod
    def standard(cls, dim):
        return cls([1.0], np.zeros((1, dim)), np.eye(dim)[None])

    def to_dict(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "covs": self.covs.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["weights"], d["means"], d["covs"])

    @classmethod
    def load(cls, path):
        """Read a prior from ``.json`` or ``.npz`` (weights, means, covs)."""
        if str(path).endswith(".json"):
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        with np.load(path) as z:
            return cls(z["weights"], z["means"], z["covs"])

    def save(self, path):
        if str(path).endswith(".json"):
            with open(path, "w") as fh:
                json.dump(self.to_dict(), fh, sort_keys=True)
        else:
            np.savez(path, weights=self.weights, means=self.means, covs=self.covs)

    def sample(self, rng, n=1):
        """Draw ``n`` poses; returns an ``(n, dim)`` array."""
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for i, j in enumerate(comp):
            out[i] = rng.multivariate_normal(self.means[j], self.covs[j])
        return out

    def _log_terms(self, theta):
        diff = np.asarray(theta, dtype=float).reshape(-1) - self.means
        if diff.shape[1] != self.dim:
            raise PriorError("pose dimension does not match the prior")
        maha = np.einsum("ja,jab,jb->j", diff, self.precisions, diff)
        return self._log_coef - 0.5 * maha, diff

    def value(self, theta):
        lt, _ = self._log_terms(theta)
        return float(-logsumexp(lt))

    def value_and_grad(self, theta):
        lt, diff = self._log_terms(theta)
        lse = logsumexp(lt)
        resp = np.exp(lt - lse)
        grad = np.einsum("j,jab,jb->a", resp, self.precisions, diff)
        return float(-lse), grad


class ShapePrior:
    def __init__(self, precision):
        P = np.atleast_2d(np.asarray(precision, dtype=float))
        if P.shape[0] != P.shape[1] or np.abs(P - P.T).max() > 1e-9:
            raise PriorError("shape precision must be a symmetric square matrix")
        if np.linalg.eigvalsh(P).min() < -1e-12:
            raise PriorError("shape precision must be positive semidefinite")
        self.precision = P

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n))


# ---------------------------------------------------------------------------
# individual terms


def geman_mcclure(r2, sigma):
    s2 = sigma * sigma
    return s2 * r2 / (s2 + r2)


def loss_J(problem: "FitProblem", params: BodyParams) -> float:
    _, joints = bm.pose_mesh(problem.model, params)
    return _term_J(problem, joints)[0]


def _term_J(problem, joints):
    cam = problem.camera
    idx, target, conf = problem.keypoint_targets
    grad = np.zeros_like(joints)
    if len(idx) == 0:
        return 0.0, grad, []
    pc = cam.to_camera(joints[idx])
    z = pc[:, 2]
    front = z > 1e-9
    skipped = [int(j) for j in idx[~front]]
    pc, target, conf, jidx = pc[front], target[front], conf[front], idx[front]
    uv = np.stack([cam.fx * pc[:, 0] / pc[:, 2] + cam.cx, cam.fy * pc[:, 1] / pc[:, 2] + cam.cy], 1)
    r = uv - target
    r2 = (r * r).sum(1)
    s2 = problem.weights.rho ** 2
    value = float((conf * geman_mcclure(r2, problem.weights.rho)).sum())
    d_r = (conf * 2 * s2 * s2 / (s2 + r2) ** 2)[:, None] * r
    d_pc = np.einsum("na,nab->nb", d_r, project_jacobian(cam, pc))
    np.add.at(grad, jidx, d_pc @ cam.pose.rotation)
    return value, grad, skipped


def chamfer(vertices, points, point_index: NNIndex | None = None):
    """Symmetric size-normalised Chamfer distance and its gradient w.r.t.
    ``vertices`` with nearest neighbours frozen."""
    V = np.asarray(vertices, dtype=float)
    P = np.asarray(points, dtype=float)
    if len(V) == 0 or len(P) == 0:
        return 0.0, np.zeros_like(V)
    point_index = point_index or build_nn_index(P)
    d_vp, i_vp = point_index.query(V)
    d_pv, i_pv = build_nn_index(V).query(P)
    value = float(d_vp.mean() + d_pv.mean())
    grad = 2.0 * (V - P[i_vp]) / len(V)
    np.add.at(grad, i_pv, 2.0 * (V[i_pv] - P) / len(P))
    return value, grad


def loss_3D(visible_vertices, lidar) -> float:
    if len(visible_vertices) == 0 or len(lidar) == 0:
        log.warning("empty vertex or point set; 3D alignment term is 0")
    return chamfer(visible_vertices, lidar)[0]


def loss_pose_prior(prior: PosePriorMoG, theta_body) -> float:
    return prior.value(theta_body)


def _hinge_coords(theta_body, hinge_joints):
    hinge = np.asarray(hinge_joints, dtype=np.int64).reshape(-1, 3)
    tb = np.asarray(theta_body, dtype=float).reshape(-1, 3)
    return hinge, hinge[:, 2] * tb[hinge[:, 0] - 1, hinge[:, 1]]


def loss_hyperext(theta_body, hinge_joints) -> float:
    """``sum exp(theta_k)`` over signed hinge coordinates.

    ``hinge_joints`` rows are ``(joint, axis, sign)`` with ``joint`` a model
    joint index (>= 1).
    """
    _, c = _hinge_coords(theta_body, hinge_joints)
    return float(np.exp(c).sum())


def loss_shape(prior: ShapePrior, beta) -> float:
    beta = np.asarray(beta, dtype=float)
    return float(beta @ prior.precision @ beta)


def loss_occ(current_quats, initial_quats, occluded) -> float:
    occluded = list(occluded)
    if not occluded:
        return 0.0
    q = np.asarray(current_quats, dtype=float)[occluded]
    q0 = np.asarray(initial_quats, dtype=float)[occluded]
    dots = np.einsum("ij,ij->i", q, q0)
    return float((1.0 - dots * dots).sum())


def body_quaternions(theta_body):
    return np.array([axis_angle_to_quaternion(a) for a in np.asarray(theta_body).reshape(-1, 3)])


# ---------------------------------------------------------------------------
# problem


@dataclass
class FitProblem:
    model: BodyModel
    init: BodyParams
    keypoints: Keypoints2D
    camera: CameraModel
    lidar: np.ndarray
    visible: np.ndarray
    occluded_joints: tuple = ()          # model joint indices (>= 1)
    weights: FitWeights = field(default_factory=FitWeights)
    pose_prior: PosePriorMoG | None = None
    shape_prior: ShapePrior | None = None

    def __post_init__(self):
        m = self.model
        self.lidar = np.asarray(self.lidar, dtype=float).reshape(-1, 3)
        self.visible = np.unique(np.asarray(self.visible, dtype=np.int64).reshape(-1))
        if len(self.visible) and (self.visible[0] < 0 or self.visible[-1] >= m.n_vertices):
            raise FitError("visible set contains vertices outside the model")
        occ = tuple(sorted(set(int(j) for j in self.occluded_joints)))
        if occ and (occ[0] < 1 or occ[-1] >= m.n_joints):
            raise FitError("occluded joints must be non-root model joints")
        self.occluded_joints = occ
        if self.pose_prior is None:
            self.pose_prior = PosePriorMoG.standard(3 * (m.n_joints - 1))
        if self.shape_prior is None:
            self.shape_prior = ShapePrior.identity(m.n_betas)
        if self.pose_prior.dim != 3 * (m.n_joints - 1):
            raise FitError("pose prior dimension does not match the model")
        self.init_quats = body_quaternions(self.init.theta_body)
        self._lidar_index = build_nn_index(self.lidar) if len(self.lidar) else None
        # keypoint associations: model joint, target pixel, confidence
        det_to_row = {int(j): r for r, j in enumerate(self.keypoints.joint_ids)}
        idx, tgt, conf = [], [], []
        for j, det in enumerate(m.keypoint_map):
            r = det_to_row.get(int(det)) if det >= 0 else None
            if r is not None:
                idx.append(j)
                tgt.append(self.keypoints.positions[r])
                conf.append(self.keypoints.confidences[r])
        self.keypoint_targets = (np.array(idx, dtype=np.int64),
                                 np.array(tgt, dtype=float).reshape(-1, 2),
                                 np.array(conf, dtype=float))

    @property
    def use_3d(self):
        return len(self.visible) > 0 and self._lidar_index is not None

    def with_weights(self, **kw):
        return replace(self, weights=replace(self.weights, **kw))


def evaluate_terms(problem: FitProblem, params: BodyParams, with_grad=True):
    """Unweighted term values and (optionally) gradients over the parameter
    vector, plus diagnostics."""
    m = problem.model
    verts, joints, cache = bm.forward(m, params)
    vals, grads, info = {}, {}, {}
    n = len(params.to_vector())
    B = m.n_betas
    body = slice(B + 3, B + 3 + 3 * (m.n_joints - 1))

    vJ, gJ, skipped = _term_J(problem, joints)
    vals["J"] = vJ
    info["skipped_joints"] = skipped
    if skipped:
        log.debug("joints behind camera skipped in reprojection term: %s", skipped)
    if with_grad:
        grads["J"] = bm.backward(m, cache, None, gJ)

    if problem.use_3d:
        v3, g3 = chamfer(verts[problem.visible], problem.lidar, problem._lidar_index)
        vals["3d"] = v3
        if with_grad:
            dV = np.zeros_like(verts)
            dV[problem.visible] = g3
            grads["3d"] = bm.backward(m, cache, dV, None)
    else:
        vals["3d"] = 0.0
        if with_grad:
            grads["3d"] = np.zeros(n)

    tb = params.theta_body.reshape(-1)
    vt, gt = problem.pose_prior.value_and_grad(tb)
    vals["theta"] = vt
    if with_grad:
        grads["theta"] = np.zeros(n)
        grads["theta"][body] = gt

    hinge, c = _hinge_coords(params.theta_body, m.hinge_joints)
    e = np.exp(c)
    vals["a"] = float(e.sum())
    if with_grad:
        g = np.zeros(n)
        for (j, ax, sgn), ek in zip(hinge, e):
            g[B + 3 + 3 * (j - 1) + ax] += sgn * ek
        grads["a"] = g

    P = problem.shape_prior.precision
    vals["beta"] = float(params.beta @ P @ params.beta)
    if with_grad:
        grads["beta"] = np.zeros(n)
        grads["beta"][:B] = (P + P.T) @ params.beta

    occ = problem.occluded_joints
    vo = 0.0
    go = np.zeros(n)
    for j in occ:
        aa = params.theta_body[j - 1]
        q = axis_angle_to_quaternion(aa)
        q0 = problem.init_quats[j - 1]
        dot = float(q @ q0)
        vo += 1.0 - dot * dot
        if with_grad:
            go[B + 3 + 3 * (j - 1):B + 6 + 3 * (j - 1)] = -2.0 * dot * (q0 @ axis_angle_to_quaternion_jacobian(aa))
    vals["occ"] = vo
    if with_grad:
        grads["occ"] = go
    return vals, grads, info


def loss_total(problem: FitProblem, params: BodyParams):
    """Weighted objective value and the per-term (unweighted) breakdown."""
    vals, _, _ = evaluate_terms(problem, params, with_grad=False)
    total = sum(problem.weights.weight(k) * v for k, v in vals.items())
    return float(total), vals


def gradient(problem: FitProblem, params: BodyParams):
    """Exact gradient of :func:`loss_total` as a flat parameter vector."""
    vals, grads, _ = evaluate_terms(problem, params)
    g = sum(problem.weights.weight(k) * grads[k] for k in TERMS)
    if not np.all(np.isfinite(g)):
        bad = [k for k in TERMS if not np.all(np.isfinite(grads[k]))]
        raise FitError(f"non-finite gradient from term(s): {bad}")
    return g


def value_and_gradient(problem: FitProblem, params: BodyParams):
    vals, grads, _ = evaluate_terms(problem, params)
    total = sum(problem.weights.weight(k) * vals[k] for k in TERMS)
    g = sum(problem.weights.weight(k) * grads[k] for k in TERMS)
    if not np.all(np.isfinite(g)):
        bad = [k for k in TERMS if not np.all(np.isfinite(grads[k]))]
        raise FitError(f"non-finite gradient from term(s): {bad}")
    return float(total), g, vals


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class OptimizeConfig:
    max_iters: int = 300
    step: float = 1e-2
    shrink: float = 0.5
    grow: float = 1.2
    tolerance: float = 1e-10
    patience: int = 10
    min_step: float = 1e-9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    divergence_window: int = 20


@dataclass
class OptimizeResult:
    params: BodyParams
    loss: float
    initial_loss: float
    trace: list
    iterations: int
    status: str


def optimize(problem: FitProblem, config: OptimizeConfig = OptimizeConfig(),
             start: BodyParams | None = None) -> OptimizeResult:
    """Adam-style per-parameter steps with a monotone acceptance test.

    A candidate step is kept only if it does not raise the objective;
    otherwise the step size is halved and the step retried.
    """
    m = problem.model
    params = start if start is not None else problem.init
    x = params.to_vector()
    to_params = lambda v: BodyParams.from_vector(v, m.n_betas, m.n_joints, check=False)
    f, g, vals = value_and_gradient(problem, params)
    f0 = f
    trace = [dict(iter=0, loss=f, step=config.step, **vals)]
    mom = np.zeros_like(x)
    sec = np.zeros_like(x)
    lr = config.step
    stall = 0
    rises = 0
    status = "max_iters"
    it = 0
    t_adam = 0
    for it in range(1, config.max_iters + 1):
        t_adam += 1
        mom = config.beta1 * mom + (1 - config.beta1) * g
        sec = config.beta2 * sec + (1 - config.beta2) * g * g
        accepted = False
        for attempt in range(2):
            mhat = mom / (1 - config.beta1 ** t_adam)
            vhat = sec / (1 - config.beta2 ** t_adam)
            direction = mhat / (np.sqrt(vhat) + config.eps)
            trial = lr
            while trial >= config.min_step:
                cand = x - trial * direction
                try:
                    fc, _ = loss_total(problem, to_params(cand))
                except (bm.ModelError, ValueError):
                    fc = np.inf
                if np.isfinite(fc) and fc <= f:
                    accepted = True
                    break
                trial *= config.shrink
            if accepted or attempt:
                break
            # stale momentum may point uphill: restart the moment estimates
            t_adam = 1
            mom = (1 - config.beta1) * g
            sec = (1 - config.beta2) * g * g
        if not accepted:
            status = "step_underflow"
            break
        lr = trial
        improvement = f - fc
        rises = rises + 1 if fc > f else 0
        x = cand
        f, g, vals = value_and_gradient(problem, to_params(x))
        trace.append(dict(iter=it, loss=f, step=lr, **vals))
        lr = min(lr * config.grow, config.step)
        if rises >= config.divergence_window:
            status = "diverged"
            break
        stall = stall + 1 if improvement <= config.tolerance * max(1.0, abs(f)) else 0
        if stall >= config.patience:
            status = "converged"
            break
    final = BodyParams.from_vector(x, m.n_betas, m.n_joints)
    return OptimizeResult(final, f, f0, trace, it if config.max_iters else 0, status)
