"""Central-difference verification of the analytic objective gradient."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import body_model as bm
from .body_model import BodyParams
from .fit import TERMS, FitProblem, evaluate_terms
from .geometry import build_nn_index

BLOCKS = ("beta", "theta_global", "theta_body", "t_cam")


@dataclass
class GradRow:
    term: str
    block: str
    max_abs_err: float
    scale: float
    rel_err: float
    passed: bool


def block_slices(problem: FitProblem):
    m = problem.model
    B, nb = m.n_betas, 3 * (m.n_joints - 1)
    return {"beta": slice(0, B), "theta_global": slice(B, B + 3),
            "theta_body": slice(B + 3, B + 3 + nb), "t_cam": slice(B + 3 + nb, B + 6 + nb)}


def _frozen_chamfer(problem: FitProblem, params: BodyParams):
    """Chamfer value as a function of params with today's matches held fixed."""
    V = bm.pose_mesh(problem.model, params)[0][problem.visible]
    P = problem.lidar
    i_vp = problem._lidar_index.query(V)[1]
    i_pv = build_nn_index(V).query(P)[1]

    def value(p):
        W = bm.pose_mesh(problem.model, p)[0][problem.visible]
        return float(((W - P[i_vp]) ** 2).sum(1).mean() + ((P - W[i_pv]) ** 2).sum(1).mean())
    return value


def finite_difference(problem: FitProblem, params: BodyParams, h=1e-5):
    """Per-term central-difference gradients ``{term: (n,)}``.

    The 3D term is differenced with its nearest-neighbour matches frozen at
    ``params``, the same convention the analytic gradient uses; otherwise a
    match switching inside the stencil would register as a gradient error.
    """
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    m = problem.model
    x = params.to_vector()
    frozen = _frozen_chamfer(problem, params) if problem.use_3d else None
    out = {t: np.zeros_like(x) for t in TERMS}
    for i in range(len(x)):
        vals = []
        for s in (+h, -h):
            xi = x.copy()
            xi[i] += s
            p = BodyParams.from_vector(xi, m.n_betas, m.n_joints, check=False)
            v = evaluate_terms(problem, p, with_grad=False)[0]
            if frozen is not None:
                v["3d"] = frozen(p)
            vals.append(v)
        for t in TERMS:
            out[t][i] = (vals[0][t] - vals[1][t]) / (2 * h)
    return out


def check_gradient(problem: FitProblem, params: BodyParams, h=1e-5, tol=1e-4, grad_fn=None):
    """Compare analytic and numeric gradients per term and parameter block.

    ``grad_fn(problem, params) -> {term: (n,)}`` replaces the analytic
    gradient; tests use it to inject a faulty gradient. The relative error of
    a block is its max absolute error over the larger of the two gradients'
    max magnitudes (floored at 1e-8).
    """
    analytic = grad_fn(problem, params) if grad_fn else evaluate_terms(problem, params)[1]
    numeric = finite_difference(problem, params, h)
    rows = []
    for t in TERMS:
        for b, sl in block_slices(problem).items():
            ga, gn = analytic[t][sl], numeric[t][sl]
            err = float(np.abs(ga - gn).max()) if ga.size else 0.0
            scale = max(float(np.abs(gn).max(initial=0.0)), float(np.abs(ga).max(initial=0.0)))
            rel = err / max(scale, 1e-8)
            rows.append(GradRow(t, b, err, scale, rel, rel <= tol or err <= 1e-10))
    return rows


def format_rows(rows) -> str:
    lines = [f"{'term':<6} {'block':<13} {'max_abs_err':>12} {'scale':>12} {'rel_err':>10}  result"]
    for r in rows:
        lines.append(f"{r.term:<6} {r.block:<13} {r.max_abs_err:12.3e} {r.scale:12.3e} "
                     f"{r.rel_err:10.2e}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
