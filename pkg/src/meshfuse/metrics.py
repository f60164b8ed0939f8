"""Mesh metrics (vertex/joint errors, Procrustes-aligned error, edge-length
error) and occupancy metrics (IoU, panoptic quality, velocity error).

Mesh distances are reported in millimetres; inputs are in metres.
"""
from __future__ import annotations

import json
import logging

import numpy as np

from .body_model import mesh_edges
from .occupancy import OCCUPIED, PEDESTRIAN, THING_CLASSES, UNKNOWN, VoxelGrid

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    if a.shape != b.shape:
        raise MetricError(f"point count mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise MetricError("empty point sets")
    return a, b


def pve(pred_vertices, gt_vertices):
    """Mean per-vertex error in mm."""
    p, g = _pair(pred_vertices, gt_vertices)
    return float(np.linalg.norm(p - g, axis=1).mean() * 1000.0)


def mpjpe(pred_joints, gt_joints):
    """Mean per-joint position error in mm."""
    p, g = _pair(pred_joints, gt_joints)
    return float(np.linalg.norm(p - g, axis=1).mean() * 1000.0)


def similarity_procrustes(src, dst):
    """Scale, rotation and translation minimising ``sum |s R src + t - dst|^2``."""
    src, dst = _pair(src, dst)
    ms, md = src.mean(0), dst.mean(0)
    a, b = src - ms, dst - md
    var = (a * a).sum()
    sv = np.linalg.svd(a, compute_uv=False)
    if len(src) < 3 or var <= 0 or sv[1] <= 1e-9 * sv[0]:
        raise MetricError("degenerate joint configuration for Procrustes alignment")
    U, S, Vt = np.linalg.svd(b.T @ a)
    D = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        D[2, 2] = -1.0        # rotation, not reflection
    R = U @ D @ Vt
    s = float((S * np.diag(D)).sum() / var)
    t = md - s * R @ ms
    return s, R, t


def procrustes_align(pred, gt):
    s, R, t = similarity_procrustes(pred, gt)
    return s * np.asarray(pred, dtype=float).reshape(-1, 3) @ R.T + t


def pa_mpjpe(pred_joints, gt_joints):
    """MPJPE after similarity Procrustes alignment of the prediction."""
    return mpjpe(procrustes_align(pred_joints, gt_joints), gt_joints)


def mpere(pred_vertices, gt_vertices, faces):
    """Mean relative absolute edge-length error (unitless).

    Edges of zero ground-truth length are excluded with a warning.
    """
    p, g = _pair(pred_vertices, gt_vertices)
    e = mesh_edges(faces)
    lp = np.linalg.norm(p[e[:, 0]] - p[e[:, 1]], axis=1)
    lg = np.linalg.norm(g[e[:, 0]] - g[e[:, 1]], axis=1)
    ok = lg > 0
    if not ok.all():
        log.warning("mpere: %d zero-length ground-truth edges excluded", int((~ok).sum()))
    if not ok.any():
        raise MetricError("no edge with non-zero ground-truth length")
    return float((np.abs(lp[ok] - lg[ok]) / lg[ok]).mean())


# ---------------------------------------------------------------------------
# occupancy


def _check_grids(pred: VoxelGrid, gt: VoxelGrid):
    if pred.spec != gt.spec:
        raise MetricError("grid specs differ")
    # unknown on either side means the cell was not observed there
    valid = (pred.state != UNKNOWN) & (gt.state != UNKNOWN)
    return valid.reshape(-1)


def _labels(grid: VoxelGrid):
    return np.where(grid.state == OCCUPIED, grid.cls, 0).reshape(-1).astype(np.int64)


def occ_iou(pred: VoxelGrid, gt: VoxelGrid, class_set=None):
    """Per-class IoU, mIoU and geometric (occupied vs free) IoU.

    Cells unknown in either grid are ignored. mIoU averages classes from
    ``class_set`` (default: every class occupied in either grid) whose union
    is non-empty.
    """
    valid = _check_grids(pred, gt)
    lp, lg = _labels(pred)[valid], _labels(gt)[valid]
    if class_set is None:
        class_set = sorted(set(np.unique(lp)) | set(np.unique(lg)) - {0})
    per = {}
    for c in class_set:
        inter = int(((lp == c) & (lg == c)).sum())
        union = int(((lp == c) | (lg == c)).sum())
        if union:
            per[int(c)] = inter / union
    op, og = lp > 0, lg > 0
    union = int((op | og).sum())
    geo = float((op & og).sum() / union) if union else None
    miou = float(np.mean(list(per.values()))) if per else None
    return {"per_class": per, "miou": miou, "iou": geo}


def _segments(labels, instances, c):
    """Flat-cell index arrays of the segments of class ``c``."""
    m = labels == c
    if c in THING_CLASSES:
        ids = instances[m]
        if np.any(ids == 0):
            raise MetricError(f"thing class {c} has cells without an instance id")
        cells = np.flatnonzero(m)
        return {int(i): cells[ids == i] for i in np.unique(ids)}
    return {0: np.flatnonzero(m)} if m.any() else {}


def panoptic_quality(pred: VoxelGrid, gt: VoxelGrid, class_set=None):
    """PQ / SQ / RQ per class and overall, plus PQ-dagger and pedestrian-only.

    Segments match when their IoU exceeds 0.5. PQ-dagger keeps PQ for thing
    classes and uses the plain class IoU for stuff classes.
    """
    valid = _check_grids(pred, gt)
    lp = np.where(valid, _labels(pred), 0)
    lg = np.where(valid, _labels(gt), 0)
    ip = pred.instance.reshape(-1).astype(np.int64)
    ig = gt.instance.reshape(-1).astype(np.int64)
    if class_set is None:
        class_set = sorted(set(np.unique(lp)) | set(np.unique(lg)) - {0})
    per = {}
    for c in class_set:
        sp, sg = _segments(lp, ip, c), _segments(lg, ig, c)
        if not sp and not sg:
            continue
        ious = []
        matched_p = set()
        for gk, gc in sg.items():
            for pk, pc in sp.items():
                if pk in matched_p:
                    continue
                inter = np.intersect1d(gc, pc, assume_unique=True).size
                iou = inter / (gc.size + pc.size - inter)
                if iou > 0.5:    # unique by construction above this threshold
                    ious.append(iou)
                    matched_p.add(pk)
                    break
        tp = len(ious)
        fp, fn = len(sp) - tp, len(sg) - tp
        denom = tp + 0.5 * fp + 0.5 * fn
        sq = float(np.mean(ious)) if tp else 0.0
        rq = tp / denom
        pq = float(np.sum(ious) / denom)
        inter = int(((lp == c) & (lg == c)).sum())
        union = int(((lp == c) | (lg == c)).sum())
        per[int(c)] = {"pq": pq, "sq": sq, "rq": rq, "tp": tp, "fp": fp, "fn": fn,
                       "pq_dagger": pq if c in THING_CLASSES else inter / union}
    mean = lambda k: float(np.mean([v[k] for v in per.values()])) if per else None
    ped = per.get(PEDESTRIAN)
    return {"per_class": per, "pq": mean("pq"), "sq": mean("sq"), "rq": mean("rq"),
            "pq_dagger": mean("pq_dagger"),
            "pedestrian": None if ped is None else {k: ped[k] for k in ("pq", "sq", "rq")}}


def _instance_centres(grid: VoxelGrid, cells):
    inst = grid.instance.reshape(-1)[cells]
    centres, vels = {}, {}
    xyz = grid.spec.centers(grid.spec.unflat(cells))
    vel = grid.velocity.reshape(-1, 2)[cells]
    for i in np.unique(inst):
        m = inst == i
        centres[int(i)] = xyz[m].mean(0)
        vels[int(i)] = vel[m].mean(0)
    return centres, vels


def ave(pred: VoxelGrid, gt: VoxelGrid, mode: str = "T", match_radius: float = 1.0):
    """Absolute pedestrian velocity error in m/s, or ``None`` if nothing counts.

    ``T``: every ground-truth pedestrian cell. ``O``: ground-truth pedestrian
    cells also predicted pedestrian. ``D``: instance centres greedily matched
    (closest pair first) within ``match_radius``; error of mean velocities.
    """
    if pred.velocity is None or gt.velocity is None:
        raise MetricError("velocity error needs velocity channels on both grids")
    valid = _check_grids(pred, gt)
    lp, lg = _labels(pred), _labels(gt)
    vp, vg = pred.velocity.reshape(-1, 2).astype(float), gt.velocity.reshape(-1, 2).astype(float)
    gt_ped = valid & (lg == PEDESTRIAN)
    mode = mode.upper()
    if mode in ("T", "O"):
        m = gt_ped if mode == "T" else gt_ped & (lp == PEDESTRIAN)
        if not m.any():
            return None
        return float(np.linalg.norm(vp[m] - vg[m], axis=1).mean())
    if mode != "D":
        raise MetricError(f"unknown AVE mode {mode!r}")
    pred_ped = valid & (lp == PEDESTRIAN)
    if not gt_ped.any() or not pred_ped.any():
        return None
    cg, vgi = _instance_centres(gt, np.flatnonzero(gt_ped))
    cp, vpi = _instance_centres(pred, np.flatnonzero(pred_ped))
    pairs = sorted((float(np.linalg.norm(cg[g] - cp[p])), g, p) for g in cg for p in cp)
    used_g, used_p, errs = set(), set(), []
    for d, g, p in pairs:
        if d > match_radius:
            break
        if g in used_g or p in used_p:
            continue
        used_g.add(g)
        used_p.add(p)
        errs.append(float(np.linalg.norm(vpi[p] - vgi[g])))
    return float(np.mean(errs)) if errs else None


# ---------------------------------------------------------------------------
# reports


def mesh_report(pred_vertices, gt_vertices, faces, pred_joints=None, gt_joints=None):
    out = {"pve_mm": pve(pred_vertices, gt_vertices),
           "mpere": mpere(pred_vertices, gt_vertices, faces)}
    if pred_joints is not None and gt_joints is not None:
        out["mpjpe_mm"] = mpjpe(pred_joints, gt_joints)
        out["pa_mpjpe_mm"] = pa_mpjpe(pred_joints, gt_joints)
    return out


def occupancy_report(pred: VoxelGrid, gt: VoxelGrid):
    out = {"iou": occ_iou(pred, gt), "panoptic": panoptic_quality(pred, gt)}
    if pred.velocity is not None and gt.velocity is not None:
        out["ave"] = {m: ave(pred, gt, m) for m in ("T", "D", "O")}
    else:
        out["ave"] = {"omitted": "velocity channel missing"}
    return out


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def report_table(report: dict) -> str:
    """Flatten a nested report into aligned ``name  value`` lines."""
    rows = []

    def walk(prefix, v):
        if isinstance(v, dict):
            for k in sorted(v, key=str):
                walk(f"{prefix}.{k}" if prefix else str(k), v[k])
        elif isinstance(v, (list, tuple)):
            for i, x in enumerate(v):
                walk(f"{prefix}[{i}]", x)
        elif isinstance(v, float):
            rows.append((prefix, f"{v:.6f}"))
        else:
            rows.append((prefix, "n/a" if v is None else str(v)))

    walk("", report)
    width = max((len(r[0]) for r in rows), default=0)
    return "".join(f"{k.ljust(width)}  {v}\n" for k, v in rows)
