"""Visible-vertex selection: backface culling plus keypoint-driven body-part
filtering."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import CameraModel, TriangleMesh

log = logging.getLogger(__name__)

AREA_EPS = 1e-12


class VisibilityConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Keypoints2D:
    """Detected 2D joints keyed by detector joint id."""

    joint_ids: np.ndarray
    positions: np.ndarray     # (K, 2) pixels
    confidences: np.ndarray   # (K,) in [0, 1]

    def __post_init__(self):
        ids = np.asarray(self.joint_ids, dtype=np.int64).reshape(-1)
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        conf = np.asarray(self.confidences, dtype=float).reshape(-1)
        if not (len(ids) == len(pos) == len(conf)):
            raise ValueError("keypoint arrays must have equal length")
        if not np.all(np.isfinite(pos)):
            raise ValueError("keypoint positions must be finite")
        if np.any((conf < 0) | (conf > 1)) or not np.all(np.isfinite(conf)):
            raise ValueError("keypoint confidences must lie in [0, 1]")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("duplicate keypoint joint id")
        object.__setattr__(self, "joint_ids", ids)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "confidences", conf)

    def confidence_of(self, joint_id, default=0.0):
        hit = np.flatnonzero(self.joint_ids == joint_id)
        return float(self.confidences[hit[0]]) if len(hit) else default

    def to_records(self):
        return [{"joint_id": int(i), "x": float(p[0]), "y": float(p[1]), "conf": float(c)}
                for i, p, c in zip(self.joint_ids, self.positions, self.confidences)]

    @classmethod
    def from_records(cls, records):
        records = list(records)
        return cls([r["joint_id"] for r in records],
                   [(r["x"], r["y"]) for r in records],
                   [r["conf"] for r in records])


@dataclass(frozen=True)
class VisibilityConfig:
    backface_threshold: float = 0.2
    joint_conf_threshold: float = 0.6

    def __post_init__(self):
        if not -1.0 <= self.backface_threshold <= 1.0:
            raise VisibilityConfigError("backface threshold must lie in [-1, 1]")
        if not 0.0 <= self.joint_conf_threshold <= 1.0:
            raise VisibilityConfigError("joint confidence threshold must lie in [0, 1]")


def face_normals_centroids(mesh: TriangleMesh):
    """Unit face normals, centroids and a validity mask (False = zero area)."""
    v = mesh.vertices[mesh.faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    norm = np.linalg.norm(n, axis=1)
    valid = norm > AREA_EPS
    n = np.where(valid[:, None], n / np.where(valid, norm, 1.0)[:, None], 0.0)
    return n, v.mean(axis=1), valid


def front_facing(mesh: TriangleMesh, camera_center, w):
    """Mask of faces with ``n_f . p_f < w``."""
    n, c, valid = face_normals_centroids(mesh)
    view = c - np.asarray(camera_center, dtype=float)
    dist = np.linalg.norm(view, axis=1)
    p = view / np.where(dist > 0, dist, 1.0)[:, None]
    return valid & (np.einsum("ij,ij->i", n, p) < w)


def backface_cull(mesh: TriangleMesh, camera: CameraModel, w: float):
    """Sorted indices of vertices touching at least one front-facing face."""
    faces = mesh.faces[front_facing(mesh, camera.center, w)]
    return np.unique(faces.reshape(-1))


def occluded_parts(keypoints: Keypoints2D, part_joint_sets, j_conf: float):
    """Parts whose best associated keypoint confidence is below ``j_conf``.

    Joints missing from the detection count as confidence 0.
    """
    out = set()
    for part, joints in sorted(part_joint_sets.items()):
        joints = list(joints)
        if not joints:
            raise VisibilityConfigError(f"body part {part} has no associated joints")
        best = max(keypoints.confidence_of(j) for j in joints)
        if best < j_conf:
            out.add(int(part))
    return out


def visible_set(mesh: TriangleMesh, camera: CameraModel, keypoints: Keypoints2D,
                config: VisibilityConfig, part_joint_sets):
    """Final visible vertex indices and the set of occluded parts."""
    if mesh.part_of_vertex is None:
        raise VisibilityConfigError("mesh needs per-vertex part labels")
    front = backface_cull(mesh, camera, config.backface_threshold)
    parts = occluded_parts(keypoints, part_joint_sets, config.joint_conf_threshold)
    if parts:
        keep = ~np.isin(mesh.part_of_vertex[front], sorted(parts))
        front = front[keep]
    if len(front) == 0:
        log.warning("visibility filter removed every vertex (w=%s); LiDAR terms will be skipped",
                    config.backface_threshold)
    return front, parts
