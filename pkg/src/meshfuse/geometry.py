"""Rotation and transform algebra, pinhole projection, nearest-neighbour
lookup, ray/triangle intersection and voxel ray traversal.

Conventions
-----------
* Rotations act on column vectors: ``p' = R @ p``. Batched points are stored
  row-wise, so the batched form is ``P @ R.T``.
* Quaternions are ``(w, x, y, z)``.
* A voxel grid cell index along an axis is ``floor((x - min) / res)``; a
  coordinate lying exactly on the max boundary belongs to the last cell.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

ORTHO_TOL = 1e-6
HIT_EPS = 1e-9
BRUTE_FORCE_BELOW = 32


class GeometryError(ValueError):
    """Raised on invalid geometric input (non-rotation, behind camera, ...)."""


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def check_rotation(R, tol=ORTHO_TOL):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise GeometryError("rotation must be a finite 3x3 matrix")
    if np.abs(R @ R.T - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise GeometryError("matrix is not a proper rotation")
    return R


# ---------------------------------------------------------------------------
# axis-angle / quaternion / matrix conversions


def axis_angle_to_matrix(aa):
    """Rodrigues' formula. ``aa`` is a 3-vector (axis scaled by angle)."""
    aa = np.asarray(aa, dtype=float)
    theta = math.sqrt(float(aa @ aa))
    K = skew(aa)
    if theta < 1e-8:
        # second-order Taylor expansion; exact to double precision here
        return np.eye(3) + K + 0.5 * K @ K
    s = math.sin(theta) / theta
    c = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + s * K + c * K @ K


def axis_angle_to_matrix_jacobian(aa):
    """Derivatives of :func:`axis_angle_to_matrix`, shape (3, 3, 3).

    ``out[i]`` is dR/d(aa_i).
    """
    aa = np.asarray(aa, dtype=float)
    theta2 = float(aa @ aa)
    out = np.empty((3, 3, 3))
    eye = np.eye(3)
    if theta2 < 1e-12:
        K = skew(aa)
        for i in range(3):
            Ei = skew(eye[i])
            out[i] = Ei + 0.5 * (Ei @ K + K @ Ei)
        return out
    R = axis_angle_to_matrix(aa)
    K = skew(aa)
    I_R = eye - R
    for i in range(3):
        out[i] = (aa[i] * K + skew(np.cross(aa, I_R[:, i]))) @ R / theta2
    return out


def matrix_to_axis_angle(R):
    R = check_rotation(R)
    q = matrix_to_quaternion(R)
    return quaternion_to_axis_angle(q)


def matrix_to_quaternion(R):
    """Shepperd's method; returns a unit quaternion with ``w >= 0``."""
    R = check_rotation(R)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * math.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quaternion_to_matrix(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0:
        raise GeometryError("zero quaternion")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quaternion_to_axis_angle(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    s = np.linalg.norm(q[1:])
    if s < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * math.atan2(s, q[0])
    return q[1:] / s * angle


def axis_angle_to_quaternion(aa):
    aa = np.asarray(aa, dtype=float)
    theta = math.sqrt(float(aa @ aa))
    half = 0.5 * theta
    if theta < 1e-8:
        k = 0.5 - theta * theta / 48.0
    else:
        k = math.sin(half) / theta
    return np.array([math.cos(half), *(k * aa)])


def axis_angle_to_quaternion_jacobian(aa):
    """d q / d aa, shape (4, 3)."""
    aa = np.asarray(aa, dtype=float)
    theta = math.sqrt(float(aa @ aa))
    half = 0.5 * theta
    J = np.empty((4, 3))
    if theta < 1e-6:
        # series of sin(t/2)/t and its derivative coefficient
        k = 0.5 - theta * theta / 48.0
        c = -1.0 / 24.0 + theta * theta / 960.0
        J[0] = -0.25 * aa * (1.0 - theta * theta / 24.0)
    else:
        k = math.sin(half) / theta
        c = (0.5 * math.cos(half) * theta - math.sin(half)) / theta ** 3
        J[0] = -0.5 * math.sin(half) * aa / theta
    J[1:] = k * np.eye(3) + c * np.outer(aa, aa)
    return J


# ---------------------------------------------------------------------------
# rigid transforms


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = check_rotation(self.rotation)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise GeometryError("non-finite translation")
        R = R.copy()
        t = t.copy()
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_axis_angle(cls, aa, translation=(0.0, 0.0, 0.0)):
        return cls(axis_angle_to_matrix(aa), np.asarray(translation, dtype=float))

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    def as_matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def invert(a: RigidTransform) -> RigidTransform:
    return a.inverse()


def apply(a: RigidTransform, points):
    return a.apply(points)


# ---------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform)  # world -> camera

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if self.width < 0 or self.height < 0:
            raise GeometryError("image size must be non-negative")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self):
        """Camera centre in world coordinates."""
        return self.pose.inverse().translation.copy()

    def to_camera(self, points_world):
        return self.pose.apply(points_world)

    def in_image(self, uv):
        uv = np.atleast_2d(uv)
        return ((uv[:, 0] >= 0) & (uv[:, 0] < self.width)
                & (uv[:, 1] >= 0) & (uv[:, 1] < self.height))


def project(camera: CameraModel, point_cam):
    """Pinhole projection of a camera-frame point (or an (N, 3) batch)."""
    p = np.asarray(point_cam, dtype=float)
    z = p[..., 2]
    if np.any(~(z > 0)):
        raise GeometryError("point at or behind the camera plane")
    return np.stack([camera.fx * p[..., 0] / z + camera.cx,
                     camera.fy * p[..., 1] / z + camera.cy], axis=-1)


def project_jacobian(camera: CameraModel, point_cam):
    """d uv / d point for camera-frame points; shape (..., 2, 3)."""
    p = np.asarray(point_cam, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    J = np.zeros(p.shape[:-1] + (2, 3))
    J[..., 0, 0] = camera.fx / z
    J[..., 0, 2] = -camera.fx * x / (z * z)
    J[..., 1, 1] = camera.fy / z
    J[..., 1, 2] = -camera.fy * y / (z * z)
    return J


# ---------------------------------------------------------------------------
# nearest neighbours


class NNIndex:
    """Exact nearest-neighbour index over a fixed point set.

    Uses a kd-tree; below :data:`BRUTE_FORCE_BELOW` points a direct scan is
    cheaper and is used instead.
    """

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise GeometryError("nearest-neighbour index needs at least one point")
        self.points = pts.copy()
        self.points.flags.writeable = False
        self._tree = cKDTree(self.points) if len(pts) >= BRUTE_FORCE_BELOW else None

    def __len__(self):
        return len(self.points)

    def query(self, queries):
        """Return ``(squared_distances, indices)`` of the nearest point."""
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        if self._tree is None:
            d2 = ((q[:, None, :] - self.points[None, :, :]) ** 2).sum(-1)
            idx = np.argmin(d2, axis=1)
            return d2[np.arange(len(q)), idx], idx
        dist, idx = self._tree.query(q, k=1)
        # recompute exactly so the distance is consistent with the index
        d2 = ((q - self.points[idx]) ** 2).sum(-1)
        return d2, idx


def build_nn_index(points) -> NNIndex:
    return NNIndex(points)


# ---------------------------------------------------------------------------
# ray / triangle


def _ray_shear(direction):
    d = np.asarray(direction, dtype=float)
    kz = np.argmax(np.abs(d), axis=-1)
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    dz = np.take_along_axis(d, kz[..., None], -1)[..., 0]
    swap = dz < 0
    kx, ky = np.where(swap, ky, kx), np.where(swap, kx, ky)
    dx = np.take_along_axis(d, kx[..., None], -1)[..., 0]
    dy = np.take_along_axis(d, ky[..., None], -1)[..., 0]
    return kx, ky, kz, dx / dz, dy / dz, 1.0 / dz


def ray_triangles(origins, dirs, v0, v1, v2, eps=HIT_EPS):
    """Watertight ray/triangle test for R rays against T triangles.

    Returns an (R, T) array of hit distances with ``inf`` on a miss. Edges and
    vertices count as inside; rays in the triangle plane never hit.
    """
    o = np.asarray(origins, dtype=float)[:, None, :]
    kx, ky, kz, sx, sy, sz = (a[:, None] for a in _ray_shear(dirs))

    def local(v):
        a = np.asarray(v, dtype=float)[None, :, :] - o
        ax = np.take_along_axis(a, np.broadcast_to(kx[..., None], a.shape[:2] + (1,)), -1)[..., 0]
        ay = np.take_along_axis(a, np.broadcast_to(ky[..., None], a.shape[:2] + (1,)), -1)[..., 0]
        az = np.take_along_axis(a, np.broadcast_to(kz[..., None], a.shape[:2] + (1,)), -1)[..., 0]
        return ax - sx * az, ay - sy * az, sz * az

    Ax, Ay, Az = local(v0)
    Bx, By, Bz = local(v1)
    Cx, Cy, Cz = local(v2)
    U = Cx * By - Cy * Bx
    V = Ax * Cy - Ay * Cx
    W = Bx * Ay - By * Ax
    inside = ((U >= 0) & (V >= 0) & (W >= 0)) | ((U <= 0) & (V <= 0) & (W <= 0))
    det = U + V + W
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (U * Az + V * Bz + W * Cz) / det
    hit = inside & (det != 0) & (t > eps)
    return np.where(hit, t, np.inf)


def ray_triangle_hit(origin, direction, tri, eps=HIT_EPS):
    """Distance along a unit ray to a triangle, or ``None`` on a miss."""
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise GeometryError("ray direction must have unit norm")
    tri = np.asarray(tri, dtype=float)
    t = ray_triangles(np.asarray(origin, dtype=float)[None], direction[None],
                      tri[0:1], tri[1:2], tri[2:3], eps=eps)[0, 0]
    return None if not np.isfinite(t) else float(t)


def _ray_aabb(origins, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    return (tmax >= np.maximum(tmin, 0.0))


def ray_mesh_intersect(origins, dirs, vertices, faces, chunk=2048):
    """Nearest hit of each ray against a triangle mesh.

    Returns ``(t, face)`` with ``t = inf`` and ``face = -1`` where a ray misses.
    """
    origins = np.broadcast_to(np.asarray(origins, dtype=float), np.shape(dirs))
    dirs = np.asarray(dirs, dtype=float)
    vertices = np.asarray(vertices, dtype=float)
    faces = np.asarray(faces, dtype=np.int64)
    n = len(dirs)
    t_out = np.full(n, np.inf)
    f_out = np.full(n, -1, dtype=np.int64)
    if n == 0 or len(faces) == 0:
        return t_out, f_out
    pad = 1e-6
    cand = np.flatnonzero(_ray_aabb(origins, dirs, vertices.min(0) - pad, vertices.max(0) + pad))
    v0, v1, v2 = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    for s in range(0, len(cand), chunk):
        idx = cand[s:s + chunk]
        t = ray_triangles(origins[idx], dirs[idx], v0, v1, v2)
        best = np.argmin(t, axis=1)
        tb = t[np.arange(len(idx)), best]
        t_out[idx] = tb
        f_out[idx] = np.where(np.isfinite(tb), best, -1)
    return t_out, f_out


# ---------------------------------------------------------------------------
# voxel grids


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned grid with cubic cells of side ``resolution``."""

    min_bound: tuple
    max_bound: tuple
    resolution: float

    def __post_init__(self):
        lo = tuple(float(x) for x in self.min_bound)
        hi = tuple(float(x) for x in self.max_bound)
        if len(lo) != 3 or len(hi) != 3:
            raise GeometryError("grid bounds must be 3-vectors")
        if not self.resolution > 0:
            raise GeometryError("grid resolution must be positive")
        for a, b in zip(lo, hi):
            if not b > a:
                raise GeometryError("grid max must exceed min on every axis")
            n = (b - a) / self.resolution
            if abs(n - round(n)) > 1e-6 * max(1.0, n):
                raise GeometryError(
                    f"extent {b - a} is not a whole multiple of resolution {self.resolution}")
        object.__setattr__(self, "min_bound", lo)
        object.__setattr__(self, "max_bound", hi)
        object.__setattr__(self, "resolution", float(self.resolution))

    @property
    def shape(self):
        return tuple(int(round((b - a) / self.resolution))
                     for a, b in zip(self.min_bound, self.max_bound))

    @property
    def n_cells(self):
        nx, ny, nz = self.shape
        return nx * ny * nz

    @property
    def lo(self):
        return np.array(self.min_bound)

    @property
    def hi(self):
        return np.array(self.max_bound)

    def contains(self, points):
        p = np.atleast_2d(points)
        return np.all((p >= self.lo) & (p <= self.hi), axis=1)

    def cell_of(self, points):
        """Integer cell indices (N, 3); points outside the bounds get -1 rows."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        idx = np.floor((p - self.lo) / self.resolution).astype(np.int64)
        idx = np.minimum(idx, np.array(self.shape) - 1)
        inside = self.contains(p)
        idx[~inside] = -1
        return idx

    def flat(self, cells):
        cells = np.atleast_2d(cells)
        return np.ravel_multi_index(cells.T, self.shape)

    def unflat(self, flat):
        return np.stack(np.unravel_index(np.asarray(flat), self.shape), axis=-1)

    def centers(self, cells):
        return self.lo + (np.atleast_2d(cells) + 0.5) * self.resolution


def _clip_segment(origin, d, lo, hi):
    t0, t1 = 0.0, 1.0
    for a in range(3):
        if d[a] == 0.0:
            if origin[a] < lo[a] or origin[a] > hi[a]:
                return None
            continue
        ta = (lo[a] - origin[a]) / d[a]
        tb = (hi[a] - origin[a]) / d[a]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
        if t0 > t1:
            return None
    return t0, t1


def traverse_voxels(origin, end, spec: GridSpec):
    """Cells crossed by the segment ``origin -> end``, in order from origin.

    Amanatides & Woo stepping restricted to the part of the segment inside the
    grid. Consecutive cells share a face; each cell appears once.
    """
    origin = np.asarray(origin, dtype=float)
    end = np.asarray(end, dtype=float)
    d = end - origin
    lo, hi = spec.lo, spec.hi
    clip = _clip_segment(origin, d, lo, hi)
    if clip is None:
        return []
    t0, t1 = clip
    res = spec.resolution
    c = spec.cell_of(np.clip(origin + t0 * d, lo, hi))[0]
    c_end = spec.cell_of(np.clip(origin + t1 * d, lo, hi))[0]
    step = np.sign(d).astype(np.int64)
    t_max = np.full(3, np.inf)
    t_delta = np.full(3, np.inf)
    for a in range(3):
        if step[a] > 0:
            t_max[a] = (lo[a] + (c[a] + 1) * res - origin[a]) / d[a]
            t_delta[a] = res / d[a]
        elif step[a] < 0:
            t_max[a] = (lo[a] + c[a] * res - origin[a]) / d[a]
            t_delta[a] = -res / d[a]
    cells = [tuple(int(x) for x in c)]
    # exactly |c_end - c|_1 face steps; only axes that still need to move are eligible
    remaining = np.abs(c_end - c)
    for _ in range(int(remaining.sum())):
        cand = np.where(remaining > 0, t_max, np.inf)
        a = int(np.argmin(cand))
        c[a] += step[a]
        remaining[a] -= 1
        t_max[a] += t_delta[a]
        cells.append(tuple(int(x) for x in c))
    return cells


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    part_of_vertex: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError("face index out of range")
        if len(f) and np.any((f[:, 0] == f[:, 1]) & (f[:, 1] == f[:, 2])):
            raise GeometryError("degenerate face with three identical indices")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.part_of_vertex is not None:
            p = np.asarray(self.part_of_vertex, dtype=np.int64).reshape(-1)
            if len(p) != len(v):
                raise GeometryError("part_of_vertex length must match vertex count")
            object.__setattr__(self, "part_of_vertex", p)

    def transformed(self, T: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(T.apply(self.vertices), self.faces, self.part_of_vertex)
