"""Voxel occupancy: static-map fusion over labeled multi-frame point clouds,
human mesh rasterisation, free/unknown completion and frame assembly.

Cells are addressed by flat C-order index into ``GridSpec.shape``.
"""
from __future__ import annotations

import csv
import io
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (CameraModel, GeometryError, GridSpec, RigidTransform, TriangleMesh,
                       ray_triangles, traverse_voxels)

log = logging.getLogger(__name__)

FREE, OCCUPIED, UNKNOWN = 0, 1, 2
STATE_NAMES = {FREE: "free", OCCUPIED: "occupied", UNKNOWN: "unknown"}

# 0 marks "no class" (free or unknown cells)
CLASS_NAMES = {0: "none", 1: "pedestrian", 2: "road", 3: "sidewalk", 4: "building",
               5: "vegetation", 6: "terrain", 7: "pole", 8: "vehicle", 9: "other"}
PEDESTRIAN = 1
THING_CLASSES = frozenset({PEDESTRIAN})
GROUND_CLASSES = frozenset({2, 3, 6})

VOX_MAGIC = b"VOX1"
VOX_VERSION = 1


def benchmark_spec() -> GridSpec:
    """The 0.2 m evaluation grid in front of the robot."""
    return GridSpec((0.4, -4.8, -1.0), (10.0, 4.8, 3.8), 0.2)


class OccupancyError(ValueError):
    pass


@dataclass
class VoxelGrid:
    spec: GridSpec
    state: np.ndarray                  # (nx, ny, nz) u8
    cls: np.ndarray                    # (nx, ny, nz) u8
    instance: np.ndarray               # (nx, ny, nz) u16
    velocity: np.ndarray | None = None  # (nx, ny, nz, 2) f32

    def __post_init__(self):
        shape = self.spec.shape
        self.state = np.asarray(self.state, dtype=np.uint8).reshape(shape)
        self.cls = np.asarray(self.cls, dtype=np.uint8).reshape(shape)
        self.instance = np.asarray(self.instance, dtype=np.uint16).reshape(shape)
        if self.velocity is not None:
            self.velocity = np.asarray(self.velocity, dtype=np.float32).reshape(shape + (2,))
        if np.any(self.state > UNKNOWN):
            raise OccupancyError("cell state must be free, occupied or unknown")
        if np.any((self.cls != 0) & (self.state != OCCUPIED)):
            raise OccupancyError("semantic class set on a non-occupied cell")
        thing = np.isin(self.cls, list(THING_CLASSES))
        if np.any((self.instance != 0) & ~thing):
            raise OccupancyError("instance id set on a non-thing cell")

    @classmethod
    def unknown(cls, spec: GridSpec, with_velocity=False):
        shape = spec.shape
        vel = np.zeros(shape + (2,), np.float32) if with_velocity else None
        return cls(spec, np.full(shape, UNKNOWN, np.uint8), np.zeros(shape, np.uint8),
                   np.zeros(shape, np.uint16), vel)

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid) or self.spec != other.spec:
            return False
        if (self.velocity is None) != (other.velocity is None):
            return False
        same = (np.array_equal(self.state, other.state) and np.array_equal(self.cls, other.cls)
                and np.array_equal(self.instance, other.instance))
        return same and (self.velocity is None or np.array_equal(self.velocity, other.velocity))

    def counts(self):
        return {STATE_NAMES[s]: int((self.state == s).sum()) for s in (FREE, OCCUPIED, UNKNOWN)}


# ---------------------------------------------------------------------------
# dynamic masking


@dataclass(frozen=True)
class Box3D:
    """Box with a yaw about +z; ``size`` is full extent (l, w, h)."""
    center: tuple
    size: tuple
    yaw: float = 0.0

    def contains(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=float)) - np.asarray(self.center, dtype=float)
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        local = np.stack([c * p[:, 0] + s * p[:, 1], -s * p[:, 0] + c * p[:, 1], p[:, 2]], axis=1)
        return np.all(np.abs(local) <= np.asarray(self.size, dtype=float) / 2, axis=1)


def dynamic_point_mask(points, boxes=(), masks=(), camera: CameraModel | None = None):
    """True for points that fall inside any dynamic box or image mask."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    hit = np.zeros(len(p), bool)
    for b in boxes:
        hit |= b.contains(p)
    if len(masks):
        if camera is None:
            raise OccupancyError("2D masks need a camera")
        pc = camera.to_camera(p)
        front = pc[:, 2] > 1e-9
        z = np.where(front, pc[:, 2], 1.0)
        u = np.floor(camera.fx * pc[:, 0] / z + camera.cx).astype(np.int64)
        v = np.floor(camera.fy * pc[:, 1] / z + camera.cy).astype(np.int64)
        ok = front & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
        for m in masks:
            m = np.asarray(m, dtype=bool)
            if m.shape != (camera.height, camera.width):
                raise OccupancyError("mask shape must match the camera image")
            inside = np.zeros(len(p), bool)
            inside[ok] = m[v[ok], u[ok]]
            hit |= inside
    return hit


def mask_dynamic_points(points, boxes=(), masks=(), camera: CameraModel | None = None):
    """Drop points inside dynamic-object boxes or 2D masks."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    return p[~dynamic_point_mask(p, boxes, masks, camera)]


# ---------------------------------------------------------------------------
# static accumulation and voting


@dataclass
class LabelCounts:
    """Sparse per-cell class histograms keyed by flat cell index."""
    counts: dict = field(default_factory=lambda: defaultdict(dict))

    def add(self, cell: int, label: int, n: int = 1):
        h = self.counts[int(cell)]
        h[int(label)] = h.get(int(label), 0) + int(n)

    def merge(self, other: "LabelCounts") -> "LabelCounts":
        out = LabelCounts()
        for src in (self, other):
            for cell, h in src.counts.items():
                for lab, n in h.items():
                    out.add(cell, lab, n)
        return out

    def __eq__(self, other):
        return isinstance(other, LabelCounts) and dict(self.counts) == dict(other.counts)

    def __len__(self):
        return len(self.counts)


@dataclass
class AccumulationReport:
    inserted: int = 0
    out_of_bounds: int = 0
    below_ground: int = 0


def _below_ground(points, labels, spec: GridSpec, threshold):
    """Points more than ``threshold`` below the lowest ground-class point of
    their (x, y) column; columns without ground points are not checked."""
    cells = spec.cell_of(points)
    inside = cells[:, 0] >= 0
    col = cells[:, 0] * spec.shape[1] + cells[:, 1]
    ground = inside & np.isin(labels, list(GROUND_CLASSES))
    bad = np.zeros(len(points), bool)
    if not ground.any():
        return bad
    floor = {}
    for c, z in zip(col[ground], points[ground, 2]):
        floor[c] = min(z, floor.get(c, np.inf))
    for i in np.flatnonzero(inside):
        f = floor.get(col[i])
        if f is not None and points[i, 2] < f - threshold:
            bad[i] = True
    return bad


def accumulate_frame(pose: RigidTransform, points, labels, spec: GridSpec,
                     counts: LabelCounts | None = None, ground_threshold: float | None = None,
                     report: AccumulationReport | None = None) -> LabelCounts:
    """Insert one labeled cloud, given in the sensor frame, into ``counts``."""
    counts = counts if counts is not None else LabelCounts()
    report = report if report is not None else AccumulationReport()
    p = pose.apply(np.asarray(points, dtype=float).reshape(-1, 3))
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(lab) != len(p):
        raise OccupancyError("one label per point required")
    if np.any((lab < 1) | (lab > 255)):
        raise OccupancyError("static labels must be class ids in [1, 255]")
    keep = np.ones(len(p), bool)
    if ground_threshold is not None:
        low = _below_ground(p, lab, spec, ground_threshold)
        report.below_ground += int(low.sum())
        keep &= ~low
    cells = spec.cell_of(p)
    inside = cells[:, 0] >= 0
    report.out_of_bounds += int((~inside & keep).sum())
    keep &= inside
    flat = spec.flat(cells[keep]) if keep.any() else np.zeros(0, np.int64)
    for c, l in zip(flat.tolist(), lab[keep].tolist()):
        counts.add(c, l)
    report.inserted += int(keep.sum())
    return counts


def accumulate_static(frames, spec: GridSpec, ground_threshold: float | None = None):
    """Accumulate ``(pose, points, labels)`` frames; returns ``(counts, report)``."""
    counts, report = LabelCounts(), AccumulationReport()
    for pose, points, labels in frames:
        accumulate_frame(pose, points, labels, spec, counts, ground_threshold, report)
    if report.out_of_bounds or report.below_ground:
        log.info("static accumulation skipped %d out-of-bounds and %d below-ground points",
                 report.out_of_bounds, report.below_ground)
    return counts, report


def vote_static(counts: LabelCounts) -> dict:
    """Majority label per cell; ties go to the lowest class id."""
    out = {}
    for cell, h in counts.counts.items():
        if h:
            out[cell] = min(h.items(), key=lambda kv: (-kv[1], kv[0]))[0]
    return out


# ---------------------------------------------------------------------------
# human rasterisation


def _surface_samples(mesh: TriangleMesh, spacing: float):
    v = mesh.vertices
    out = []
    for f in mesh.faces:
        a, b, c = v[f]
        longest = max(np.linalg.norm(b - a), np.linalg.norm(c - b), np.linalg.norm(a - c))
        n = max(1, int(np.ceil(longest / spacing)))
        i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        keep = i + j <= n
        u, w = i[keep] / n, j[keep] / n
        pts = a + u[:, None] * (b - a) + w[:, None] * (c - a)
        normal = np.cross(b - a, c - a)
        nn = np.linalg.norm(normal)
        out.append((pts, normal / nn if nn > 0 else np.zeros(3)))
    return out


def rasterize_human(mesh: TriangleMesh, instance_id: int, spec: GridSpec, fill: bool = False):
    """Cells covered by a closed, outward-oriented mesh surface.

    Returns ``{flat_cell: instance_id}``. The surface is sampled at no more
    than half a cell; samples are nudged a hair inwards, and towards the middle
    of their face, so that a face or edge lying exactly on a cell boundary
    belongs to the cell inside the body. With
    ``fill`` the interior cells (centre inside the mesh) are added too.
    """
    if not 0 < instance_id < 2 ** 16:
        raise OccupancyError("instance ids must lie in [1, 65535]")
    nudge = 1e-9 * spec.resolution
    cells = set()
    for pts, normal in _surface_samples(mesh, spec.resolution / 2):
        # edge and corner samples also move towards the face centre so that
        # they leave boundaries shared with neighbouring faces
        towards = pts.mean(0) - pts
        n = np.linalg.norm(towards, axis=1, keepdims=True)
        towards = np.divide(towards, n, out=np.zeros_like(towards), where=n > 0)
        c = spec.cell_of(pts - nudge * normal + nudge * towards)
        c = c[c[:, 0] >= 0]
        if len(c):
            cells.update(spec.flat(c).tolist())
    if fill and len(mesh.faces):
        cells.update(_interior_cells(mesh, spec))
    return {c: int(instance_id) for c in sorted(cells)}


def _interior_cells(mesh: TriangleMesh, spec: GridSpec):
    lo = np.maximum(mesh.vertices.min(0), spec.lo)
    hi = np.minimum(mesh.vertices.max(0), spec.hi)
    if np.any(hi < lo):
        return []
    c0 = spec.cell_of(lo[None])[0]
    c1 = spec.cell_of(hi[None])[0]
    rng = [np.arange(a, b + 1) for a, b in zip(c0, c1)]
    grid = np.stack(np.meshgrid(*rng, indexing="ij"), axis=-1).reshape(-1, 3)
    centers = spec.centers(grid)
    # parity along an oblique ray avoids grazing shared edges
    d = np.array([0.1234, 0.0711, 0.9893])
    d /= np.linalg.norm(d)
    v = mesh.vertices[mesh.faces]
    t = ray_triangles(centers, np.broadcast_to(d, centers.shape), v[:, 0], v[:, 1], v[:, 2])
    inside = (np.isfinite(t) & (t > 0)).sum(1) % 2 == 1
    return spec.flat(grid[inside]).tolist()


# ---------------------------------------------------------------------------
# free / unknown completion and assembly


def complete_free_unknown(occupied, origins, endpoints, spec: GridSpec, hit=None,
                          carve_max_range: bool = False):
    """Per-cell state array (flat) from occupied cells and sensor rays.

    Cells a ray passes before its end cell become free; occupied cells stay
    occupied; everything else is unknown. Rays flagged ``hit=False`` (no
    return, endpoint at maximum range) carve their whole length only when
    ``carve_max_range`` is set, and are ignored otherwise.
    """
    state = np.full(spec.n_cells, UNKNOWN, np.uint8)
    origins = np.broadcast_to(np.asarray(origins, dtype=float), np.shape(endpoints))
    endpoints = np.asarray(endpoints, dtype=float).reshape(-1, 3)
    origins = origins.reshape(-1, 3)
    hit = np.ones(len(endpoints), bool) if hit is None else np.asarray(hit, bool)
    for o, e, h in zip(origins, endpoints, hit):
        if not h and not carve_max_range:
            continue
        path = traverse_voxels(o, e, spec)
        if not path:
            continue
        if h and spec.contains(e[None])[0]:
            path = path[:-1]   # the return's own cell is evidence of a surface
        if path:
            state[spec.flat(np.array(path))] = FREE
    occ = np.asarray(sorted(occupied), dtype=np.int64) if not isinstance(occupied, np.ndarray) \
        else np.asarray(occupied, dtype=np.int64)
    state[occ] = OCCUPIED
    return state


def assemble_frame(static_voted: dict, human_cells: dict, free_unknown, spec: GridSpec,
                   velocities: dict | None = None) -> VoxelGrid:
    """Combine evidence with priority human > static > free > unknown.

    ``human_cells`` maps flat cell -> instance id (a cell claimed by several
    instances goes to the lowest id); ``velocities`` maps instance id ->
    (vx, vy) and, when given, fills the velocity channel of human cells.
    """
    fu = np.asarray(free_unknown, dtype=np.uint8).reshape(-1)
    if fu.size != spec.n_cells:
        raise OccupancyError("free/unknown state array does not match the grid spec")
    state = fu.copy()
    cls = np.zeros(spec.n_cells, np.uint8)
    inst = np.zeros(spec.n_cells, np.uint16)
    for c, lab in static_voted.items():
        if lab == PEDESTRIAN:
            raise OccupancyError("pedestrian is a dynamic class and cannot come from the static map")
        state[c] = OCCUPIED
        cls[c] = lab
    for c, i in human_cells.items():
        if inst[c] == 0 or i < inst[c]:
            inst[c] = i
        state[c] = OCCUPIED
        cls[c] = PEDESTRIAN
    vel = None
    if velocities is not None:
        vel = np.zeros((spec.n_cells, 2), np.float32)
        for c in np.flatnonzero(inst):
            vel[c] = velocities.get(int(inst[c]), (0.0, 0.0))
    return VoxelGrid(spec, state, cls, inst, vel)


def merge_human_cells(*per_instance: dict) -> dict:
    """Union of rasterised instances, lowest instance id winning shared cells."""
    out = {}
    for cells in per_instance:
        for c, i in cells.items():
            out[c] = min(i, out.get(c, i))
    return out


# ---------------------------------------------------------------------------
# files


_HEADER = struct.Struct("<4sI6dd3IB")


def _record_dtype(with_velocity):
    fields = [("state", "u1"), ("cls", "u1"), ("instance", "<u2")]
    if with_velocity:
        fields.append(("velocity", "<f4", (2,)))
    return np.dtype(fields)


def grid_to_bytes(grid: VoxelGrid) -> bytes:
    s = grid.spec
    vel = grid.velocity is not None
    head = _HEADER.pack(VOX_MAGIC, VOX_VERSION, *s.min_bound, *s.max_bound, s.resolution,
                        *s.shape, int(vel))
    rec = np.zeros(s.n_cells, _record_dtype(vel))
    rec["state"] = grid.state.reshape(-1)
    rec["cls"] = grid.cls.reshape(-1)
    rec["instance"] = grid.instance.reshape(-1)
    if vel:
        rec["velocity"] = grid.velocity.reshape(-1, 2)
    return head + rec.tobytes()


def grid_from_bytes(data: bytes) -> VoxelGrid:
    if len(data) < _HEADER.size:
        raise OccupancyError("truncated voxel grid header")
    magic, version, *rest = _HEADER.unpack_from(data)
    if magic != VOX_MAGIC:
        raise OccupancyError(f"bad voxel grid magic {magic!r}")
    if version != VOX_VERSION:
        raise OccupancyError(f"unsupported voxel grid version {version}")
    lo, hi, res, shape, vel = rest[0:3], rest[3:6], rest[6], tuple(rest[7:10]), bool(rest[10])
    spec = GridSpec(lo, hi, res)
    if spec.shape != shape:
        raise OccupancyError("voxel grid header cell counts disagree with its bounds")
    dt = _record_dtype(vel)
    body = data[_HEADER.size:]
    if len(body) != spec.n_cells * dt.itemsize:
        raise OccupancyError("voxel grid record count does not match its header")
    rec = np.frombuffer(body, dt)
    return VoxelGrid(spec, rec["state"], rec["cls"], rec["instance"],
                     rec["velocity"].copy() if vel else None)


def save_grid(path, grid: VoxelGrid):
    from .io import atomic_write_bytes
    atomic_write_bytes(path, grid_to_bytes(grid))


def load_grid(path) -> VoxelGrid:
    return grid_from_bytes(Path(path).read_bytes())


def grid_to_csv(grid: VoxelGrid) -> str:
    """One row per cell in flat order: i, j, k, state, class, instance[, vx, vy]."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["i", "j", "k", "state", "class", "instance"]
    if grid.velocity is not None:
        head += ["vx", "vy"]
    w.writerow(head)
    idx = grid.spec.unflat(np.arange(grid.spec.n_cells))
    st, cl, ins = grid.state.reshape(-1), grid.cls.reshape(-1), grid.instance.reshape(-1)
    vel = grid.velocity.reshape(-1, 2) if grid.velocity is not None else None
    for n, (i, j, k) in enumerate(idx):
        row = [i, j, k, STATE_NAMES[int(st[n])], int(cl[n]), int(ins[n])]
        if vel is not None:
            row += [repr(float(vel[n, 0])), repr(float(vel[n, 1]))]
        w.writerow(row)
    return buf.getvalue()


__all__ = [
    "FREE", "OCCUPIED", "UNKNOWN", "CLASS_NAMES", "PEDESTRIAN", "THING_CLASSES",
    "GROUND_CLASSES", "GeometryError", "OccupancyError", "VoxelGrid", "Box3D",
    "LabelCounts", "AccumulationReport", "benchmark_spec", "dynamic_point_mask",
    "mask_dynamic_points", "accumulate_frame", "accumulate_static", "vote_static",
    "rasterize_human", "merge_human_cells", "complete_free_unknown", "assemble_frame",
    "grid_to_bytes", "grid_from_bytes", "save_grid", "load_grid", "grid_to_csv",
]
