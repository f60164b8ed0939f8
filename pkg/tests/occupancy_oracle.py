"""Brute-force single-pass reference for frame assembly.

Every cell is decided on its own from the complete evidence: human cells,
the majority label of all static points that land in it, and whether any
sensor ray passes through its interior before reaching its return cell.
Nothing is shared with the incremental implementation beyond the grid spec.
"""
import numpy as np

from meshfuse.occupancy import FREE, GROUND_CLASSES, OCCUPIED, PEDESTRIAN, UNKNOWN


def in_box(p, center, size, yaw):
    c, s = np.cos(-yaw), np.sin(-yaw)
    d = p - np.asarray(center, float)
    local = np.array([c * d[0] - s * d[1], s * d[0] + c * d[1], d[2]])
    return bool(np.all(np.abs(local) <= np.asarray(size, float) / 2))


def cell_index(spec, p):
    lo, hi, n = np.array(spec.min_bound), np.array(spec.max_bound), np.array(spec.shape)
    if np.any(p < lo) or np.any(p > hi):
        return None
    ijk = np.minimum(np.floor((p - lo) / spec.resolution).astype(int), n - 1)
    return int(np.ravel_multi_index(tuple(ijk), spec.shape))


def segments_cross_box(o, ends, lo, hi):
    """For each segment o->ends[i], True if it passes through the open box (lo, hi)."""
    d = ends - o
    t0 = np.zeros(len(ends))
    t1 = np.ones(len(ends))
    ok = np.ones(len(ends), bool)
    for a in range(3):
        flat = d[:, a] == 0
        ok &= ~flat | ((lo[a] < o[a]) & (o[a] < hi[a]))
        with np.errstate(divide="ignore", invalid="ignore"):
            ta, tb = (lo[a] - o[a]) / d[:, a], (hi[a] - o[a]) / d[:, a]
        t0 = np.where(flat, t0, np.maximum(t0, np.minimum(ta, tb)))
        t1 = np.where(flat, t1, np.minimum(t1, np.maximum(ta, tb)))
    return ok & (t0 < t1)


def oracle_frame(spec, frames, humans, ground_threshold=None):
    """``frames``: list of (rotation, translation, points, labels, boxes) with
    boxes as (center, size, yaw) in sensor coordinates; ``humans``: {cell: id}
    for the frame being assembled, whose rays are those of ``frames[-1]``."""
    counts = {}
    for R, t, pts, labels, boxes in frames:
        world = pts @ np.asarray(R).T + t
        keep = [not any(in_box(p, *b) for b in boxes) for p in pts]
        # per-frame ground floor of each (x, y) column
        floor = {}
        if ground_threshold is not None:
            for p, lab, k in zip(world, labels, keep):
                c = cell_index(spec, p)
                if k and c is not None and lab in GROUND_CLASSES:
                    col = c // spec.shape[2]
                    floor[col] = min(floor.get(col, np.inf), p[2])
        for p, lab, k in zip(world, labels, keep):
            c = cell_index(spec, p)
            if not k or c is None:
                continue
            f = floor.get(c // spec.shape[2])
            if f is not None and p[2] < f - ground_threshold:
                continue
            counts.setdefault(c, {}).setdefault(int(lab), 0)
            counts[c][int(lab)] += 1

    R, t, pts, _, _ = frames[-1]
    world = pts @ np.asarray(R).T + t
    origin = np.asarray(t, float)
    n = spec.n_cells
    state = np.full(n, UNKNOWN, np.uint8)
    cls = np.zeros(n, np.uint8)
    inst = np.zeros(n, np.uint16)
    lo0, res = np.array(spec.min_bound), spec.resolution
    end_cells = np.array([-1 if (k := cell_index(spec, e)) is None else k for e in world])
    for c in range(n):
        ijk = np.array(np.unravel_index(c, spec.shape))
        lo, hi = lo0 + ijk * res, lo0 + (ijk + 1) * res
        if c in humans:
            state[c], cls[c], inst[c] = OCCUPIED, PEDESTRIAN, humans[c]
        elif c in counts:
            h = counts[c]
            best = max(h.values())
            state[c], cls[c] = OCCUPIED, min(k for k, v in h.items() if v == best)
        elif np.any(segments_cross_box(origin, world, lo, hi) & (end_cells != c)):
            state[c] = FREE
    return state, cls, inst


def random_scene(seed, spec, n_frames=3, n_points=300):
    """Labeled frames with small random poses, dynamic boxes and one or two
    sphere-shaped humans; returns ``(frames, human_meshes)``."""
    from scipy.spatial.transform import Rotation

    from conftest import icosphere

    rng = np.random.default_rng(seed)
    lo, hi = np.array(spec.min_bound), np.array(spec.max_bound)
    frames = []
    for _ in range(n_frames):
        R = Rotation.from_rotvec(rng.normal(0, 0.05, 3)).as_matrix()
        t = lo + rng.uniform(0.0, 0.3, 3) * (hi - lo)
        world = rng.uniform(lo - 0.1 * (hi - lo), hi + 0.1 * (hi - lo), (n_points, 3))
        pts = (world - t) @ R          # into the sensor frame
        labels = rng.integers(2, 10, n_points)
        boxes = [(tuple(rng.uniform(-1, 1, 3)), tuple(rng.uniform(0.2, 1.0, 3)),
                  float(rng.uniform(-np.pi, np.pi))) for _ in range(rng.integers(0, 3))]
        frames.append((R, t, pts, labels, boxes))
    humans = [icosphere(1, rng.uniform(0.2, 0.5), lo + rng.uniform(0.2, 0.8, 3) * (hi - lo))
              for _ in range(rng.integers(1, 3))]
    return frames, humans
