"""Articulated body model: shape blendshapes, joint regression, forward
kinematics and linear blend skinning.

The global rotation and camera translation are applied after skinning, about
the origin, so ``(theta_global, t_cam)`` is a plain rigid transform of the
body-frame mesh. Pose-corrective blendshapes are not modelled.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (GeometryError, RigidTransform, TriangleMesh,
                       axis_angle_to_matrix, axis_angle_to_matrix_jacobian)

ARCHIVE_MAGIC = b"BMA1"
ARCHIVE_VERSION = 1
BETA_BOUND = 10.0


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class BodyModel:
    template_vertices: np.ndarray          # (V, 3)
    faces: np.ndarray                      # (F, 3)
    shape_dirs: np.ndarray                 # (V, 3, B)
    joint_regressor: np.ndarray            # (J, V)
    kinematic_parents: np.ndarray          # (J,), root = -1
    skinning_weights: np.ndarray           # (V, J)
    part_of_vertex: np.ndarray             # (V,)
    part_of_joint: np.ndarray              # (J,)
    keypoint_map: np.ndarray               # (J,), detector joint id or -1
    part_joint_sets: dict = field(default_factory=dict)   # part -> detector ids
    hinge_joints: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))
    joint_names: tuple = ()
    part_names: tuple = ()

    def __post_init__(self):
        f64 = lambda a: np.ascontiguousarray(a, dtype=np.float64)
        i64 = lambda a: np.ascontiguousarray(a, dtype=np.int64)
        T = f64(self.template_vertices).reshape(-1, 3)
        V = len(T)
        faces = i64(self.faces).reshape(-1, 3)
        S = f64(self.shape_dirs)
        if S.ndim == 2:
            S = S.reshape(V, 3, -1)
        Jreg = f64(self.joint_regressor)
        parents = i64(self.kinematic_parents).reshape(-1)
        W = f64(self.skinning_weights)
        J = len(parents)
        if S.shape[:2] != (V, 3):
            raise ModelError("shape_dirs must be V x 3 x B")
        if Jreg.shape != (J, V) or W.shape != (V, J):
            raise ModelError("joint regressor / skinning weight dimensions disagree")
        if len(faces) and (faces.min() < 0 or faces.max() >= V):
            raise ModelError("face index out of range")
        if np.any(W < -1e-12) or np.abs(W.sum(1) - 1).max() > 1e-6:
            raise ModelError("skinning weights must be non-negative with unit row sums")
        if np.abs(Jreg.sum(1) - 1).max() > 1e-6:
            raise ModelError("joint regressor rows must sum to one")
        roots = np.flatnonzero(parents < 0)
        if len(roots) != 1 or roots[0] != 0:
            raise ModelError("kinematic tree needs exactly one root at index 0")
        # parents before children also rules out cycles
        if np.any(parents[1:] >= np.arange(1, J)):
            raise ModelError("kinematic parents must precede their children")
        pov = i64(self.part_of_vertex).reshape(-1)
        poj = i64(self.part_of_joint).reshape(-1)
        kmap = i64(self.keypoint_map).reshape(-1)
        if len(pov) != V or len(poj) != J or len(kmap) != J:
            raise ModelError("part / keypoint maps have wrong length")
        hinge = i64(self.hinge_joints).reshape(-1, 3)
        if len(hinge) and (hinge[:, 0].min() < 1 or hinge[:, 0].max() >= J):
            raise ModelError("hinge joints must be non-root body joints")
        pjs = {int(k): tuple(int(x) for x in v) for k, v in dict(self.part_joint_sets).items()}
        for name, arr in [("template_vertices", T), ("faces", faces), ("shape_dirs", S),
                          ("joint_regressor", Jreg), ("kinematic_parents", parents),
                          ("skinning_weights", W), ("part_of_vertex", pov),
                          ("part_of_joint", poj), ("keypoint_map", kmap), ("hinge_joints", hinge)]:
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "part_joint_sets", pjs)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "part_names", tuple(self.part_names))

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def n_joints(self):
        return self.kinematic_parents.shape[0]

    @property
    def n_betas(self):
        return self.shape_dirs.shape[2]

    def mesh(self, vertices) -> TriangleMesh:
        return TriangleMesh(vertices, self.faces, self.part_of_vertex)


@dataclass(frozen=True)
class BodyParams:
    beta: np.ndarray
    theta_global: np.ndarray
    theta_body: np.ndarray
    t_cam: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).reshape(-1).copy()
        tg = np.asarray(self.theta_global, dtype=float).reshape(3).copy()
        tb = np.asarray(self.theta_body, dtype=float).reshape(-1, 3).copy()
        t = np.asarray(self.t_cam, dtype=float).reshape(3).copy()
        for a in (beta, tg, tb, t):
            if not np.all(np.isfinite(a)):
                raise ModelError("body parameters must be finite")
        if len(beta) and np.abs(beta).max() > BETA_BOUND:
            raise ModelError(f"|beta| exceeds sanity bound {BETA_BOUND}")
        for name, a in [("beta", beta), ("theta_global", tg), ("theta_body", tb), ("t_cam", t)]:
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @classmethod
    def zeros(cls, model: BodyModel):
        return cls(np.zeros(model.n_betas), np.zeros(3),
                   np.zeros((model.n_joints - 1, 3)), np.zeros(3))

    def to_vector(self):
        return np.concatenate([self.beta, self.theta_global,
                               self.theta_body.reshape(-1), self.t_cam])

    @classmethod
    def from_vector(cls, x, n_betas, n_joints, check=True):
        x = np.asarray(x, dtype=float)
        B = n_betas
        nb = 3 * (n_joints - 1)
        parts = (x[:B], x[B:B + 3], x[B + 3:B + 3 + nb].reshape(-1, 3), x[B + 3 + nb:B + 6 + nb])
        if check:
            return cls(*parts)
        obj = object.__new__(cls)
        for name, a in zip(("beta", "theta_global", "theta_body", "t_cam"), parts):
            object.__setattr__(obj, name, a)
        return obj

    def replace(self, **kw):
        d = dict(beta=self.beta, theta_global=self.theta_global,
                 theta_body=self.theta_body, t_cam=self.t_cam)
        d.update(kw)
        return BodyParams(**d)

    def to_dict(self):
        return {"beta": self.beta.tolist(), "theta_global": self.theta_global.tolist(),
                "theta_body": self.theta_body.tolist(), "t_cam": self.t_cam.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["beta"], d["theta_global"], d["theta_body"], d["t_cam"])

    @property
    def global_transform(self) -> RigidTransform:
        return RigidTransform.from_axis_angle(self.theta_global, self.t_cam)


# ---------------------------------------------------------------------------
# forward map


def shaped_template(model: BodyModel, beta):
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if beta.shape[0] != model.n_betas:
        raise ModelError(f"expected {model.n_betas} shape coefficients, got {beta.shape[0]}")
    return model.template_vertices + model.shape_dirs @ beta


def regress_joints(model: BodyModel, vertices):
    vertices = np.asarray(vertices, dtype=float)
    if vertices.shape != (model.n_vertices, 3):
        raise ModelError("vertex array does not match the model")
    return model.joint_regressor @ vertices


def _check_params(model, params):
    if params.beta.shape[0] != model.n_betas or params.theta_body.shape[0] != model.n_joints - 1:
        raise ModelError("parameter dimensions do not match the model")


def forward(model: BodyModel, params: BodyParams):
    """Run the forward map and keep intermediates for :func:`backward`."""
    _check_params(model, params)
    for a in (params.beta, params.theta_global, params.theta_body, params.t_cam):
        if not np.all(np.isfinite(a)):
            raise ModelError("non-finite body parameters")
    s = shaped_template(model, params.beta)
    Jr = model.joint_regressor @ s
    parents = model.kinematic_parents
    J = model.n_joints
    R_loc = np.empty((J, 3, 3))
    R_loc[0] = np.eye(3)
    for j in range(1, J):
        R_loc[j] = axis_angle_to_matrix(params.theta_body[j - 1])
    M = np.empty((J, 3, 3))
    g = np.empty((J, 3))
    M[0] = np.eye(3)
    g[0] = Jr[0]
    for j in range(1, J):
        p = parents[j]
        M[j] = M[p] @ R_loc[j]
        g[j] = g[p] + M[p] @ (Jr[j] - Jr[p])
    b = g - np.einsum("jab,jb->ja", M, Jr)
    W = model.skinning_weights
    A = (W @ M.reshape(J, 9)).reshape(-1, 3, 3)
    u = np.einsum("vab,vb->va", A, s) + W @ b
    Rg = axis_angle_to_matrix(params.theta_global)
    verts = u @ Rg.T + params.t_cam
    joints = g @ Rg.T + params.t_cam
    cache = dict(s=s, Jr=Jr, R_loc=R_loc, M=M, g=g, A=A, u=u, Rg=Rg, params=params)
    return verts, joints, cache


def pose_mesh(model: BodyModel, params: BodyParams):
    """Posed vertices (V, 3) and posed joints (J, 3)."""
    verts, joints, _ = forward(model, params)
    return verts, joints


def backward(model: BodyModel, cache, d_verts=None, d_joints=None):
    """Vector-Jacobian product of :func:`forward`.

    Given loss gradients w.r.t. posed vertices and joints, return the gradient
    as a flat vector laid out like :meth:`BodyParams.to_vector`.
    """
    J = model.n_joints
    params = cache["params"]
    s, Jr, R_loc, M, g, A, u, Rg = (cache[k] for k in ("s", "Jr", "R_loc", "M", "g", "A", "u", "Rg"))
    dV = np.zeros_like(u) if d_verts is None else np.asarray(d_verts, dtype=float)
    dJ = np.zeros_like(g) if d_joints is None else np.asarray(d_joints, dtype=float)

    d_t = dV.sum(0) + dJ.sum(0)
    dRg = dV.T @ u + dJ.T @ g
    d_tg = np.einsum("iab,ab->i", axis_angle_to_matrix_jacobian(params.theta_global), dRg)

    du = dV @ Rg
    dg = dJ @ Rg
    W = model.skinning_weights
    dM = np.einsum("vj,va,vb->jab", W, du, s)
    db = W.T @ du
    ds = np.einsum("vab,va->vb", A, du)
    dJr = np.zeros_like(Jr)

    # b_j = g_j - M_j Jr_j
    dg += db
    dM -= np.einsum("ja,jb->jab", db, Jr)
    dJr -= np.einsum("jab,ja->jb", M, db)

    d_tb = np.zeros((J - 1, 3))
    parents = model.kinematic_parents
    for j in range(J - 1, 0, -1):
        p = parents[j]
        dM[p] += dM[j] @ R_loc[j].T
        dR = M[p].T @ dM[j]
        d_tb[j - 1] = np.einsum("iab,ab->i", axis_angle_to_matrix_jacobian(params.theta_body[j - 1]), dR)
        dg[p] += dg[j]
        dM[p] += np.outer(dg[j], Jr[j] - Jr[p])
        back = M[p].T @ dg[j]
        dJr[j] += back
        dJr[p] -= back
    dJr[0] += dg[0]

    ds += model.joint_regressor.T @ dJr
    d_beta = np.einsum("vak,va->k", model.shape_dirs, ds)
    return np.concatenate([d_beta, d_tg, d_tb.reshape(-1), d_t])


def mesh_edges(faces):
    """Unique undirected edges of a face list as an (E, 2) array, sorted."""
    faces = np.asarray(getattr(faces, "faces", faces), dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


def occluded_joints_from_parts(model: BodyModel, parts):
    """Non-root joints whose body part is occluded."""
    parts = set(int(p) for p in parts)
    return [j for j in range(1, model.n_joints) if int(model.part_of_joint[j]) in parts]


# ---------------------------------------------------------------------------
# archive I/O
#
# Layout (little endian):
#   b"BMA1"  u32 version  u32 V  u32 F  u32 J  u32 B  u32 n_entries
#   n_entries x { u16 name_len, name (utf-8), u8 kind, u8 ndim, ndim x u64 dims, payload }
# kind: 0 = float64 array, 1 = int64 array, 2 = utf-8 JSON document (ndim = 1, dims = byte length)

_KIND_F64, _KIND_I64, _KIND_JSON = 0, 1, 2


def _write_entry(buf, name, arr, kind):
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    if kind == _KIND_JSON:
        payload = json.dumps(arr, sort_keys=True).encode("utf-8")
        buf.write(struct.pack("<BB", kind, 1))
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
        return
    dt = "<f8" if kind == _KIND_F64 else "<i8"
    a = np.ascontiguousarray(arr, dtype=dt)
    buf.write(struct.pack("<BB", kind, a.ndim))
    buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    buf.write(a.tobytes())


def save_model(model: BodyModel, path):
    buf = io.BytesIO()
    pjs = sorted((p, j) for p, js in model.part_joint_sets.items() for j in js)
    entries = [
        ("template_vertices", model.template_vertices, _KIND_F64),
        ("faces", model.faces, _KIND_I64),
        ("shape_dirs", model.shape_dirs, _KIND_F64),
        ("joint_regressor", model.joint_regressor, _KIND_F64),
        ("kinematic_parents", model.kinematic_parents, _KIND_I64),
        ("skinning_weights", model.skinning_weights, _KIND_F64),
        ("part_of_vertex", model.part_of_vertex, _KIND_I64),
        ("part_of_joint", model.part_of_joint, _KIND_I64),
        ("keypoint_map", model.keypoint_map, _KIND_I64),
        ("hinge_joints", model.hinge_joints, _KIND_I64),
        ("part_joint_sets", np.array(pjs, dtype=np.int64).reshape(-1, 2), _KIND_I64),
        ("names", {"joints": list(model.joint_names), "parts": list(model.part_names)}, _KIND_JSON),
    ]
    buf.write(ARCHIVE_MAGIC)
    buf.write(struct.pack("<6I", ARCHIVE_VERSION, model.n_vertices, len(model.faces),
                          model.n_joints, model.n_betas, len(entries)))
    for name, arr, kind in entries:
        _write_entry(buf, name, arr, kind)
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> BodyModel:
    data = Path(path).read_bytes()
    if data[:4] != ARCHIVE_MAGIC:
        raise ModelError(f"{path}: not a body-model archive (bad magic)")
    if len(data) < 28:
        raise ModelError(f"{path}: truncated archive header")
    version, V, F, J, B, n = struct.unpack_from("<6I", data, 4)
    if version != ARCHIVE_VERSION:
        raise ModelError(f"{path}: unsupported archive version {version}")
    off = 28
    entries = {}
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + ln].decode("utf-8")
            off += ln
            kind, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            dims = struct.unpack_from(f"<{ndim}Q", data, off)
            off += 8 * ndim
            if kind == _KIND_JSON:
                entries[name] = json.loads(data[off:off + dims[0]].decode("utf-8"))
                off += dims[0]
                continue
            count = int(np.prod(dims)) if ndim else 1
            dt = "<f8" if kind == _KIND_F64 else "<i8"
            entries[name] = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(dims).copy()
            off += 8 * count
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ModelError(f"{path}: truncated or corrupt archive") from exc
    missing = [k for k in ("template_vertices", "faces", "shape_dirs", "joint_regressor",
                           "kinematic_parents", "skinning_weights", "part_of_vertex",
                           "part_of_joint", "keypoint_map") if k not in entries]
    if missing:
        raise ModelError(f"{path}: archive lacks {', '.join(missing)}")
    pjs: dict = {}
    for p, j in entries.get("part_joint_sets", np.zeros((0, 2), np.int64)):
        pjs.setdefault(int(p), []).append(int(j))
    names = entries.get("names", {})
    model = BodyModel(
        template_vertices=entries["template_vertices"], faces=entries["faces"],
        shape_dirs=entries["shape_dirs"], joint_regressor=entries["joint_regressor"],
        kinematic_parents=entries["kinematic_parents"], skinning_weights=entries["skinning_weights"],
        part_of_vertex=entries["part_of_vertex"], part_of_joint=entries["part_of_joint"],
        keypoint_map=entries["keypoint_map"], part_joint_sets=pjs,
        hinge_joints=entries.get("hinge_joints", np.zeros((0, 3), np.int64)),
        joint_names=names.get("joints", ()), part_names=names.get("parts", ()))
    if (model.n_vertices, len(model.faces), model.n_joints, model.n_betas) != (V, F, J, B):
        raise ModelError(f"{path}: header dimensions disagree with array contents")
    return model


# ---------------------------------------------------------------------------
# toy model

TOY_JOINTS = ("pelvis", "chest", "l_shoulder", "l_elbow", "l_wrist",
              "r_shoulder", "r_elbow", "r_wrist")
TOY_PARTS = ("torso", "l_upper_arm", "l_forearm", "r_upper_arm", "r_forearm")


def _tube(centers, axis, radii, k, cap_out):
    """Closed elliptic tube through ring centres along a unit axis."""
    axis = np.asarray(axis, dtype=float)
    helper = np.array([0.0, 0.0, 1.0])
    e1 = np.cross(helper, axis)
    if np.linalg.norm(e1) < 1e-9:
        e1 = np.array([1.0, 0.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    phi = 2 * np.pi * np.arange(k) / k
    verts = []
    for c, (ra, rb) in zip(centers, radii):
        ring = c + ra * np.cos(phi)[:, None] * e1 + rb * np.sin(phi)[:, None] * e2
        verts.append(ring)
    verts = np.concatenate(verts)
    n_rings = len(centers)
    faces = []
    for r in range(n_rings - 1):
        for m in range(k):
            a, b = r * k + m, r * k + (m + 1) % k
            c, d = a + k, b + k
            faces += [(a, b, d), (a, d, c)]
    first = len(verts)
    caps = np.array([centers[0] - cap_out[0] * axis, centers[-1] + cap_out[1] * axis])
    verts = np.concatenate([verts, caps])
    last_ring = (n_rings - 1) * k
    for m in range(k):
        faces.append((first, (m + 1) % k, m))
        faces.append((first + 1, last_ring + m, last_ring + (m + 1) % k))
    faces = np.array(faces, dtype=np.int64)
    # orient outward: positive enclosed volume
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    if np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() < 0:
        faces = faces[:, ::-1].copy()
    return verts, faces


def make_toy_model(density: int = 2) -> BodyModel:
    """A small deterministic eight-joint upper-body model for tests and demos.

    Torso tube plus two arms (upper arm, forearm, hand) with elliptic cross
    sections, so that twist about a limb axis is geometrically observable.
    ``density`` multiplies the ring count and ring resolution; ``density=1``
    gives a ~190 vertex mesh, the default ~690.
    """
    if density < 1:
        raise ModelError("density must be a positive integer")
    joints = np.array([[0.0, 0.0, 0.0], [0.0, 0.2, 0.0],
                       [0.2, 0.45, 0.0], [0.5, 0.45, 0.0], [0.74, 0.45, 0.0],
                       [-0.2, 0.45, 0.0], [-0.5, 0.45, 0.0], [-0.74, 0.45, 0.0]])
    parents = np.array([-1, 0, 1, 2, 3, 1, 5, 6])
    J = len(parents)
    verts, faces, part, wts, ring_of_joint = [], [], [], [], {}
    radial = []     # vertex offset from its ring centre, for the girth blendshape

    def add(v, f, p, w, centers, k):
        base = sum(len(x) for x in verts)
        verts.append(v)
        faces.append(f + base)
        part.extend(p)
        wts.extend(w)
        for r, c in enumerate(centers):
            radial.extend(v[r * k:(r + 1) * k] - c)
        radial.extend(np.zeros((len(v) - len(centers) * k, 3)))
        return base

    def ramp(x, lo, hi):
        return float(np.clip((x - lo) / (hi - lo), 0.0, 1.0))

    k = 8 * density
    ys = np.linspace(0.0, 0.5, 5 * density + 1)
    tc = np.stack([np.zeros_like(ys), ys, np.zeros_like(ys)], axis=1)
    tv, tf = _tube(tc, [0, 1, 0], [(0.16, 0.10)] * len(ys), k, (0.05, 0.04))
    ring_w = []
    for y in ys:
        c = ramp(y, 0.05, 0.35)
        ring_w.append(np.array([1 - c, c] + [0.0] * (J - 2)))
    tw = [ring_w[r] for r in range(len(ys)) for _ in range(k)] + [ring_w[0], ring_w[-1]]
    base = add(tv, tf, [0] * len(tv), tw, tc, k)
    for j, y in ((0, 0.0), (1, 0.2)):
        r = int(np.argmin(np.abs(ys - y)))
        assert abs(ys[r] - y) < 1e-12
        ring_of_joint[j] = base + np.arange(r * k, (r + 1) * k)

    k = 6 * density
    step = 0.06 / density
    xs = 0.2 + step * np.arange(int(round(0.6 / step)) + 1)
    ctrl_x = [0.2, 0.35, 0.5, 0.62, 0.74, 0.8]
    ra = np.interp(xs, ctrl_x, [0.05, 0.048, 0.045, 0.04, 0.035, 0.04])
    rb = np.interp(xs, ctrl_x, [0.035, 0.034, 0.032, 0.03, 0.026, 0.02])
    for side, (sh, el, wr, p_up, p_lo) in {+1: (2, 3, 4, 1, 2), -1: (5, 6, 7, 3, 4)}.items():
        ac = np.stack([side * xs, np.full(len(xs), 0.45), np.zeros(len(xs))], axis=1)
        av, af = _tube(ac, [side, 0, 0], list(zip(ra, rb)), k, (0.03, 0.03))
        rw, rp = [], []
        for x in xs:
            s_, e_, w_ = ramp(x, 0.05, 0.35), ramp(x, 0.42, 0.58), ramp(x, 0.68, 0.80)
            row = np.zeros(J)
            row[1] = 1 - s_
            row[sh] = s_ * (1 - e_)
            row[el] = s_ * e_ * (1 - w_)
            row[wr] = s_ * e_ * w_
            rw.append(row)
            rp.append(p_up if x < 0.56 else p_lo)
        n = len(xs)
        aw = [rw[r] for r in range(n) for _ in range(k)] + [rw[0], rw[-1]]
        ap = [rp[r] for r in range(n) for _ in range(k)] + [rp[0], rp[-1]]
        base = add(av, af, ap, aw, ac, k)
        for j, x in ((sh, 0.2), (el, 0.5), (wr, 0.74)):
            r = int(np.argmin(np.abs(xs - x)))
            assert abs(xs[r] - x) < 1e-9
            ring_of_joint[j] = base + np.arange(r * k, (r + 1) * k)

    T = np.concatenate(verts)
    F = np.concatenate(faces)
    V = len(T)
    Jreg = np.zeros((J, V))
    for j, ring in ring_of_joint.items():
        Jreg[j, ring] = 1.0 / len(ring)
    assert np.allclose(Jreg @ T, joints)
    part = np.array(part)
    radial = np.array(radial)

    S = np.zeros((V, 3, 4))
    S[:, :, 0] = 0.1 * T                                        # overall scale
    arm = part > 0
    sgn = np.sign(T[:, 0])
    S[~arm, 0, 1] = 0.2 * T[~arm, 0]                           # shoulder width
    S[arm, 0, 1] = 0.06 * sgn[arm]
    S[arm, 0, 2] = 0.16 * (np.abs(T[arm, 0]) - 0.2) * sgn[arm]   # arm length
    S[:, :, 3] = 0.3 * radial                                   # girth

    return BodyModel(
        template_vertices=T, faces=F, shape_dirs=S, joint_regressor=Jreg,
        kinematic_parents=parents, skinning_weights=np.array(wts),
        part_of_vertex=part, part_of_joint=np.array([0, 0, 1, 2, 2, 3, 4, 4]),
        keypoint_map=np.arange(J),
        part_joint_sets={0: (0, 1, 2, 5), 1: (2, 3), 2: (3, 4), 3: (5, 6), 4: (6, 7)},
        # elbows flex in the frontal plane (about z); positive coordinate = hyperextension
        hinge_joints=np.array([[3, 2, -1], [6, 2, 1]]),
        joint_names=TOY_JOINTS, part_names=TOY_PARTS)


__all__ = [
    "BodyModel", "BodyParams", "ModelError", "backward", "forward", "load_model",
    "make_toy_model", "mesh_edges", "pose_mesh", "regress_joints", "save_model",
    "shaped_template", "occluded_joints_from_parts", "GeometryError",
]
