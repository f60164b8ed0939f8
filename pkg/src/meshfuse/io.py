"""File formats: JSON params / keypoints / camera, CSV point clouds, the INI
run configuration, and atomic writes."""
from __future__ import annotations

import configparser
import json
import os
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .body_model import BodyParams, ModelError
from .fit import DATASET_TABLE, DatasetConfig, FitWeights, OptimizeConfig
from .geometry import CameraModel, GeometryError, GridSpec, RigidTransform
from .lidar_sim import SensorSpec, SensorSpecError, builtin_specs
from .occupancy import benchmark_spec
from .visibility import Keypoints2D, VisibilityConfig


class InputError(ValueError):
    """Unreadable or invalid input file; the message names file and line."""


class ConfigError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    atomic_write_text(path, dumps_json(obj))


def read_json(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc


def _field(path, d, key):
    try:
        return d[key]
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path}: missing field {key!r}") from exc


# ---------------------------------------------------------------------------
# params, keypoints, camera


def save_params(path, params: BodyParams):
    write_json(path, params.to_dict())


def load_params(path) -> BodyParams:
    d = read_json(path)
    try:
        return BodyParams(*(_field(path, d, k) for k in ("beta", "theta_global", "theta_body", "t_cam")))
    except (ModelError, ValueError, TypeError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"{path}: invalid body parameters: {exc}") from exc


def save_keypoints(path, kp: Keypoints2D):
    write_json(path, {"keypoints": kp.to_records()})


def load_keypoints(path) -> Keypoints2D:
    d = read_json(path)
    recs = _field(path, d, "keypoints")
    try:
        return Keypoints2D.from_records(recs)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: invalid keypoint records: {exc}") from exc


def camera_to_dict(cam: CameraModel):
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "pose": {"rotation": cam.pose.rotation.tolist(),
                     "translation": cam.pose.translation.tolist()}}


def camera_from_dict(d, path="<camera>") -> CameraModel:
    try:
        pose = d.get("pose")
        T = RigidTransform(pose["rotation"], pose["translation"]) if pose else RigidTransform()
        return CameraModel(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                           int(d["width"]), int(d["height"]), T)
    except (KeyError, TypeError, ValueError, GeometryError) as exc:
        raise InputError(f"{path}: invalid camera: {exc}") from exc


def save_camera(path, cam: CameraModel):
    write_json(path, camera_to_dict(cam))


def load_camera(path) -> CameraModel:
    return camera_from_dict(read_json(path), path)


# ---------------------------------------------------------------------------
# point clouds


def cloud_to_csv(points, labels=None) -> str:
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    lines = ["x,y,z" + (",label" if labels is not None else "")]
    for i, q in enumerate(p):
        row = ",".join(repr(float(v)) for v in q)
        if labels is not None:
            row += f",{int(labels[i])}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def save_cloud(path, points, labels=None):
    atomic_write_text(path, cloud_to_csv(points, labels))


def load_cloud(path):
    """Read ``x,y,z[,label]`` CSV; returns ``(points, labels or None)``."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise InputError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    if not lines:
        raise InputError(f"{path}:1: empty point-cloud file")
    head = [h.strip() for h in lines[0].split(",")]
    if head[:3] != ["x", "y", "z"] or len(head) > 4 or (len(head) == 4 and head[3] != "label"):
        raise InputError(f"{path}:1: expected header 'x,y,z' or 'x,y,z,label'")
    pts, labs = [], []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != len(head):
            raise InputError(f"{path}:{n}: expected {len(head)} columns, got {len(cells)}")
        try:
            xyz = [float(c) for c in cells[:3]]
            if len(head) == 4:
                labs.append(int(cells[3]))
        except ValueError as exc:
            raise InputError(f"{path}:{n}: {exc}") from exc
        if not all(np.isfinite(xyz)):
            raise InputError(f"{path}:{n}: non-finite coordinate")
        pts.append(xyz)
    P = np.array(pts, dtype=float).reshape(-1, 3)
    return P, (np.array(labs, dtype=np.int64) if len(head) == 4 else None)


# ---------------------------------------------------------------------------
# triangle meshes (Wavefront OBJ subset: v and f records)


def mesh_to_obj(vertices, faces) -> str:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(vertices, dtype=float).reshape(-1, 3).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=np.int64).reshape(-1, 3).tolist()]
    return "\n".join(lines) + "\n"


def save_obj(path, vertices, faces):
    atomic_write_text(path, mesh_to_obj(vertices, faces))


def load_obj(path):
    """Read ``v`` and triangular ``f`` records; returns ``(vertices, faces)``."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise InputError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    verts, faces = [], []
    for n, line in enumerate(lines, start=1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        try:
            if tok[0] == "v":
                verts.append([float(t) for t in tok[1:4]])
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise InputError(f"{path}:{n}: only triangular faces are supported")
                faces.append([int(t.split("/")[0]) - 1 for t in tok[1:4]])
        except InputError:
            raise
        except ValueError as exc:
            raise InputError(f"{path}:{n}: {exc}") from exc
    V = np.array(verts, dtype=float).reshape(-1, 3)
    F = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(F) and (F.min() < 0 or F.max() >= len(V)):
        raise InputError(f"{path}: face index out of range")
    return V, F


# ---------------------------------------------------------------------------
# run configuration

WEIGHT_KEYS = ("rho", "lambda_theta", "lambda_a", "lambda_beta", "lambda_3d", "lambda_occ",
               "w", "j_conf")
SENSOR_KEYS = tuple(f.name for f in fields(SensorSpec) if f.name != "name")
OPT_KEYS = tuple(f.name for f in fields(OptimizeConfig))


@dataclass
class RunConfig:
    datasets: dict = field(default_factory=dict)       # name -> DatasetConfig
    sensors: dict = field(default_factory=dict)        # name -> SensorSpec
    grid: GridSpec = field(default_factory=benchmark_spec)
    optimizer: OptimizeConfig = field(default_factory=OptimizeConfig)

    def dataset(self, name: str) -> DatasetConfig:
        if name not in self.datasets:
            raise ConfigError(f"no weight section {name!r}; available: {sorted(self.datasets)}")
        return self.datasets[name]

    def sensor(self, name: str) -> SensorSpec:
        if name not in self.sensors:
            raise ConfigError(f"unknown sensor {name!r}; available: {sorted(self.sensors)}")
        return self.sensors[name]


def default_config_text() -> str:
    """The built-in configuration, written out as INI."""
    cp = configparser.ConfigParser()
    for name, row in DATASET_TABLE.items():
        cp[f"weights:{name}"] = {k: repr(float(v)) for k, v in zip(WEIGHT_KEYS, row)}
    for name, s in builtin_specs().items():
        cp[f"sensor:{name}"] = {k: repr(getattr(s, k)) for k in SENSOR_KEYS}
    g = benchmark_spec()
    cp["grid"] = {"min": " ".join(map(repr, g.min_bound)), "max": " ".join(map(repr, g.max_bound)),
                  "resolution": repr(g.resolution)}
    o = OptimizeConfig()
    cp["optimizer"] = {k: repr(getattr(o, k)) for k in OPT_KEYS}
    buf = []

    class _W:
        def write(self, s):
            buf.append(s)

    cp.write(_W())
    return "".join(buf)


def _num(section, key, value, kind=float):
    try:
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: expected a number, got {value!r}") from exc


def parse_config(text: str, source="<config>") -> RunConfig:
    """Parse INI text layered over the built-in defaults."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(default_config_text(), source="<defaults>")
        cp.read_string(text, source=str(source))
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = RunConfig()
    for sec in cp.sections():
        kind, _, name = sec.partition(":")
        s = cp[sec]
        try:
            if kind == "weights":
                unknown = set(s) - set(WEIGHT_KEYS)
                if unknown:
                    raise ConfigError(f"[{sec}] unknown keys {sorted(unknown)}")
                missing = [k for k in WEIGHT_KEYS if k not in s]
                if missing:
                    raise ConfigError(f"[{sec}] missing keys {missing}")
                v = {k: _num(sec, k, s[k]) for k in WEIGHT_KEYS}
                cfg.datasets[name] = DatasetConfig(
                    FitWeights(v["rho"], v["lambda_theta"], v["lambda_a"], v["lambda_beta"],
                               v["lambda_3d"], v["lambda_occ"]),
                    VisibilityConfig(v["w"], v["j_conf"]))
            elif kind == "sensor":
                unknown = set(s) - set(SENSOR_KEYS)
                if unknown:
                    raise ConfigError(f"[{sec}] unknown keys {sorted(unknown)}")
                kw = {}
                for k in SENSOR_KEYS:
                    if k in s:
                        typ = int if k in ("vertical_channels", "horizontal_channels") else float
                        kw[k] = _num(sec, k, s[k], typ)
                missing = [k for k in ("vertical_channels", "horizontal_channels") if k not in kw]
                if missing:
                    raise ConfigError(f"[{sec}] missing keys {missing}")
                cfg.sensors[name] = SensorSpec(name, **kw)
            elif sec == "grid":
                lo = [_num(sec, "min", x) for x in s["min"].split()]
                hi = [_num(sec, "max", x) for x in s["max"].split()]
                cfg.grid = GridSpec(lo, hi, _num(sec, "resolution", s["resolution"]))
            elif sec == "optimizer":
                unknown = set(s) - set(OPT_KEYS)
                if unknown:
                    raise ConfigError(f"[{sec}] unknown keys {sorted(unknown)}")
                kw = {k: _num(sec, k, s[k], int if k in ("max_iters", "patience", "divergence_window")
                              else float) for k in OPT_KEYS}
                cfg.optimizer = OptimizeConfig(**kw)
            else:
                raise ConfigError(f"unknown config section [{sec}]")
        except (ValueError, GeometryError, SensorSpecError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"[{sec}] {exc}") from exc
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return parse_config("")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    return parse_config(text, path)
