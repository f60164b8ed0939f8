"""Synthetic spinning-LiDAR sweeps over triangle meshes.

The sensor sits at the camera centre with the camera's orientation: forward
is camera +z, elevation is measured towards camera -y (up in the image) and
azimuth rotates from +z towards +x. Beams form a regular lattice of
``vertical_channels`` elevations spanning ``vertical_fov_deg`` and
``horizontal_channels`` azimuths spanning 360 degrees; only beams whose
direction projects inside the image are kept.

Noise model, per returned beam:

* pointing error: independent N(mean, std^2) degree offsets on elevation and
  azimuth, applied before intersection;
* range error: ``s * bias + N(0, std^2)`` with ``s`` a fair +-1 coin;
* dropout with a fixed probability.

All random draws are taken once for the whole beam lattice and indexed by
``(row, col)``, so a beam's noise depends only on the seed and its lattice
position.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geometry import CameraModel, TriangleMesh, ray_mesh_intersect


class SensorSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SensorSpec:
    name: str
    vertical_channels: int
    horizontal_channels: int
    range_noise_bias: float = 25.0      # mm, applied with a random sign
    range_noise_std: float = 10.0       # mm
    angular_noise_mean: float = 0.0     # deg
    angular_noise_std: float = 0.01     # deg
    range_min: float = 0.5              # m
    range_max: float = 90.0             # m
    dropout_prob: float = 0.10
    vertical_fov_deg: float = 45.0

    def __post_init__(self):
        if self.vertical_channels < 1 or self.horizontal_channels < 1:
            raise SensorSpecError("channel counts must be at least 1")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise SensorSpecError("dropout probability must lie in [0, 1)")
        if not 0.0 < self.range_min < self.range_max:
            raise SensorSpecError("need 0 < range_min < range_max")
        if self.range_noise_std < 0 or self.angular_noise_std < 0:
            raise SensorSpecError("noise standard deviations must be non-negative")
        if not 0.0 < self.vertical_fov_deg <= 180.0:
            raise SensorSpecError("vertical field of view must lie in (0, 180] degrees")

    def noiseless(self):
        return SensorSpec(self.name, self.vertical_channels, self.horizontal_channels,
                          range_noise_bias=0.0, range_noise_std=0.0, angular_noise_mean=0.0,
                          angular_noise_std=0.0, range_min=self.range_min,
                          range_max=self.range_max, dropout_prob=0.0,
                          vertical_fov_deg=self.vertical_fov_deg)

    def to_dict(self):
        return asdict(self)


def builtin_specs():
    return {
        "Ouster-32": SensorSpec("Ouster-32", 32, 512),
        "Ouster-64": SensorSpec("Ouster-64", 64, 1024),
        "Ouster-128": SensorSpec("Ouster-128", 128, 2048),
    }


def get_spec(name: str) -> SensorSpec:
    specs = builtin_specs()
    if name not in specs:
        raise SensorSpecError(f"unknown sensor {name!r}; choose from {sorted(specs)}")
    return specs[name]


@dataclass
class Sweep:
    points: np.ndarray        # (N, 3) sensor frame
    beam_ids: np.ndarray      # (N, 2) (row, col)
    true_ranges: np.ndarray   # (N,) noiseless distance along the perturbed beam
    bias_sign: np.ndarray     # (N,) +-1 sign of the range bias
    faces: np.ndarray         # (N,) index of the mesh face each beam hit

    def __len__(self):
        return len(self.points)

    @property
    def ranges(self):
        return np.linalg.norm(self.points, axis=1)

    def to_world(self, camera: CameraModel):
        return camera.pose.inverse().apply(self.points)


def lattice_angles(spec: SensorSpec):
    """Elevation (rows) and azimuth (cols) of the beam lattice in radians."""
    V, H = spec.vertical_channels, spec.horizontal_channels
    fov = np.deg2rad(spec.vertical_fov_deg)
    el = fov / 2 - (np.arange(V) + 0.5) * fov / V
    az = -np.pi + (np.arange(H) + 0.5) * 2 * np.pi / H
    return el, az


def beam_directions(el, az):
    """Unit beam directions in the camera frame."""
    el, az = np.broadcast_arrays(el, az)
    ce = np.cos(el)
    return np.stack([ce * np.sin(az), -np.sin(el), ce * np.cos(az)], axis=-1)


def generate_rays(spec: SensorSpec, camera: CameraModel):
    """Frustum-restricted rays as ``(origins, dirs, rows, cols)``.

    Origins and directions are expressed in the camera (sensor) frame, so the
    origins are all zero.
    """
    el, az = lattice_angles(spec)
    rr, cc = np.meshgrid(np.arange(len(el)), np.arange(len(az)), indexing="ij")
    d = beam_directions(el[rr], az[cc]).reshape(-1, 3)
    rows, cols = rr.reshape(-1), cc.reshape(-1)
    keep = _in_frustum(camera, d)
    d = d[keep]
    return np.zeros_like(d), d, rows[keep], cols[keep]


def _in_frustum(camera, d):
    z = d[:, 2]
    ok = z > 1e-12
    zs = np.where(ok, z, 1.0)
    u = camera.fx * d[:, 0] / zs + camera.cx
    v = camera.fy * d[:, 1] / zs + camera.cy
    return ok & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)


def simulate_sweep(spec: SensorSpec, mesh: TriangleMesh, camera: CameraModel, seed: int) -> Sweep:
    """Simulate one sweep of ``spec`` against ``mesh`` (world frame)."""
    rng = np.random.default_rng(seed)
    V, H = spec.vertical_channels, spec.horizontal_channels
    # one draw per lattice beam, fixed order, independent of which beams hit
    d_el = rng.standard_normal((V, H))
    d_az = rng.standard_normal((V, H))
    sign = np.where(rng.random((V, H)) < 0.5, -1.0, 1.0)
    gauss = rng.standard_normal((V, H))
    drop = rng.random((V, H))

    _, _, rows, cols = generate_rays(spec, camera)
    el, az = lattice_angles(spec)
    mu, sd = spec.angular_noise_mean, spec.angular_noise_std
    el_p = el[rows] + np.deg2rad(mu + sd * d_el[rows, cols])
    az_p = az[cols] + np.deg2rad(mu + sd * d_az[rows, cols])
    dirs = beam_directions(el_p, az_p).reshape(-1, 3)

    verts_cam = camera.pose.apply(mesh.vertices)
    t, face = ray_mesh_intersect(np.zeros(3), dirs, verts_cam, mesh.faces)
    # pointing noise may push a border beam out of the image
    hit = np.isfinite(t) & (t >= spec.range_min) & (t <= spec.range_max) & _in_frustum(camera, dirs)
    idx = np.flatnonzero(hit)
    r, c = rows[idx], cols[idx]
    noise = (sign[r, c] * spec.range_noise_bias + gauss[r, c] * spec.range_noise_std) * 1e-3
    rng_noisy = t[idx] + noise
    keep = (drop[r, c] >= spec.dropout_prob) & (rng_noisy >= spec.range_min) & (rng_noisy <= spec.range_max)
    idx, r, c = idx[keep], r[keep], c[keep]
    pts = dirs[idx] * rng_noisy[keep][:, None]
    return Sweep(points=pts, beam_ids=np.stack([r, c], axis=1).astype(np.int64),
                 true_ranges=t[idx], bias_sign=sign[r, c], faces=face[idx])
