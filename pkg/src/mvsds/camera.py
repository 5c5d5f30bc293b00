"""Camera geometry.

Conventions: world is right-handed with +y up; objects live in [-0.5, 0.5]^3.
A ``CameraPose`` stores the camera-to-world transform.  The rotation columns
are the camera's (right, up, back) axes, so the camera looks along its local
-z axis (OpenGL style) and ``translation`` is the eye position in world space.
Image rows run top to bottom; pixel (r, c) has its center at
ndc = (2 (c + 0.5) / res - 1, 1 - 2 (r + 0.5) / res).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FOV_RANGE = (15.0, 60.0)
ELEVATION_RANGE = (0.0, 30.0)
DISTANCE_SCALE_RANGE = (0.9, 1.1)
OBJECT_HALF_SIZE = 0.5


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray
    fov_deg: float

    @property
    def focal(self) -> float:
        return ndc_focal(self.fov_deg)

    def matrix(self) -> np.ndarray:
        """4x4 camera-to-world matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class CameraRig:
    poses: list[CameraPose]
    azimuth_deg: np.ndarray
    elevation_deg: float
    distance: float
    fov_deg: float = field(default=40.0)

    def __len__(self) -> int:
        return len(self.poses)


def ndc_focal(fov_deg: float) -> float:
    return 1.0 / math.tan(math.radians(fov_deg) / 2.0)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), fov_deg: float = 40.0) -> CameraPose:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    if np.linalg.norm(fwd) < 1e-12:
        raise ValueError("eye and target coincide")
    fwd = _unit(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9 * max(np.linalg.norm(up), 1e-12):
        raise ValueError("up vector is parallel to the viewing direction")
    right = _unit(right)
    true_up = np.cross(right, fwd)
    rot = np.stack([right, true_up, -fwd], axis=1)
    return CameraPose(rotation=rot, translation=eye.copy(), fov_deg=float(fov_deg))


def spherical_eye(azimuth_deg: float, elevation_deg: float, distance: float) -> np.ndarray:
    """Eye position; azimuth 0 looks at the object from +z, azimuth grows toward +x."""
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    return distance * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])


def orbit_pose(azimuth_deg: float, elevation_deg: float, distance: float, fov_deg: float) -> CameraPose:
    return look_at(spherical_eye(azimuth_deg, elevation_deg, distance), fov_deg=fov_deg)


def make_rig(azimuths_deg, elevation_deg: float, distance: float, fov_deg: float) -> CameraRig:
    az = np.asarray(azimuths_deg, dtype=np.float64)
    poses = [orbit_pose(a, elevation_deg, distance, fov_deg) for a in az]
    return CameraRig(poses=poses, azimuth_deg=az, elevation_deg=float(elevation_deg),
                     distance=float(distance), fov_deg=float(fov_deg))


def canonical_rig(n_views: int = 4, elevation_deg: float = 15.0, fov_deg: float = 40.0) -> CameraRig:
    """Fixed evaluation rig: uniform azimuths from 0, object-filling distance."""
    dist = OBJECT_HALF_SIZE * ndc_focal(fov_deg)
    return make_rig(np.arange(n_views) * 360.0 / n_views, elevation_deg, dist, fov_deg)


def sample_rig_params(rng: np.random.Generator, size=None):
    """Draw (fov, elevation, distance) from the dataset camera distribution."""
    fov = rng.uniform(*FOV_RANGE, size=size)
    elev = rng.uniform(*ELEVATION_RANGE, size=size)
    scale = rng.uniform(*DISTANCE_SCALE_RANGE, size=size)
    dist = OBJECT_HALF_SIZE / np.tan(np.radians(fov) / 2.0) * scale
    return fov, elev, dist


def sample_dataset_rig(rng: np.random.Generator, n_azimuths: int = 32) -> CameraRig:
    if n_azimuths < 1:
        raise ValueError("n_azimuths must be >= 1")
    fov, elev, dist = sample_rig_params(rng)
    az = np.arange(n_azimuths) * (360.0 / n_azimuths)
    return make_rig(az, float(elev), float(dist), float(fov))


def orthogonal_indices(start: int, n_total: int, F: int) -> list[int]:
    if F < 1 or n_total % F != 0:
        raise ValueError(f"{n_total} views cannot be split into {F} evenly spaced views")
    gap = n_total // F
    return [(start + k * gap) % n_total for k in range(F)]


def select_orthogonal_views(rng: np.random.Generator, rig, F: int = 4) -> list[int]:
    """Random start index, then views spaced ``n/F`` apart (90 degrees for 32/4)."""
    n_total = rig if isinstance(rig, int) else len(rig)
    if F < 1 or n_total % F != 0:
        raise ValueError(f"{n_total} views cannot be split into {F} evenly spaced views")
    return orthogonal_indices(int(rng.integers(n_total)), n_total, F)


def normalize_extrinsic(pose: CameraPose) -> np.ndarray:
    """Row-major 4x4 camera-to-world with the translation scaled to unit norm."""
    norm = float(np.linalg.norm(pose.translation))
    if norm < 1e-12:
        raise FloatingPointError("camera at the origin has no direction to normalize")
    m = pose.matrix()
    m[:3, 3] /= norm
    return m.reshape(16)


def camera_rays(pose: CameraPose, res: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray origins and unit directions, each ``res x res x 3``."""
    f = pose.focal
    centers = (np.arange(res) + 0.5) / res * 2.0 - 1.0
    xs = centers[None, :].repeat(res, 0)
    ys = -centers[:, None].repeat(res, 1)
    d_cam = np.stack([xs / f, ys / f, -np.ones_like(xs)], axis=-1)
    d_world = d_cam @ pose.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.translation, d_world.shape).copy()
    return origins, d_world


def project(pose: CameraPose, points, res: int) -> np.ndarray:
    """Project world points to continuous pixel coordinates ``(col, row)``."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    p_cam = (p - pose.translation) @ pose.rotation
    depth = -p_cam[:, 2]
    x_ndc = pose.focal * p_cam[:, 0] / depth
    y_ndc = pose.focal * p_cam[:, 1] / depth
    col = (x_ndc + 1.0) * res / 2.0 - 0.5
    row = (1.0 - y_ndc) * res / 2.0 - 0.5
    return np.stack([col, row], axis=-1)
