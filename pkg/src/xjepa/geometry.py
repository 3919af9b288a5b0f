"""Camera placement, view grids, point-cloud normalization and augmentation.

Conventions: right-handed frame, column vectors, angles in degrees at the API
boundary. ``R = R_y(yaw) @ R_x(pitch) @ R_z(roll)`` and the camera sits at
``R @ (0, 0, r) + c`` looking back at ``c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

PARAMETERIZATIONS = ("spherical", "cylindrical", "cartesian")
DEFAULT_YAWS = 6
DEFAULT_PITCHES = 6
PITCH_LIMIT = 60.0


@dataclass
class PointCloud:
    """N x 3 positions with optional per-point colors, normals and a class label.

    ``yaw_offset`` records the controlled yaw rotation (degrees) applied by
    :func:`augment`, so pose-aware consumers can recover the object frame.
    """

    positions: np.ndarray
    colors: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    label: Optional[int] = None
    yaw_offset: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.positions)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValueError(f"positions must be N x 3 with N >= 1, got {pos.shape}")
        for name in ("colors", "normals"):
            arr = getattr(self, name)
            if arr is not None and np.shape(arr) != pos.shape:
                raise ValueError(f"{name} shape {np.shape(arr)} != positions shape {pos.shape}")
        self.positions = pos

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class CameraPose:
    yaw: float
    pitch: float
    roll: float = 0.0
    radius: float = 1.0
    center: tuple = (0.0, 0.0, 0.0)
    parameterization: str = "spherical"

    def __post_init__(self):
        if self.roll != 0.0:
            raise ValueError("camera roll is fixed at 0")
        if not self.radius > 0:
            raise ValueError(f"camera radius must be positive, got {self.radius}")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"unknown parameterization {self.parameterization!r}")


@dataclass(frozen=True)
class ViewGrid:
    """Ordered, discrete set of renderable views.

    Index layout is yaw-major: ``v = yaw_idx * pitch_count + pitch_idx``.
    """

    views: tuple
    parameterization: str = "spherical"
    yaw_count: int = DEFAULT_YAWS
    pitch_count: int = DEFAULT_PITCHES

    def __len__(self) -> int:
        return len(self.views)

    @property
    def yaw_step(self) -> float:
        return 360.0 / self.yaw_count

    def pose(self, v: int, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> CameraPose:
        yaw, pitch = self.views[v]
        return CameraPose(yaw=yaw, pitch=pitch, radius=radius, center=tuple(center),
                          parameterization=self.parameterization)

    def shift(self, v: int, k: int) -> int:
        """View index seen from a cloud rotated by ``k`` yaw increments (see :func:`augment`)."""
        yaw_idx, pitch_idx = divmod(v, self.pitch_count)
        return ((yaw_idx - k) % self.yaw_count) * self.pitch_count + pitch_idx

    def spec(self) -> str:
        pitches = sorted({p for _, p in self.views})
        if self.pitch_count == 1 and len(pitches) == 1 and pitches[0] != 0.0:
            return f"fixed-pitch:{pitches[0]:g}:{self.yaw_count}"
        return f"{self.parameterization}:{self.yaw_count}x{self.pitch_count}"


@dataclass(frozen=True)
class AugmentConfig:
    scale_range: tuple = (1.0, 1.0)
    translate_range: float = 0.0
    jitter_sigma: float = 0.0
    jitter_clip: float = 0.0
    rotation_steps: int = 0  # max |k| yaw-grid increments; 0 disables rotation

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid scale_range {self.scale_range}")
        if self.jitter_clip < 0 or self.jitter_sigma < 0 or self.translate_range < 0:
            raise ValueError("jitter/translate parameters must be non-negative")
        if self.rotation_steps < 0:
            raise ValueError("rotation_steps must be >= 0")


def _check_finite(*angles):
    for a in angles:
        if not math.isfinite(a):
            raise ValueError(f"non-finite angle {a!r}")


def _cos_sin(deg: float):
    q, rem = divmod(deg, 90.0)
    if rem == 0.0:
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(q) % 4]
    a = math.radians(deg)
    return math.cos(a), math.sin(a)


def rotation_matrix(yaw: float, pitch: float, roll: float = 0.0) -> np.ndarray:
    """``R_y(yaw) @ R_x(pitch) @ R_z(roll)`` for angles in degrees."""
    _check_finite(yaw, pitch, roll)
    cy, sy = _cos_sin(yaw)
    cp, sp = _cos_sin(pitch)
    cr, sr = _cos_sin(roll)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return ry @ rx @ rz


def scene_radius(cloud) -> float:
    """Bounding-box diagonal ``||max(s) - min(s)||``."""
    pos = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if pos.size == 0:
        raise ValueError("empty cloud")
    pos = np.asarray(pos, dtype=np.float64)
    return float(np.linalg.norm(pos.max(axis=0) - pos.min(axis=0)))


def camera_position(pose: CameraPose) -> np.ndarray:
    """Camera location for ``pose`` under its parameterization.

    Spherical placement is ``R @ (0, 0, r) + c``. Cylindrical keeps the yaw and
    the spherical height but sits at horizontal distance ``r`` from the axis.
    Cartesian pushes the spherical direction onto the cube of half-size ``r``.
    """
    c = np.asarray(pose.center, dtype=np.float64)
    offset = rotation_matrix(pose.yaw, pose.pitch, pose.roll) @ np.array([0.0, 0.0, pose.radius])
    if pose.parameterization == "cylindrical":
        cy, sy = _cos_sin(pose.yaw)
        offset = np.array([pose.radius * sy, offset[1], pose.radius * cy])
    elif pose.parameterization == "cartesian":
        offset = offset * (pose.radius / np.abs(offset).max())
    return offset + c


def view_direction(pose: CameraPose) -> np.ndarray:
    """Unit vector from the camera towards the scene center."""
    d = np.asarray(pose.center, dtype=np.float64) - camera_position(pose)
    return d / np.linalg.norm(d)


def make_view_grid(parameterization: str = "spherical", yaw_count: int = DEFAULT_YAWS,
                   pitch_count: int = DEFAULT_PITCHES,
                   fixed_pitch: Optional[float] = None) -> ViewGrid:
    """Deterministic yaw-major grid of (yaw, pitch) slots.

    Yaws are evenly spaced over the full turn; pitches span [-60, 60] degrees,
    or a single ``fixed_pitch`` when given (pitch_count is then 1).
    """
    if parameterization not in PARAMETERIZATIONS:
        raise ValueError(f"unknown parameterization {parameterization!r}")
    if yaw_count < 1 or pitch_count < 1:
        raise ValueError("yaw_count and pitch_count must be >= 1")
    yaws = [360.0 * i / yaw_count for i in range(yaw_count)]
    if fixed_pitch is not None:
        _check_finite(fixed_pitch)
        pitches = [float(fixed_pitch)]
    elif pitch_count == 1:
        pitches = [0.0]
    else:
        pitches = [float(p) for p in np.linspace(-PITCH_LIMIT, PITCH_LIMIT, pitch_count)]
    views = tuple((y, p) for y in yaws for p in pitches)
    return ViewGrid(views=views, parameterization=parameterization,
                    yaw_count=yaw_count, pitch_count=len(pitches))


def parse_view_spec(spec: str) -> ViewGrid:
    """Parse ``spherical[:YxP]``, ``cylindrical[:YxP]``, ``cartesian[:YxP]`` or ``fixed-pitch:DEG:YAWS``."""
    parts = spec.strip().split(":")
    kind = parts[0]
    if kind == "fixed-pitch":
        if len(parts) != 3:
            raise ValueError(f"bad view spec {spec!r}; expected fixed-pitch:DEG:YAWS")
        return make_view_grid("spherical", int(parts[2]), 1, fixed_pitch=float(parts[1]))
    if kind not in PARAMETERIZATIONS or len(parts) > 2:
        raise ValueError(f"bad view spec {spec!r}")
    if len(parts) == 2:
        y, p = parts[1].lower().split("x")
        return make_view_grid(kind, int(y), int(p))
    return make_view_grid(kind)


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has unit norm."""
    pos = np.asarray(cloud.positions, dtype=np.float64)
    centered = pos - pos.mean(axis=0)
    scale = np.linalg.norm(centered, axis=1).max()
    if not scale > 0:
        raise ValueError("cannot normalize a cloud whose points all coincide")
    out = (centered / scale).astype(cloud.positions.dtype, copy=False)
    return replace(cloud, positions=out)


def augment(cloud: PointCloud, cfg: AugmentConfig, rng: np.random.Generator,
            grid: Optional[ViewGrid] = None):
    """Random scale, translation, clipped jitter and a controlled yaw rotation.

    Returns ``(cloud, k)`` where ``k`` is the number of yaw-grid increments the
    cloud was rotated by. A camera at view ``grid.shift(v, k)`` sees the
    augmented cloud the way view ``v`` sees the original.
    """
    pos = np.asarray(cloud.positions, dtype=np.float64)
    normals = cloud.normals
    k = 0
    if cfg.rotation_steps > 0:
        step = grid.yaw_step if grid is not None else 360.0 / DEFAULT_YAWS
        k = int(rng.integers(-cfg.rotation_steps, cfg.rotation_steps + 1))
        if k != 0:
            rot = rotation_matrix(-k * step, 0.0)
            pos = pos @ rot.T
            if normals is not None:
                normals = (np.asarray(normals, dtype=np.float64) @ rot.T).astype(cloud.normals.dtype)
    lo, hi = cfg.scale_range
    scale = rng.uniform(lo, hi) if hi > lo else lo
    pos = pos * scale
    if cfg.translate_range > 0:
        pos = pos + rng.uniform(-cfg.translate_range, cfg.translate_range, size=3)
    if cfg.jitter_sigma > 0:
        noise = rng.normal(0.0, cfg.jitter_sigma, size=pos.shape)
        pos = pos + np.clip(noise, -cfg.jitter_clip, cfg.jitter_clip)
    if k == 0 and scale == 1.0 and cfg.translate_range == 0 and cfg.jitter_sigma == 0:
        return cloud, 0
    step = grid.yaw_step if grid is not None else 360.0 / DEFAULT_YAWS
    out = replace(cloud, positions=pos.astype(cloud.positions.dtype), normals=normals,
                  yaw_offset=cloud.yaw_offset - k * step)
    return out, k
