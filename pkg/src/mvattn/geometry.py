"""SE(3) camera stack: virtual cameras on a view sphere, shared pinhole
intrinsics, projective matrices, projection and reprojection error.

COORDINATE CONVENTIONS
======================
World frame: right-handed, y up.
Camera frame: right-handed, y up, camera looks along -z (OpenGL style).
Poses are camera-to-world. A camera built from (azimuth, elevation, radius)
sits on a sphere of the given radius around the origin and faces the origin.

Rotations use the right-handed active convention. Angles are degrees at the
API boundary and radians internally.

Image frame: u right, v down, origin at the top-left pixel corner.
All geometry values are immutable after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class BehindCameraError(ValueError):
    """Raised when a point does not lie strictly in front of the camera."""


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ViewSpec:
    """A viewpoint on the camera sphere: azimuth/elevation in degrees, radius in world units."""

    azimuth_deg: float
    elevation_deg: float
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"radius must be > 0, got {self.radius}")
        if not -90.0 <= self.elevation_deg <= 90.0:
            raise ValueError(f"elevation must be in [-90, 90], got {self.elevation_deg}")
        object.__setattr__(self, "azimuth_deg", float(self.azimuth_deg) % 360.0)


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world pose. rotation is 3x3 orthonormal (det +1), translation the camera position."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _frozen(self.rotation)
        t = _frozen(self.translation)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"bad pose shapes {r.shape}, {t.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def matrix(self) -> np.ndarray:
        """4x4 camera-to-world matrix T."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse_matrix(self) -> np.ndarray:
        """Closed-form world-to-camera matrix [R^T, -R^T t]."""
        m = np.eye(4)
        m[:3, :3] = self.rotation.T
        m[:3, 3] = -self.rotation.T @ self.translation
        return m


@dataclass(frozen=True)
class Intrinsics:
    """Shared pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be > 0, got fx={self.fx}, fy={self.fy}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")

    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix K."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class ProjectiveMatrix:
    """4x4 per-view projective matrix: blockdiag(K, 1) composed with the world-to-camera transform."""

    m: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = _frozen(self.m)
        if m.shape != (4, 4):
            raise ValueError(f"projective matrix must be 4x4, got {m.shape}")
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("projective matrix is numerically singular")
        object.__setattr__(self, "m", m)

    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.m)


def rotation_y(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_x(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def build_virtual_camera(spec: ViewSpec) -> CameraPose:
    """Place a camera on the view sphere: R = R_y(azimuth) @ R_x(elevation), position R @ [0, 0, radius]."""
    r = rotation_y(spec.azimuth_deg) @ rotation_x(spec.elevation_deg)
    t = r @ np.array([0.0, 0.0, spec.radius])
    return CameraPose(rotation=r, translation=t)


def build_intrinsics(width: int, height: int, fov_h_deg: float = 60.0) -> Intrinsics:
    """Pinhole intrinsics from a horizontal field of view, principal point at the image centre."""
    if not 0.0 < fov_h_deg < 180.0:
        raise ValueError(f"horizontal fov must be in (0, 180), got {fov_h_deg}")
    if width <= 0 or height <= 0:
        raise ValueError(f"image size must be positive, got {width}x{height}")
    fx = (width / 2.0) / math.tan(math.radians(fov_h_deg) / 2.0)
    return Intrinsics(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


def projective_matrix(pose: CameraPose, intr: Intrinsics) -> ProjectiveMatrix:
    """P = blockdiag(K, 1) @ T^-1 for a camera-to-world pose T."""
    k4 = np.eye(4)
    k4[:3, :3] = intr.matrix()
    return ProjectiveMatrix(m=k4 @ pose.inverse_matrix())


def relative_projective(p_q: ProjectiveMatrix, p_k: ProjectiveMatrix) -> np.ndarray:
    """Relative transform P_q @ P_k^-1; invariant to right-composing both inputs by a shared matrix."""
    return p_q.m @ p_k.inverse()


def project_point(
    pose: CameraPose, intr: Intrinsics, x_world: np.ndarray
) -> tuple[float, float, float]:
    """Project a world point to (u, v, depth).

    Depth is the distance along the viewing direction (-z in the camera
    frame) and must be strictly positive; otherwise BehindCameraError.
    """
    x = np.asarray(x_world, dtype=np.float64)
    if x.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {x.shape}")
    x_cam = pose.rotation.T @ (x - pose.translation)
    depth = -x_cam[2]
    if depth <= 0:
        raise BehindCameraError(f"point at camera-frame z={x_cam[2]} is not in front of the camera")
    h = intr.matrix() @ x_cam
    return float(h[0] / h[2]), float(h[1] / h[2]), float(depth)


def reprojection_error(
    pose: CameraPose, intr: Intrinsics, x_world: np.ndarray, observed_px: tuple[float, float]
) -> float:
    """Euclidean pixel distance between the projection of x_world and an observed pixel."""
    u, v, _ = project_point(pose, intr, x_world)
    return float(math.hypot(u - observed_px[0], v - observed_px[1]))


DEFAULT_ELEVATIONS_DEG = (-30.0, 0.0, 30.0, 60.0)
DEFAULT_AZIMUTHS_DEG = tuple(float(a) for a in range(0, 360, 45))


def default_view_grid(radius: float = 2.0) -> list[ViewSpec]:
    """The 33-view layout: the frontal view plus a full azimuth orbit at four elevations."""
    specs = [ViewSpec(0.0, 0.0, radius)]
    for elev in DEFAULT_ELEVATIONS_DEG:
        for azim in DEFAULT_AZIMUTHS_DEG:
            specs.append(ViewSpec(azim, elev, radius))
    return specs


def load_view_grid(path, radius: float = 2.0) -> list[ViewSpec]:
    """Read a view grid: one `azimuth_deg elevation_deg` pair per line; '#' starts a comment."""
    specs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'azimuth elevation', got {raw!r}")
            try:
                azim, elev = float(parts[0]), float(parts[1])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-numeric view angles in {raw!r}") from exc
            specs.append(ViewSpec(azim, elev, radius))
    if not specs:
        raise ValueError(f"{path}: view grid file contains no views")
    return specs


def save_view_grid(path, specs: list[ViewSpec]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in specs:
            fh.write(f"{s.azimuth_deg:.9f} {s.elevation_deg:.9f}\n")
