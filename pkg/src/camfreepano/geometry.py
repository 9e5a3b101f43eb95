"""Pinhole intrinsics, rotations and the 3-DoF input-to-canonical homography.

Conventions shared by every module in the package:

* Image frame: origin at the top-left pixel centre, u to the right, v down.
* Camera frame: x right, y down, z forward along the optical axis.
* ``R = R_y(theta) @ R_x(phi) @ R_z(psi)`` maps input-camera rays into the
  canonical camera frame; ``theta`` is fixed to 0 for a single input view.
* Positive ``phi`` pitches the input camera upward, so scene content moves
  down in the input image.  Positive ``psi`` rolls the camera so that the
  scene appears rotated counter-clockwise in the input image.
* ``H = K_canonical @ R @ inv(K_input)`` maps input pixels to canonical pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import cosdg, cotdg, sindg

CANONICAL_FOV_DEG = 90.0
CANONICAL_SIZE = 512

# w below this (in h[2][2]-normalised units) means behind the camera or at infinity
BEHIND_CAMERA_EPS = 1e-9

# Frobenius residual accepted by params_from_homography
FAMILY_TOL = 1e-8


class NotInFamilyError(ValueError):
    """Raised when a homography cannot be produced by (fov, phi, psi)."""

    def __init__(self, residual: float):
        super().__init__(f"homography is not a 3-DoF rotation homography (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class CameraParams:
    fov_deg: float
    phi_deg: float = 0.0
    psi_deg: float = 0.0
    width: int = CANONICAL_SIZE
    height: int = CANONICAL_SIZE

    def __post_init__(self):
        if not (0.0 < self.fov_deg < 180.0):
            raise ValueError(f"fov_deg must lie in (0, 180), got {self.fov_deg}")
        if self.width < 2 or self.height < 2:
            raise ValueError(f"image must be at least 2x2, got {self.width}x{self.height}")
        for name in ("fov_deg", "phi_deg", "psi_deg"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def is_canonical(self) -> bool:
        return (self.fov_deg == CANONICAL_FOV_DEG and self.phi_deg == 0.0 and self.psi_deg == 0.0
                and self.width == CANONICAL_SIZE and self.height == CANONICAL_SIZE)

    def to_json(self) -> str:
        d = asdict(self)
        d["width"], d["height"] = int(self.width), int(self.height)
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "CameraParams":
        d = json.loads(text)
        return cls(float(d["fov_deg"]), float(d["phi_deg"]), float(d["psi_deg"]),
                   int(d["width"]), int(d["height"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "CameraParams":
        with open(path) as fh:
            return cls.from_json(fh.read())


def canonical_params(size: int = CANONICAL_SIZE) -> CameraParams:
    """The canonical view: 90 degree fov, no pitch or roll.  ``size`` allows desk-scale grids."""
    return CameraParams(CANONICAL_FOV_DEG, 0.0, 0.0, size, size)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, self.skew, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        # closed form keeps K @ K^-1 exact for the canonical camera
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])


def intrinsics_from_params(params: CameraParams) -> Intrinsics:
    """Square-pixel intrinsics with the principal point at the image centre.

    The focal length uses the half *width* (``w / 2``) while the principal
    point uses ``(w - 1) / 2``, which reproduces the canonical matrix
    ``fx = fy = 256, cx = cy = 255.5`` for a 512x512, 90 degree view.
    """
    if not (0.0 < params.fov_deg < 180.0):
        raise ValueError(f"fov_deg must lie in (0, 180), got {params.fov_deg}")
    # degree-exact cotangent: cot(45 deg) is exactly 1
    f = (params.width / 2.0) * float(cotdg(params.fov_deg / 2.0))
    return Intrinsics(f, f, (params.width - 1) / 2.0, (params.height - 1) / 2.0)


def rot_x(deg: float) -> np.ndarray:
    c, s = float(cosdg(deg)), float(sindg(deg))
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    c, s = float(cosdg(deg)), float(sindg(deg))
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(deg: float) -> np.ndarray:
    c, s = float(cosdg(deg)), float(sindg(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_angles(phi_deg: float, psi_deg: float, theta_deg: float = 0.0) -> np.ndarray:
    """``R_y(theta) @ R_x(phi) @ R_z(psi)``; input camera frame -> canonical frame."""
    return rot_y(theta_deg) @ rot_x(phi_deg) @ rot_z(psi_deg)


class Homography:
    """A 3x3 projective map, scaled so that ``h[2][2] == 1``.

    Scaling divides by ``|h[2][2]|`` so the sign of the homogeneous
    coordinate is kept; rotation homographies past 90 degrees keep their
    behind-camera information.
    """

    __slots__ = ("_h",)

    def __init__(self, h, normalize: bool = True):
        h = np.array(h, dtype=np.float64).reshape(3, 3)
        if normalize and abs(h[2, 2]) > 1e-12:
            h = h / abs(h[2, 2])
        if abs(np.linalg.det(h)) < 1e-300:
            raise ValueError("homography is singular")
        h.setflags(write=False)
        self._h = h

    @property
    def matrix(self) -> np.ndarray:
        return self._h

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self._h))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self._h @ other.matrix)

    def __repr__(self) -> str:
        return f"Homography({self._h.tolist()!r})"

    def to_list(self) -> list:
        return [float(x) for x in self._h.ravel()]

    @classmethod
    def from_list(cls, values) -> "Homography":
        if len(values) != 9:
            raise ValueError("a homography serialises as 9 numbers")
        return cls(np.asarray(values, dtype=np.float64))

    def to_json(self) -> str:
        return json.dumps(self.to_list())

    @classmethod
    def from_json(cls, text: str) -> "Homography":
        return cls.from_list(json.loads(text))


def homography_from_params(params: CameraParams, canonical: Optional[CameraParams] = None) -> Homography:
    """Input-view pixels -> canonical-view pixels for a camera with ``params``."""
    canonical = canonical or canonical_params()
    k_in = intrinsics_from_params(params)
    k_can = intrinsics_from_params(canonical)
    r = rotation_from_angles(params.phi_deg, params.psi_deg, 0.0)
    return Homography(k_can.matrix @ r @ k_in.inverse)


def homography_from_params_inverse(params: CameraParams, canonical: Optional[CameraParams] = None) -> Homography:
    """Canonical-view pixels -> input-view pixels, built from the transposed rotation."""
    canonical = canonical or canonical_params()
    k_in = intrinsics_from_params(params)
    k_can = intrinsics_from_params(canonical)
    r = rotation_from_angles(params.phi_deg, params.psi_deg, 0.0)
    return Homography(k_in.matrix @ r.T @ k_can.inverse)


def project_point(h, p: Tuple[float, float]) -> Optional[Tuple[float, float]]:
    """Map pixel ``p`` through ``h``; ``None`` when it lands behind the camera."""
    m = h.matrix if isinstance(h, Homography) else np.asarray(h, dtype=np.float64)
    u, v = p
    x = m[0, 0] * u + m[0, 1] * v + m[0, 2]
    y = m[1, 0] * u + m[1, 1] * v + m[1, 2]
    w = m[2, 0] * u + m[2, 1] * v + m[2, 2]
    if not w > BEHIND_CAMERA_EPS:
        return None
    return (x / w, y / w)


def project_points(h, u: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised :func:`project_point`.

    Returns ``(u', v', in_front)``; entries with ``in_front == False`` are NaN.
    """
    m = h.matrix if isinstance(h, Homography) else np.asarray(h, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = m[0, 0] * u + m[0, 1] * v + m[0, 2]
    y = m[1, 0] * u + m[1, 1] * v + m[1, 2]
    w = m[2, 0] * u + m[2, 1] * v + m[2, 2]
    front = w > BEHIND_CAMERA_EPS
    safe_w = np.where(front, w, 1.0)
    return np.where(front, x / safe_w, np.nan), np.where(front, y / safe_w, np.nan), front


def params_from_homography(h, width: int, height: int,
                           canonical: Optional[CameraParams] = None,
                           tol: float = FAMILY_TOL) -> CameraParams:
    """Recover (fov, phi, psi) of an input-to-canonical rotation homography.

    ``K_can^-1 @ H = s * R @ K_in^-1``.  The first column gives ``s / f``
    and a rotation column; undoing the principal-point shift on the third
    column gives ``s`` itself, hence ``f``.
    """
    canonical = canonical or canonical_params()
    m = h.matrix if isinstance(h, Homography) else np.asarray(h, dtype=np.float64)
    a = intrinsics_from_params(canonical).inverse @ m
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    col0, col1 = a[:, 0], a[:, 1]
    col2 = a[:, 2] + cx * col0 + cy * col1
    s = np.linalg.norm(col2)
    inv_f = 0.5 * (np.linalg.norm(col0) + np.linalg.norm(col1)) / s
    r = np.column_stack([col0 / (s * inv_f), col1 / (s * inv_f), col2 / s])
    if np.linalg.det(r) < 0:
        r = -r
    fov = math.degrees(2.0 * math.atan((width / 2.0) * inv_f))
    # R_x(phi) R_z(psi): r[1,2] = -sin(phi), r[2,2] = cos(phi), r[0,0] = cos(psi), r[0,1] = -sin(psi)
    phi = math.degrees(math.atan2(-r[1, 2], r[2, 2]))
    psi = math.degrees(math.atan2(-r[0, 1], r[0, 0]))
    if not (0.0 < fov < 180.0):
        raise NotInFamilyError(float("inf"))
    recovered = CameraParams(fov, phi, psi, width, height)
    rebuilt = homography_from_params(recovered, canonical).matrix
    given = Homography(m).matrix
    residual = float(np.linalg.norm(rebuilt - given))
    if residual > tol:
        raise NotInFamilyError(residual)
    return recovered
