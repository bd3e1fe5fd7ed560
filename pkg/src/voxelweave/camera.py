"""Rigid transforms and the pinhole camera.

Conventions: camera space is right-handed with x to the right, y down
(matching image rows) and z forward; pixel (0,0) is the *center* of the
top-left pixel. Projection: u = fx*px/pz + cx, v = fy*py/pz + cy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateProjection

_ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """p_out = rotation @ p_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ContractError(f"rotation must be 3x3, got {r.shape}")
        if np.abs(r @ r.T - np.eye(3)).max() > _ORTHO_TOL:
            raise ContractError("rotation is not orthonormal")
        if np.linalg.det(r) <= 0:
            raise ContractError("rotation is not proper (det <= 0)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self.compose(other)).apply(p) == self.apply(other.apply(p))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def to_json(self) -> dict:
        return {"rotation": self.rotation.tolist(),
                "translation": self.translation.tolist()}

    @staticmethod
    def from_json(obj: dict) -> "RigidTransform":
        return RigidTransform(np.array(obj["rotation"]), np.array(obj["translation"]))


def rotation_about(axis: str, angle: float) -> RigidTransform:
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        r = [[1, 0, 0], [0, c, -s], [0, s, c]]
    elif axis == "y":
        r = [[c, 0, s], [0, 1, 0], [-s, 0, c]]
    elif axis == "z":
        r = [[c, -s, 0], [s, c, 0], [0, 0, 1]]
    else:
        raise ContractError(f"unknown axis {axis!r}")
    return RigidTransform(np.array(r, dtype=np.float64), np.zeros(3))


def look_at(eye: np.ndarray, target: np.ndarray,
            down: np.ndarray = (0.0, 1.0, 0.0)) -> RigidTransform:
    """World-to-camera transform: z toward target, y roughly along `down`."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise ContractError("look_at: eye and target coincide")
    z = fwd / norm
    x = np.cross(np.asarray(down, dtype=np.float64), z)
    xn = np.linalg.norm(x)
    if xn < 1e-9:
        raise ContractError("look_at: viewing direction is parallel to `down`")
    x /= xn
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    return RigidTransform(r, -r @ eye)


@dataclass(frozen=True, eq=False)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ContractError("image size must be at least 1x1")

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return self.extrinsic.apply(points)

    def project(self, point: np.ndarray) -> tuple[float, float, float]:
        """One world point -> (u, v, depth). depth <= 0 means behind the camera."""
        p = self.to_camera(np.asarray(point, dtype=np.float64).reshape(3))
        if p[2] == 0.0:
            raise DegenerateProjection("point lies on the camera plane (pz == 0)")
        u = self.fx * p[0] / p[2] + self.cx
        v = self.fy * p[1] / p[2] + self.cy
        return float(u), float(v), float(p[2])

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Batch projection: (..., 3) -> (uv (..., 2), depth (...), valid (...)).

        Points with depth <= 0 get valid=False and a placeholder uv far outside
        the image so downstream samplers read zeros for them.
        """
        pts = self.to_camera(np.asarray(points, dtype=np.float64))
        z = pts[..., 2]
        valid = z > 0
        safe_z = np.where(z == 0, 1.0, z)
        u = self.fx * pts[..., 0] / safe_z + self.cx
        v = self.fy * pts[..., 1] / safe_z + self.cy
        far = -4.0 * (self.width + self.height)
        u = np.where(valid, u, far)
        v = np.where(valid, v, far)
        return np.stack([u, v], axis=-1), z, valid

    def unproject(self, u: float, v: float, depth: float) -> np.ndarray:
        """Pixel + camera-frame depth -> world point. Requires depth > 0."""
        if depth <= 0:
            raise ContractError(f"unproject needs depth > 0, got {depth}")
        x = (u - self.cx) / self.fx * depth
        y = (v - self.cy) / self.fy * depth
        cam = np.array([x, y, depth], dtype=np.float64)
        return self.extrinsic.inverse().apply(cam)

    def project_to_feature(self, points: np.ndarray,
                           feature_size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        """Project points onto a (We, He) feature map aligned with the image.

        Returns (uv scaled to feature pixels, valid). Scaling is the plain
        ratio feature/image per axis, consistent with sampling the feature map
        where the full-resolution pixel would land.
        """
        we, he = feature_size
        uv, _, valid = self.project_points(points)
        scale = np.array([we / self.width, he / self.height], dtype=np.float64)
        return uv * scale, valid

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "extrinsic": self.extrinsic.to_json()}

    @staticmethod
    def from_json(obj: dict) -> "PinholeCamera":
        return PinholeCamera(
            fx=float(obj["fx"]), fy=float(obj["fy"]),
            cx=float(obj["cx"]), cy=float(obj["cy"]),
            width=int(obj["width"]), height=int(obj["height"]),
            extrinsic=RigidTransform.from_json(obj["extrinsic"]),
        )
