"""Rigid and affine spatial transforms (world mm).

All transforms follow the pull-back convention used throughout the package:
a transform maps points of the *reference/fixed* space into the *moving*
space, so ``resampled[v] = moving(T(world(v)))``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError


def euler_zyx(angles) -> np.ndarray:
    """Rotation ``Rz @ Ry @ Rx`` (extrinsic x, then y, then z)."""
    rx, ry, rz = (float(a) for a in angles)
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def angles_from_matrix(r: np.ndarray) -> tuple[float, float, float]:
    ry = -np.arcsin(np.clip(r[2, 0], -1.0, 1.0))
    rx = np.arctan2(r[2, 1], r[2, 2])
    rz = np.arctan2(r[1, 0], r[0, 0])
    return float(rx), float(ry), float(rz)


@dataclass(frozen=True)
class RigidParams:
    """6-DOF rigid transform ``p -> R (p - center) + center + translation``."""

    angles: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("angles", "translation", "center"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 3:
                raise ArgumentError(f"{name} needs three components")
            object.__setattr__(self, name, v)

    @property
    def rotation(self) -> np.ndarray:
        return euler_zyx(self.angles)

    @property
    def matrix(self) -> np.ndarray:
        r = self.rotation
        c = np.asarray(self.center)
        m = np.eye(4)
        m[:3, :3] = r
        m[:3, 3] = c + np.asarray(self.translation) - r @ c
        return m

    def to_matrix(self) -> np.ndarray:
        return self.matrix

    def apply(self, points) -> np.ndarray:
        return _apply(self.matrix, points)

    def is_identity(self) -> bool:
        return not any(self.angles) and not any(self.translation)

    def with_center(self, center) -> "RigidParams":
        """Same mapping, re-parametrized about another rotation centre."""
        r = self.rotation
        c, c2 = np.asarray(self.center), np.asarray(center, dtype=np.float64)
        t2 = r @ (c2 - c) + c - c2 + np.asarray(self.translation)
        return RigidParams(self.angles, tuple(t2), tuple(c2))

    def inverse(self) -> "RigidParams":
        r = self.rotation.T
        return RigidParams(angles_from_matrix(r), tuple(-r @ np.asarray(self.translation)), self.center)

    @classmethod
    def from_matrix(cls, m: np.ndarray, center=(0.0, 0.0, 0.0)) -> "RigidParams":
        m = np.asarray(m, dtype=np.float64)
        r = m[:3, :3]
        c = np.asarray(center, dtype=np.float64)
        t = m[:3, 3] + r @ c - c
        return cls(angles_from_matrix(r), tuple(t), tuple(c))

    def to_dict(self) -> dict:
        return {
            "type": "rigid",
            "angles": list(self.angles),
            "translation": list(self.translation),
            "center": list(self.center),
            "convention": "pullback",
            "units": "mm,rad",
        }


@dataclass(frozen=True)
class AffineTransform:
    """General 12-DOF transform stored as a homogeneous 4x4 matrix."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(4, 4)
        if not np.allclose(m[3], [0, 0, 0, 1]):
            raise ArgumentError("last row of an affine matrix must be (0, 0, 0, 1)")
        if abs(np.linalg.det(m[:3, :3])) <= 1e-12:
            raise ArgumentError("affine matrix is singular")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def to_matrix(self) -> np.ndarray:
        return self.matrix

    def apply(self, points) -> np.ndarray:
        return _apply(self.matrix, points)

    def inverse(self) -> "AffineTransform":
        return AffineTransform(np.linalg.inv(self.matrix))

    def to_dict(self) -> dict:
        return {
            "type": "affine",
            "matrix": np.asarray(self.matrix).tolist(),
            "convention": "pullback",
            "units": "mm,rad",
        }


def _apply(m: np.ndarray, points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return p @ m[:3, :3].T + m[:3, 3]


def transform_point(T: RigidParams | AffineTransform, p) -> np.ndarray:
    return T.apply(p)


def invert(T):
    return T.inverse()


def compose(a, b) -> AffineTransform:
    """``a o b``: apply ``b`` first, then ``a``."""
    return AffineTransform(a.to_matrix() @ b.to_matrix())


def as_affine(T) -> AffineTransform:
    return T if isinstance(T, AffineTransform) else AffineTransform(T.to_matrix())


def transform_from_dict(d: dict):
    if d.get("convention", "pullback") != "pullback":
        raise ArgumentError(f"unsupported transform convention {d.get('convention')!r}")
    kind = d.get("type")
    if kind == "rigid":
        return RigidParams(d["angles"], d["translation"], d.get("center", (0, 0, 0)))
    if kind == "affine":
        return AffineTransform(np.asarray(d["matrix"]))
    raise ArgumentError(f"unknown transform type {kind!r}")


def save_transform(T, path) -> None:
    Path(path).write_text(json.dumps(T.to_dict(), indent=2))


def load_transform(path):
    return transform_from_dict(json.loads(Path(path).read_text()))
