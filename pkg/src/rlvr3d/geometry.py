"""Oriented 3D box geometry.

Boxes are 9-DoF: center (x, y, z), full extents (w, h, d) along the box's
local x/y/z axes, and Euler angles (psi, theta, phi) in radians composed as
``R = Rz(psi) @ Ry(theta) @ Rx(phi)``. Lengths are meters.

The exact IoU clips the convex polytope of one box by the six half-spaces of
the other; :func:`mc_iou_oracle` is an independent sampling estimate used to
check it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Box9DoF",
    "ConvexPolytope",
    "InvalidBox",
    "NonRigidTransform",
    "RigidTransform",
    "box_corners",
    "box_polytope",
    "euler_from_matrix",
    "intersection_volume",
    "iou3d",
    "mc_iou_oracle",
    "rotation_matrix",
    "transform_box",
]

# vertices closer than this to a clipping plane count as inside
CLIP_TOL = 1e-12
RIGID_TOL = 1e-6
GIMBAL_TOL = 1e-9


class InvalidBox(ValueError):
    pass


class NonRigidTransform(ValueError):
    pass


@dataclass(frozen=True)
class Box9DoF:
    center_x: float
    center_y: float
    center_z: float
    size_w: float
    size_h: float
    size_d: float
    psi: float = 0.0
    theta: float = 0.0
    phi: float = 0.0

    def __post_init__(self):
        values = self.to_list()
        try:
            finite = all(math.isfinite(v) for v in values)
        except TypeError:
            finite = None
        if finite is None or any(type(v) is bool for v in values):
            raise InvalidBox(f"box fields must be real numbers, got {values}")
        if not finite:
            raise InvalidBox(f"box fields must be finite: {values}")
        if min(self.size_w, self.size_h, self.size_d) <= 0:
            raise InvalidBox(f"box sizes must be positive: {values[3:6]}")

    @classmethod
    def from_array(cls, values: Iterable[float]) -> "Box9DoF":
        values = list(values)
        if len(values) != 9:
            raise InvalidBox(f"expected 9 box parameters, got {len(values)}")
        return cls(*(float(v) for v in values))

    def to_list(self) -> list[float]:
        return [
            self.center_x, self.center_y, self.center_z,
            self.size_w, self.size_h, self.size_d,
            self.psi, self.theta, self.phi,
        ]

    def to_array(self) -> np.ndarray:
        return np.array(self.to_list(), dtype=float)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.center_x, self.center_y, self.center_z], dtype=float)

    @property
    def size(self) -> np.ndarray:
        return np.array([self.size_w, self.size_h, self.size_d], dtype=float)

    @cached_property
    def rotation(self) -> np.ndarray:
        rot = rotation_matrix(self.psi, self.theta, self.phi)
        rot.flags.writeable = False
        return rot

    @property
    def volume(self) -> float:
        return float(self.size_w * self.size_h * self.size_d)


def rotation_matrix(psi: float, theta: float, phi: float) -> np.ndarray:
    """Intrinsic yaw-pitch-roll rotation ``Rz(psi) @ Ry(theta) @ Rx(phi)``."""
    cz, sz = math.cos(psi), math.sin(psi)
    cy, sy = math.cos(theta), math.sin(theta)
    cx, sx = math.cos(phi), math.sin(phi)
    return np.array([
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ])


def euler_from_matrix(rot: np.ndarray) -> tuple[float, float, float]:
    """Invert :func:`rotation_matrix`; returns ``(psi, theta, phi)``.

    At gimbal lock (``|cos theta| < 1e-9``) roll is set to zero and the whole
    in-plane rotation is assigned to ``psi``.
    """
    rot = np.asarray(rot, dtype=float)
    cos_theta = math.hypot(rot[0, 0], rot[1, 0])
    theta = math.atan2(-rot[2, 0], cos_theta)
    if cos_theta < GIMBAL_TOL:
        psi = math.atan2(-rot[0, 1], rot[1, 1])
        phi = 0.0
    else:
        psi = math.atan2(rot[1, 0], rot[0, 0])
        phi = math.atan2(rot[2, 1], rot[2, 2])
    return psi, theta, phi


# corner i takes sign bits (x, y, z) = (i>>2 & 1, i>>1 & 1, i & 1), 0 -> minus
_CORNER_SIGNS = np.array(
    [[1 if (i >> (2 - k)) & 1 else -1 for k in range(3)] for i in range(8)],
    dtype=float,
)


def _cube_faces() -> list[list[int]]:
    faces = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            idx = [i for i in range(8) if _CORNER_SIGNS[i, axis] == sign]
            pts = _CORNER_SIGNS[idx]
            # order the quad around its center, counter-clockwise seen from outside
            normal = np.zeros(3)
            normal[axis] = sign
            u = np.roll(normal, 1)
            v = np.cross(normal, u)
            angles = [math.atan2(p @ v, p @ u) for p in pts]
            faces.append([idx[j] for j in np.argsort(angles)])
    return faces


_CUBE_FACES = _cube_faces()


def box_corners(box: Box9DoF) -> np.ndarray:
    """The 8 corners as an (8, 3) array in binary sign-count order."""
    local = _CORNER_SIGNS * (box.size / 2.0)
    return local @ box.rotation.T + box.center


def _box_halfspaces(box: Box9DoF) -> tuple[np.ndarray, np.ndarray]:
    """Outward normals (6, 3) and offsets (6,) with inside meaning ``n @ x <= d``."""
    rot = box.rotation
    center = box.center
    half = box.size / 2.0
    normals = np.concatenate([rot.T, -rot.T])
    offsets = normals @ center + np.concatenate([half, half])
    return normals, offsets


def _inside_box(points: np.ndarray, box: Box9DoF) -> np.ndarray:
    local = (points - box.center) @ box.rotation
    return np.all(np.abs(local) <= box.size / 2.0, axis=-1)


class ConvexPolytope:
    """Convex polyhedron as vertices plus outward-oriented face index loops.

    Vertices are kept as plain float triples; boxes have few enough vertices
    that per-element Python arithmetic beats small-array numpy calls.
    """

    def __init__(self, vertices, faces: Sequence[Sequence[int]]):
        self.points = [tuple(map(float, v)) for v in vertices]
        self.faces = [list(f) for f in faces]

    @classmethod
    def empty(cls) -> "ConvexPolytope":
        return cls([], [])

    @property
    def vertices(self) -> np.ndarray:
        return np.array(self.points, dtype=float).reshape(-1, 3)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) < 4

    def volume(self) -> float:
        """Sum of signed tetrahedra from the vertex centroid over fan-triangulated faces."""
        if self.is_empty:
            return 0.0
        pts = self.points
        n = len(pts)
        cx = sum(p[0] for p in pts) / n
        cy = sum(p[1] for p in pts) / n
        cz = sum(p[2] for p in pts) / n
        rel = [(p[0] - cx, p[1] - cy, p[2] - cz) for p in pts]
        total = 0.0
        for face in self.faces:
            ax, ay, az = rel[face[0]]
            for i, j in zip(face[1:-1], face[2:]):
                bx, by, bz = rel[i]
                qx, qy, qz = rel[j]
                total += ax * (by * qz - bz * qy) + ay * (bz * qx - bx * qz) + az * (bx * qy - by * qx)
        return max(total / 6.0, 0.0)

    def clip(self, normal, offset: float) -> "ConvexPolytope":
        """Keep the part with ``normal @ x <= offset``."""
        if self.is_empty:
            return self
        nx, ny, nz = (float(v) for v in normal)
        pts = self.points
        dist = [p[0] * nx + p[1] * ny + p[2] * nz - offset for p in pts]
        inside = [d <= CLIP_TOL for d in dist]
        if all(inside):
            return self
        if not any(inside):
            return ConvexPolytope.empty()

        new_pts: list[tuple[float, float, float]] = []
        remap: dict[int, int] = {}
        on_plane: list[int] = []
        for i, keep in enumerate(inside):
            if keep:
                remap[i] = len(new_pts)
                new_pts.append(pts[i])
                if -CLIP_TOL <= dist[i]:
                    on_plane.append(remap[i])
        edge_points: dict[tuple[int, int], int] = {}

        new_faces = []
        for face in self.faces:
            loop = []
            n = len(face)
            for k in range(n):
                a, b = face[k], face[(k + 1) % n]
                if inside[a]:
                    loop.append(remap[a])
                if inside[a] != inside[b]:
                    key = (a, b) if a < b else (b, a)
                    idx = edge_points.get(key)
                    if idx is None:
                        i, j = key
                        t = dist[i] / (dist[i] - dist[j])
                        pi, pj = pts[i], pts[j]
                        idx = edge_points[key] = len(new_pts)
                        new_pts.append((pi[0] + t * (pj[0] - pi[0]),
                                        pi[1] + t * (pj[1] - pi[1]),
                                        pi[2] + t * (pj[2] - pi[2])))
                        on_plane.append(idx)
                    loop.append(idx)
            if len(loop) >= 3:
                new_faces.append(loop)

        if len(on_plane) >= 3:
            cap = _order_loop(new_pts, on_plane, (nx, ny, nz))
            if len(cap) >= 3:
                new_faces.append(cap)
        if len(new_faces) < 4:
            return ConvexPolytope.empty()
        out = ConvexPolytope.empty()
        out.points, out.faces = new_pts, new_faces
        return out


def _order_loop(pts, idx: list[int], normal) -> list[int]:
    """Sort coplanar points counter-clockwise about ``normal``."""
    m = len(idx)
    cx = sum(pts[i][0] for i in idx) / m
    cy = sum(pts[i][1] for i in idx) / m
    cz = sum(pts[i][2] for i in idx) / m
    rel = [(pts[i][0] - cx, pts[i][1] - cy, pts[i][2] - cz) for i in idx]
    sq = [x * x + y * y + z * z for x, y, z in rel]
    far = max(range(m), key=sq.__getitem__)
    if sq[far] < CLIP_TOL * CLIP_TOL:
        return []
    r = math.sqrt(sq[far])
    ux, uy, uz = (c / r for c in rel[far])
    nx, ny, nz = normal
    vx, vy, vz = ny * uz - nz * uy, nz * ux - nx * uz, nx * uy - ny * ux
    angles = [math.atan2(x * vx + y * vy + z * vz, x * ux + y * uy + z * uz) for x, y, z in rel]
    return [idx[k] for k in sorted(range(m), key=angles.__getitem__)]


def box_polytope(box: Box9DoF) -> ConvexPolytope:
    return ConvexPolytope(box_corners(box).tolist(), _CUBE_FACES)


def _aabb(box: Box9DoF) -> tuple[list[float], list[float]]:
    # half-extent of the rotated box along each world axis
    half = (box.size_w / 2.0, box.size_h / 2.0, box.size_d / 2.0)
    center = (box.center_x, box.center_y, box.center_z)
    lo, hi = [], []
    for row, c in zip(box.rotation.tolist(), center):
        ext = abs(row[0]) * half[0] + abs(row[1]) * half[1] + abs(row[2]) * half[2]
        lo.append(c - ext)
        hi.append(c + ext)
    return lo, hi


def _ordered(a: Box9DoF, b: Box9DoF) -> tuple[Box9DoF, Box9DoF]:
    # fixed argument order makes the floating result symmetric in (a, b)
    return (a, b) if a.to_list() <= b.to_list() else (b, a)


def intersection_volume(a: Box9DoF, b: Box9DoF) -> float:
    a, b = _ordered(a, b)
    # bounding spheres: cheap exact rejection of far-apart pairs
    reach = math.hypot(a.size_w, a.size_h, a.size_d) + math.hypot(b.size_w, b.size_h, b.size_d)
    gap = math.hypot(a.center_x - b.center_x, a.center_y - b.center_y, a.center_z - b.center_z)
    if gap >= reach / 2.0:
        return 0.0
    lo_a, hi_a = _aabb(a)
    lo_b, hi_b = _aabb(b)
    if any(h <= l for h, l in zip(hi_a, lo_b)) or any(h <= l for h, l in zip(hi_b, lo_a)):
        return 0.0
    poly = box_polytope(a)
    normals, offsets = _box_halfspaces(b)
    for n, d in zip(normals.tolist(), offsets.tolist()):
        poly = poly.clip(n, d)
        if poly.is_empty:
            return 0.0
    return min(poly.volume(), a.volume, b.volume)


def iou3d(a: Box9DoF, b: Box9DoF) -> float:
    inter = intersection_volume(a, b)
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def mc_iou_oracle(a: Box9DoF, b: Box9DoF, n_samples: int = 1_000_000, seed: int = 0,
                  chunk: int = 250_000) -> float:
    """Monte-Carlo IoU from uniform samples in the joint axis-aligned hull."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    corners = np.concatenate([box_corners(a), box_corners(b)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    rng = np.random.default_rng(seed)
    both = either = 0
    remaining = n_samples
    while remaining:
        m = min(chunk, remaining)
        pts = lo + (hi - lo) * rng.random((m, 3))
        in_a = _inside_box(pts, a)
        in_b = _inside_box(pts, b)
        both += int(np.count_nonzero(in_a & in_b))
        either += int(np.count_nonzero(in_a | in_b))
        remaining -= m
    return both / either if either else 0.0


class RigidTransform:
    """4x4 homogeneous rigid transform (rotation + translation)."""

    def __init__(self, matrix):
        m = np.array(matrix, dtype=float)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise NonRigidTransform(f"expected a 4x4 matrix or 16 numbers, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise NonRigidTransform("transform has non-finite entries")
        rot = m[:3, :3]
        if np.max(np.abs(rot @ rot.T - np.eye(3))) >= RIGID_TOL:
            raise NonRigidTransform("rotation block is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) >= RIGID_TOL:
            raise NonRigidTransform("rotation block has determinant != +1")
        if np.max(np.abs(m[3] - [0.0, 0.0, 0.0, 1.0])) > 0:
            raise NonRigidTransform("last row must be (0, 0, 0, 1)")
        self.matrix = m

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @classmethod
    def from_parts(cls, rotation, translation) -> "RigidTransform":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.matrix @ other.matrix)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform.from_parts(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def to_list(self) -> list[float]:
        return [float(v) for v in self.matrix.ravel()]

    def __repr__(self):
        return f"RigidTransform({self.matrix.tolist()!r})"


def transform_box(box: Box9DoF, m) -> Box9DoF:
    """Map a box through a rigid transform (center moved, rotation composed)."""
    if not isinstance(m, RigidTransform):
        m = RigidTransform(m)
    center = m.apply(box.center)
    psi, theta, phi = euler_from_matrix(m.rotation @ box.rotation)
    return Box9DoF(*center.tolist(), box.size_w, box.size_h, box.size_d, psi, theta, phi)
