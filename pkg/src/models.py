"""
Data Models for the facecap reconstruction pipeline
"""
from enum import IntEnum
from functools import cached_property
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.errors import GeometryError


class ArrayModel(BaseModel):
    """Immutable model carrying numpy arrays"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


def _as_array(value, dtype, shape_tail: Tuple[int, ...], name: str) -> np.ndarray:
    arr = np.array(value, dtype=dtype)
    if shape_tail and (arr.ndim != 1 + len(shape_tail) or arr.shape[1:] != shape_tail):
        if arr.size == 0:
            return arr.reshape((0,) + shape_tail)
        raise ValueError(f"{name} must have shape (k, {', '.join(map(str, shape_tail))}), got {arr.shape}")
    arr.setflags(write=False)
    return arr


# ═══════════════════════════════════════════════════════════
# CAMERAS
# ═══════════════════════════════════════════════════════════

class Intrinsics(BaseModel):
    """Pinhole intrinsics; k1/k2 are carried but never applied"""

    model_config = ConfigDict(frozen=True)

    fx: float = Field(gt=0.0)
    fy: float = Field(gt=0.0)
    cx: float
    cy: float
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    k1: float = 0.0
    k2: float = 0.0

    @model_validator(mode="after")
    def _principal_point_inside(self) -> "Intrinsics":
        if not (0.0 < self.cx < self.width and 0.0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}")
        return self

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def has_distortion(self) -> bool:
        return self.k1 != 0.0 or self.k2 != 0.0


class CameraPose(ArrayModel):
    """World-to-camera pose, x_cam = R @ x_world + t; the camera looks along +z"""

    rotation: np.ndarray
    translation: np.ndarray

    @field_validator("rotation", mode="before")
    @classmethod
    def _check_rotation(cls, value):
        R = np.asarray(value, dtype=np.float64).reshape(3, 3).copy()
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")
        R.setflags(write=False)
        return R

    @field_validator("translation", mode="before")
    @classmethod
    def _check_translation(cls, value):
        t = np.asarray(value, dtype=np.float64).reshape(3).copy()
        t.setflags(write=False)
        return t

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0)) -> "CameraPose":
        """Camera at `eye` looking at `target`; `up` is the world direction shown upward in the image"""
        eye = np.asarray(eye, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        # image y points down
        y = -(up - np.dot(up, z) * z)
        y /= np.linalg.norm(y)
        x = np.cross(y, z)
        R = np.stack([x, y, z])
        # re-orthonormalize to stay inside the 1e-9 tolerance
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        return cls(rotation=R, translation=-R @ eye)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


class Keyframe(ArrayModel):
    """A posed, calibrated image"""

    id: int
    image: np.ndarray
    pose: CameraPose
    intrinsics: Intrinsics

    @model_validator(mode="after")
    def _image_matches_intrinsics(self) -> "Keyframe":
        h, w = self.image.shape[:2]
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise ValueError(
                f"keyframe {self.id}: image is {w}x{h}, intrinsics say "
                f"{self.intrinsics.width}x{self.intrinsics.height}")
        return self

    @cached_property
    def gray(self) -> np.ndarray:
        """Luma in [0, 1]"""
        img = np.asarray(self.image, dtype=np.float64)
        if np.issubdtype(self.image.dtype, np.integer):
            img = img / 255.0
        if img.ndim == 3:
            img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
        return np.ascontiguousarray(img)


# ═══════════════════════════════════════════════════════════
# GEOMETRY CONTAINERS
# ═══════════════════════════════════════════════════════════

class TriMesh(ArrayModel):
    """Fixed-topology triangle mesh"""

    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: Optional[np.ndarray] = None

    @field_validator("vertices", mode="before")
    @classmethod
    def _vertices(cls, value):
        return _as_array(value, np.float64, (3,), "vertices")

    @field_validator("faces", mode="before")
    @classmethod
    def _faces(cls, value):
        return _as_array(value, np.int64, (3,), "faces")

    @field_validator("vertex_colors", mode="before")
    @classmethod
    def _colors(cls, value):
        return None if value is None else _as_array(value, np.uint8, (3,), "vertex_colors")

    @model_validator(mode="after")
    def _topology(self) -> "TriMesh":
        f = self.faces
        if f.size:
            if f.min() < 0 or f.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face (repeated vertex index)")
        if self.vertex_colors is not None and len(self.vertex_colors) != len(self.vertices):
            raise ValueError("vertex_colors length mismatch")
        return self

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0 or len(self.faces) == 0

    @cached_property
    def edges(self) -> np.ndarray:
        """Undirected edge set E, (u < v), lexicographically sorted"""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0) if len(e) else e.reshape(0, 2)

    @cached_property
    def bbox(self) -> np.ndarray:
        if len(self.vertices) == 0:
            raise GeometryError("empty mesh has no bounding box")
        return np.stack([self.vertices.min(axis=0), self.vertices.max(axis=0)])

    @property
    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox
        return float(np.linalg.norm(hi - lo))

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        """Same topology, new positions"""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise GeometryError(f"vertex array shape {vertices.shape} != {self.vertices.shape}")
        return TriMesh(vertices=vertices, faces=self.faces, vertex_colors=self.vertex_colors)

    def with_colors(self, colors: np.ndarray) -> "TriMesh":
        return TriMesh(vertices=self.vertices, faces=self.faces, vertex_colors=colors)


class DepthMap(ArrayModel):
    """Per-pixel depth (z_cam), optional camera-frame normals and matching cost

    Validity is an explicit mask; invalid pixels hold +inf in `depth`.
    """

    depth: np.ndarray
    valid: np.ndarray
    normal: Optional[np.ndarray] = None
    cost: Optional[np.ndarray] = None

    @field_validator("depth", "cost", mode="before")
    @classmethod
    def _float_grid(cls, value):
        if value is None:
            return None
        arr = np.array(value, dtype=np.float64)
        arr.setflags(write=False)
        return arr

    @field_validator("valid", mode="before")
    @classmethod
    def _mask(cls, value):
        arr = np.array(value, dtype=bool)
        arr.setflags(write=False)
        return arr

    @field_validator("normal", mode="before")
    @classmethod
    def _normals(cls, value):
        if value is None:
            return None
        arr = np.array(value, dtype=np.float64)
        arr.setflags(write=False)
        return arr

    @model_validator(mode="after")
    def _consistent(self) -> "DepthMap":
        if self.depth.ndim != 2 or self.valid.shape != self.depth.shape:
            raise ValueError("depth and valid mask must be matching 2-D grids")
        d = self.depth[self.valid]
        if d.size and not (np.all(np.isfinite(d)) and d.min() > 0.0):
            raise ValueError("valid depths must be finite and positive")
        if self.normal is not None:
            if self.normal.shape != self.depth.shape + (3,):
                raise ValueError("normal grid shape mismatch")
            n = self.normal[self.valid]
            if n.size and np.abs(np.linalg.norm(n, axis=1) - 1.0).max() > 1e-6:
                raise ValueError("valid normals must be unit length")
        if self.cost is not None and self.cost.shape != self.depth.shape:
            raise ValueError("cost grid shape mismatch")
        return self

    @classmethod
    def from_depth(cls, depth: np.ndarray, normal=None, cost=None) -> "DepthMap":
        """Build from a depth grid where non-finite or non-positive entries are invalid"""
        depth = np.array(depth, dtype=np.float64)
        valid = np.isfinite(depth) & (depth > 0.0)
        depth[~valid] = np.inf
        return cls(depth=depth, valid=valid, normal=normal, cost=cost)

    @classmethod
    def invalid(cls, height: int, width: int) -> "DepthMap":
        return cls(depth=np.full((height, width), np.inf), valid=np.zeros((height, width), bool))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean()) if self.valid.size else 0.0


class PointCloud(ArrayModel):
    """Fused oriented points"""

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None
    support_count: Optional[np.ndarray] = None

    @field_validator("points", mode="before")
    @classmethod
    def _points(cls, value):
        return _as_array(value, np.float64, (3,), "points")

    @field_validator("normals", mode="before")
    @classmethod
    def _normals(cls, value):
        return None if value is None else _as_array(value, np.float64, (3,), "normals")

    @field_validator("colors", mode="before")
    @classmethod
    def _colors(cls, value):
        return None if value is None else _as_array(value, np.uint8, (3,), "colors")

    @field_validator("support_count", mode="before")
    @classmethod
    def _support(cls, value):
        if value is None:
            return None
        arr = np.array(value, dtype=np.int64).reshape(-1)
        arr.setflags(write=False)
        return arr

    @model_validator(mode="after")
    def _consistent(self) -> "PointCloud":
        k = len(self.points)
        for name in ("normals", "colors", "support_count"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != k:
                raise ValueError(f"{name} length {len(arr)} != {k} points")
        if self.normals is not None and k:
            if np.abs(np.linalg.norm(self.normals, axis=1) - 1.0).max() > 1e-6:
                raise ValueError("point normals must be unit length")
        if self.support_count is not None and k and self.support_count.min() < 1:
            raise ValueError("support_count must be >= 1")
        return self

    def __len__(self) -> int:
        return len(self.points)


# ═══════════════════════════════════════════════════════════
# LANDMARKS
# ═══════════════════════════════════════════════════════════

EAR_ID_BASE = 100
JAW_CONTOUR_IDS = list(range(17))


class LandmarkObservation(BaseModel):
    """One 2D landmark detection in one keyframe"""

    model_config = ConfigDict(frozen=True)

    frame_id: int
    landmark_id: int = Field(ge=0)
    position: Tuple[float, float]
    confidence: float = Field(ge=0.0, le=1.0)

    @property
    def is_ear(self) -> bool:
        return self.landmark_id >= EAR_ID_BASE


class Landmark3D(BaseModel):
    """A triangulated landmark"""

    model_config = ConfigDict(frozen=True)

    landmark_id: int
    position: Tuple[float, float, float]
    rms_reprojection_error: float = Field(ge=0.0)
    num_views: int = Field(ge=2)


class CorrespondenceTable(BaseModel):
    """landmark id -> template vertex index, plus the landmark subset rules"""

    schema_version: int = 1
    entries: Dict[int, int]
    excluded_landmark_ids: List[int] = Field(default_factory=lambda: list(JAW_CONTOUR_IDS))
    ear_contour_ids: Optional[List[int]] = None

    @field_validator("entries")
    @classmethod
    def _non_negative(cls, value: Dict[int, int]) -> Dict[int, int]:
        bad = [k for k, v in value.items() if v < 0]
        if bad:
            raise ValueError(f"negative vertex index for landmark ids {bad}")
        return value

    def check_against(self, mesh: "TriMesh") -> None:
        bad = sorted(k for k, v in self.entries.items() if v >= mesh.n_vertices)
        if bad:
            raise GeometryError(f"correspondence table references missing vertices for ids {bad}")

    def is_used(self, landmark_id: int) -> bool:
        """Landmark subset rule: drop excluded contour ids, keep only outer-contour ear ids"""
        if landmark_id in self.excluded_landmark_ids:
            return False
        if landmark_id >= EAR_ID_BASE and self.ear_contour_ids is not None:
            return landmark_id in self.ear_contour_ids
        return True


# ═══════════════════════════════════════════════════════════
# CONSTRAINTS
# ═══════════════════════════════════════════════════════════

class ConstraintKind(IntEnum):
    POINTCLOUD = 0
    LANDMARK = 1
    EDGE = 2


class Constraint(BaseModel):
    """One row of the fitting data term"""

    model_config = ConfigDict(frozen=True)

    vertex_index: int = Field(ge=0)
    target: Tuple[float, float, float]
    weight: float = Field(ge=0.0)
    kind: ConstraintKind


class ConstraintSet(ArrayModel):
    """Columnar constraint storage; at most one constraint per (vertex, kind)"""

    vertex_index: np.ndarray
    target: np.ndarray
    weight: np.ndarray
    kind: np.ndarray

    @field_validator("vertex_index", "kind", mode="before")
    @classmethod
    def _ints(cls, value):
        arr = np.array(value, dtype=np.int64).reshape(-1)
        arr.setflags(write=False)
        return arr

    @field_validator("weight", mode="before")
    @classmethod
    def _weights(cls, value):
        arr = np.array(value, dtype=np.float64).reshape(-1)
        arr.setflags(write=False)
        return arr

    @field_validator("target", mode="before")
    @classmethod
    def _targets(cls, value):
        return _as_array(value, np.float64, (3,), "target")

    @model_validator(mode="after")
    def _unique(self) -> "ConstraintSet":
        k = len(self.vertex_index)
        if not (len(self.target) == len(self.weight) == len(self.kind) == k):
            raise ValueError("constraint columns have different lengths")
        if k:
            if self.weight.min() < 0.0:
                raise ValueError("constraint weights must be non-negative")
            if self.vertex_index.min() < 0:
                raise ValueError("negative vertex index")
            keys = self.vertex_index * 3 + self.kind
            if len(np.unique(keys)) != k:
                raise ValueError("more than one constraint of the same kind on a vertex")
        return self

    @classmethod
    def empty(cls) -> "ConstraintSet":
        return cls(vertex_index=[], target=np.zeros((0, 3)), weight=[], kind=[])

    @classmethod
    def of(cls, kind: ConstraintKind, vertex_index, target, weight=None) -> "ConstraintSet":
        vertex_index = np.asarray(vertex_index, dtype=np.int64).reshape(-1)
        if weight is None:
            weight = np.ones(len(vertex_index))
        return cls(vertex_index=vertex_index, target=np.asarray(target, dtype=np.float64).reshape(-1, 3),
                   weight=np.broadcast_to(np.asarray(weight, dtype=np.float64), vertex_index.shape),
                   kind=np.full(len(vertex_index), int(kind)))

    @classmethod
    def from_constraints(cls, constraints: List[Constraint]) -> "ConstraintSet":
        if not constraints:
            return cls.empty()
        return cls(vertex_index=[c.vertex_index for c in constraints],
                   target=[c.target for c in constraints],
                   weight=[c.weight for c in constraints],
                   kind=[int(c.kind) for c in constraints])

    @classmethod
    def merge(cls, *sets: "ConstraintSet") -> "ConstraintSet":
        sets = [s for s in sets if s is not None and len(s)]
        if not sets:
            return cls.empty()
        return cls(vertex_index=np.concatenate([s.vertex_index for s in sets]),
                   target=np.concatenate([s.target for s in sets]),
                   weight=np.concatenate([s.weight for s in sets]),
                   kind=np.concatenate([s.kind for s in sets]))

    @property
    def constraints(self) -> List[Constraint]:
        return [Constraint(vertex_index=int(v), target=tuple(t), weight=float(w), kind=ConstraintKind(int(k)))
                for v, t, w, k in zip(self.vertex_index, self.target, self.weight, self.kind)]

    def of_kind(self, kind: ConstraintKind) -> "ConstraintSet":
        sel = self.kind == int(kind)
        return ConstraintSet(vertex_index=self.vertex_index[sel], target=self.target[sel],
                             weight=self.weight[sel], kind=self.kind[sel])

    def count(self, kind: ConstraintKind) -> int:
        return int(np.count_nonzero(self.kind == int(kind)))

    def __len__(self) -> int:
        return len(self.vertex_index)


class EdgeMap(ArrayModel):
    """Edge strength, binary mask, exact distance transform and nearest-edge field"""

    strength: np.ndarray
    mask: np.ndarray
    distance: np.ndarray
    nearest: np.ndarray

    @model_validator(mode="after")
    def _consistent(self) -> "EdgeMap":
        if not (self.strength.shape == self.mask.shape == self.distance.shape == self.nearest.shape[:2]):
            raise ValueError("edge map layers have different shapes")
        if np.any(self.distance[self.mask] != 0.0):
            raise ValueError("distance transform must be 0 on edge pixels")
        return self

    @property
    def shape(self) -> Tuple[int, int]:
        return self.mask.shape


# ═══════════════════════════════════════════════════════════
# FITTING & EVALUATION
# ═══════════════════════════════════════════════════════════

class VertexTransforms(ArrayModel):
    """Per-vertex 3x4 affine transforms stacked as the 4n x 3 unknown X"""

    matrix: np.ndarray

    @field_validator("matrix", mode="before")
    @classmethod
    def _shape(cls, value):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] % 4:
            raise ValueError(f"transform stack must be 4n x 3, got {arr.shape}")
        arr.setflags(write=False)
        return arr

    @classmethod
    def identity(cls, n: int) -> "VertexTransforms":
        return cls(matrix=np.tile(np.vstack([np.eye(3), np.zeros((1, 3))]), (n, 1)))

    @property
    def n_vertices(self) -> int:
        return self.matrix.shape[0] // 4

    @property
    def blocks(self) -> np.ndarray:
        return self.matrix.reshape(-1, 4, 3)


class MetricStats(BaseModel):
    """Summary of a distance distribution"""

    model_config = ConfigDict(frozen=True)

    mean: float = Field(ge=0.0)
    std_dev: float = Field(ge=0.0)
    median: float = Field(ge=0.0)
    max: float = Field(ge=0.0)
    count: int = Field(ge=0)

    @model_validator(mode="after")
    def _ordered(self) -> "MetricStats":
        if self.median > self.max:
            raise ValueError("median exceeds max")
        return self


class EnergyRecord(BaseModel):
    """One row of the fitting energy log"""

    stage: int
    iteration: int
    stiffness: float
    landmark_weight: float
    e_pcl: float
    e_lms: float
    e_edges: float
    e_reg: float
    n_pcl: int = 0
    n_lms: int = 0
    n_edges: int = 0
    max_change: float = 0.0
    # the same quadratic evaluated at the previous transforms
    energy_before: float = 0.0

    @property
    def total(self) -> float:
        return self.e_pcl + self.e_lms + self.e_edges + self.e_reg
