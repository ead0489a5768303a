"""
File Formats Module
PLY / OBJ meshes and point clouds, PFM depth maps, images and JSON documents
"""
import io
import json
import logging
import re
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from config.pipeline_config import ProjectManifest
from src.edges import edge_map_from_mask
from src.errors import ConfigurationError, FormatError
from src.models import (
    CameraPose,
    CorrespondenceTable,
    DepthMap,
    EdgeMap,
    EnergyRecord,
    Intrinsics,
    Keyframe,
    Landmark3D,
    LandmarkObservation,
    PointCloud,
    TriMesh,
)
from utils.helpers import atomic_write_bytes, atomic_write_text

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
DOCUMENT_SCHEMA_VERSION = 1

_PLY_TYPES = {
    'char': 'i1', 'int8': 'i1', 'uchar': 'u1', 'uint8': 'u1',
    'short': 'i2', 'int16': 'i2', 'ushort': 'u2', 'uint16': 'u2',
    'int': 'i4', 'int32': 'i4', 'uint': 'u4', 'uint32': 'u4',
    'float': 'f4', 'float32': 'f4', 'double': 'f8', 'float64': 'f8',
}


# ═══════════════════════════════════════════════════════════
# PLY
# ═══════════════════════════════════════════════════════════

class _PlyElement:
    def __init__(self, name: str, count: int):
        self.name = name
        self.count = count
        self.properties: List[Tuple[str, str]] = []
        self.list_types: Optional[Tuple[str, str]] = None
        self.list_name: Optional[str] = None


def _ply_header(data: bytes, path: PathLike):
    end = data.find(b'end_header')
    if not data.startswith(b'ply') or end < 0:
        raise FormatError("not a PLY file or header not terminated", path=str(path), offset=0)
    body_start = data.index(b'\n', end) + 1 if b'\n' in data[end:] else len(data)
    lines = data[:end].decode('ascii', errors='replace').splitlines()
    fmt = None
    elements: List[_PlyElement] = []
    for lineno, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens or tokens[0] in ('ply', 'comment', 'obj_info'):
            continue
        try:
            if tokens[0] == 'format':
                fmt = tokens[1]
            elif tokens[0] == 'element':
                elements.append(_PlyElement(tokens[1], int(tokens[2])))
            elif tokens[0] == 'property' and tokens[1] == 'list':
                elements[-1].list_types = (_PLY_TYPES[tokens[2]], _PLY_TYPES[tokens[3]])
                elements[-1].list_name = tokens[4]
            elif tokens[0] == 'property':
                elements[-1].properties.append((tokens[2], _PLY_TYPES[tokens[1]]))
            else:
                raise FormatError(f"unexpected header keyword {tokens[0]!r}", path=str(path), line=lineno)
        except (IndexError, KeyError, ValueError) as e:
            if isinstance(e, FormatError):
                raise
            raise FormatError(f"malformed PLY header line {line!r}", path=str(path), line=lineno) from e
    if fmt not in ('ascii', 'binary_little_endian'):
        raise FormatError(f"unsupported PLY format {fmt!r}", path=str(path))
    return fmt, elements, body_start


def _read_binary_element(data: bytes, offset: int, el: _PlyElement, path: PathLike):
    if el.list_types is None:
        dtype = np.dtype([(n, '<' + t) for n, t in el.properties])
        size = dtype.itemsize * el.count
        if offset + size > len(data):
            raise FormatError(f"truncated {el.name} data", path=str(path), offset=len(data))
        return np.frombuffer(data, dtype=dtype, count=el.count, offset=offset), offset + size
    if el.properties:
        raise FormatError(f"mixed list/scalar properties in element {el.name!r}", path=str(path))
    count_t, index_t = el.list_types
    # triangles only: fixed-size records
    dtype = np.dtype([('n', '<' + count_t), ('idx', '<' + index_t, (3,))])
    size = dtype.itemsize * el.count
    if offset + size > len(data):
        raise FormatError(f"truncated {el.name} data", path=str(path), offset=len(data))
    rec = np.frombuffer(data, dtype=dtype, count=el.count, offset=offset)
    bad = np.flatnonzero(rec['n'] != 3)
    if len(bad):
        raise FormatError("only triangle faces are supported", path=str(path),
                          offset=offset + int(bad[0]) * dtype.itemsize)
    return rec['idx'], offset + size


def _read_ascii_elements(data: bytes, offset: int, elements: List[_PlyElement], path: PathLike):
    header_lines = data[:offset].count(b'\n')
    lines = data[offset:].decode('ascii', errors='replace').splitlines()
    cursor = 0
    out = {}
    for el in elements:
        if el.list_types is None:
            rows = np.zeros((el.count, len(el.properties)))
        else:
            rows = np.zeros((el.count, 3), dtype=np.int64)
        for i in range(el.count):
            lineno = header_lines + cursor + 1
            if cursor >= len(lines):
                raise FormatError(f"truncated {el.name} data", path=str(path), line=lineno, offset=len(data))
            tokens = lines[cursor].split()
            cursor += 1
            try:
                if el.list_types is None:
                    rows[i] = [float(t) for t in tokens[:len(el.properties)]]
                    if len(tokens) < len(el.properties):
                        raise ValueError("too few values")
                else:
                    n = int(tokens[0])
                    if n != 3:
                        raise FormatError("only triangle faces are supported", path=str(path), line=lineno)
                    rows[i] = [int(t) for t in tokens[1:4]]
                    if len(tokens) < 4:
                        raise ValueError("too few indices")
            except ValueError as e:
                if isinstance(e, FormatError):
                    raise
                raise FormatError(f"bad {el.name} record {lines[cursor - 1]!r}", path=str(path), line=lineno) from e
        if el.list_types is None:
            out[el.name] = {name: rows[:, k] for k, (name, _) in enumerate(el.properties)}
        else:
            out[el.name] = rows
    return out


def _read_ply(path: PathLike) -> Dict[str, object]:
    data = Path(path).read_bytes()
    fmt, elements, offset = _ply_header(data, path)
    if fmt == 'ascii':
        return _read_ascii_elements(data, offset, elements, path)
    out = {}
    for el in elements:
        values, offset = _read_binary_element(data, offset, el, path)
        if el.list_types is None:
            out[el.name] = {name: values[name] for name, _ in el.properties}
        else:
            out[el.name] = values
    return out


def _vertex_columns(vertex: Dict[str, np.ndarray], names, dtype, path: PathLike) -> Optional[np.ndarray]:
    if not all(n in vertex for n in names):
        return None
    return np.stack([np.asarray(vertex[n], dtype=dtype) for n in names], axis=1)


def _ply_bytes(points: np.ndarray, faces: Optional[np.ndarray], binary: bool,
               extras: List[Tuple[str, str, np.ndarray]]) -> bytes:
    n = len(points)
    columns = [('x', 'f8', points[:, 0]), ('y', 'f8', points[:, 1]), ('z', 'f8', points[:, 2])] + extras
    ply_names = {'f8': 'double', 'f4': 'float', 'u1': 'uchar', 'i4': 'int'}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {n}"]
    header += [f"property {ply_names[t]} {name}" for name, t, _ in columns]
    if faces is not None:
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode('ascii')
    if binary:
        vdt = np.dtype([(name, '<' + t) for name, t, _ in columns])
        vert = np.empty(n, dtype=vdt)
        for name, _, col in columns:
            vert[name] = col
        body = vert.tobytes()
        if faces is not None:
            fdt = np.dtype([('n', 'u1'), ('idx', '<i4', (3,))])
            rec = np.empty(len(faces), dtype=fdt)
            rec['n'] = 3
            rec['idx'] = faces
            body += rec.tobytes()
        return head + body
    buf = io.StringIO()
    for i in range(n):
        buf.write(" ".join(repr(float(col[i])) if t.startswith('f') else str(int(col[i]))
                           for _, t, col in columns) + "\n")
    if faces is not None:
        for f in faces:
            buf.write(f"3 {f[0]} {f[1]} {f[2]}\n")
    return head + buf.getvalue().encode('ascii')


def _color_extras(colors: Optional[np.ndarray]) -> List[Tuple[str, str, np.ndarray]]:
    if colors is None:
        return []
    return [('red', 'u1', colors[:, 0]), ('green', 'u1', colors[:, 1]), ('blue', 'u1', colors[:, 2])]


def save_mesh(path: PathLike, mesh: TriMesh, binary: bool = True) -> Path:
    """Write a mesh as PLY (ascii or binary little-endian) or OBJ, chosen by suffix"""
    path = Path(path)
    if path.suffix.lower() == '.obj':
        return save_obj(path, mesh)
    data = _ply_bytes(mesh.vertices, mesh.faces, binary, _color_extras(mesh.vertex_colors))
    logger.debug("Writing mesh %s (%d vertices)", path, mesh.n_vertices)
    return atomic_write_bytes(path, data)


def load_mesh(path: PathLike) -> TriMesh:
    """Read a PLY or OBJ triangle mesh"""
    path = Path(path)
    if not path.exists():
        raise FormatError("file not found", path=str(path))
    if path.suffix.lower() == '.obj':
        return load_obj(path)
    elements = _read_ply(path)
    vertex = elements.get('vertex')
    if vertex is None:
        raise FormatError("PLY has no vertex element", path=str(path))
    vertices = _vertex_columns(vertex, ('x', 'y', 'z'), np.float64, path)
    if vertices is None:
        raise FormatError("PLY vertex element lacks x/y/z", path=str(path))
    faces = elements.get('face', np.zeros((0, 3), dtype=np.int64))
    colors = _vertex_columns(vertex, ('red', 'green', 'blue'), np.uint8, path)
    try:
        return TriMesh(vertices=vertices, faces=np.asarray(faces, dtype=np.int64), vertex_colors=colors)
    except ValidationError as e:
        raise FormatError(f"invalid mesh: {e.errors()[0]['msg']}", path=str(path)) from e


def save_point_cloud(path: PathLike, cloud: PointCloud, binary: bool = True) -> Path:
    """Write points with optional normals, colors and support counts as PLY"""
    extras: List[Tuple[str, str, np.ndarray]] = []
    if cloud.normals is not None:
        extras += [('nx', 'f8', cloud.normals[:, 0]), ('ny', 'f8', cloud.normals[:, 1]),
                   ('nz', 'f8', cloud.normals[:, 2])]
    extras += _color_extras(cloud.colors)
    if cloud.support_count is not None:
        extras.append(('support', 'i4', cloud.support_count))
    return atomic_write_bytes(path, _ply_bytes(cloud.points, None, binary, extras))


def load_point_cloud(path: PathLike) -> PointCloud:
    """Read a PLY point cloud written by save_point_cloud (or any PLY with x/y/z)"""
    path = Path(path)
    if not path.exists():
        raise FormatError("file not found", path=str(path))
    vertex = _read_ply(path).get('vertex')
    if vertex is None:
        raise FormatError("PLY has no vertex element", path=str(path))
    points = _vertex_columns(vertex, ('x', 'y', 'z'), np.float64, path)
    if points is None:
        raise FormatError("PLY vertex element lacks x/y/z", path=str(path))
    support = vertex.get('support')
    try:
        return PointCloud(points=points,
                          normals=_vertex_columns(vertex, ('nx', 'ny', 'nz'), np.float64, path),
                          colors=_vertex_columns(vertex, ('red', 'green', 'blue'), np.uint8, path),
                          support_count=None if support is None else np.asarray(support, dtype=np.int64))
    except ValidationError as e:
        raise FormatError(f"invalid point cloud: {e.errors()[0]['msg']}", path=str(path)) from e


# ═══════════════════════════════════════════════════════════
# OBJ
# ═══════════════════════════════════════════════════════════

def save_obj(path: PathLike, mesh: TriMesh) -> Path:
    buf = io.StringIO()
    for v in mesh.vertices:
        buf.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
    for f in mesh.faces + 1:
        buf.write(f"f {f[0]} {f[1]} {f[2]}\n")
    return atomic_write_text(path, buf.getvalue())


def load_obj(path: PathLike) -> TriMesh:
    """Read vertices and faces; polygons are fan-triangulated, texture/normal indices ignored"""
    vertices: List[List[float]] = []
    faces: List[List[int]] = []
    text = Path(path).read_text(encoding='utf-8', errors='replace')
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens or tokens[0].startswith('#'):
            continue
        try:
            if tokens[0] == 'v':
                vertices.append([float(t) for t in tokens[1:4]])
                if len(vertices[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif tokens[0] == 'f':
                idx = [int(t.split('/')[0]) for t in tokens[1:]]
                if len(idx) < 3:
                    raise ValueError("face needs 3 vertices")
                idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
                faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
        except ValueError as e:
            raise FormatError(f"bad OBJ record {line!r}: {e}", path=str(path), line=lineno) from e
    try:
        return TriMesh(vertices=np.array(vertices).reshape(-1, 3), faces=np.array(faces, dtype=np.int64).reshape(-1, 3))
    except ValidationError as e:
        raise FormatError(f"invalid mesh: {e.errors()[0]['msg']}", path=str(path)) from e


# ═══════════════════════════════════════════════════════════
# PFM
# ═══════════════════════════════════════════════════════════

def save_pfm(path: PathLike, data: np.ndarray) -> Path:
    """Little-endian PFM (scale -1.0), rows stored bottom to top"""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        kind = b'Pf'
    elif data.ndim == 3 and data.shape[2] == 3:
        kind = b'PF'
    else:
        raise ValueError(f"PFM stores (H, W) or (H, W, 3) arrays, got {data.shape}")
    h, w = data.shape[:2]
    head = kind + b'\n' + f"{w} {h}\n-1.0\n".encode('ascii')
    return atomic_write_bytes(path, head + np.flipud(data).astype('<f4').tobytes())


def load_pfm(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FormatError("file not found", path=str(path))
    data = path.read_bytes()
    match = re.match(rb'(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s', data)
    if not match:
        raise FormatError("malformed PFM header", path=str(path), offset=0)
    channels = 3 if match.group(1) == b'PF' else 1
    w, h = int(match.group(2)), int(match.group(3))
    try:
        scale = float(match.group(4))
    except ValueError as e:
        raise FormatError("malformed PFM scale", path=str(path), offset=match.start(4)) from e
    offset = match.end()
    need = w * h * channels * 4
    if len(data) - offset < need:
        raise FormatError(f"truncated PFM: {len(data) - offset} of {need} data bytes", path=str(path),
                          offset=len(data))
    dtype = '<f4' if scale < 0 else '>f4'
    arr = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=offset)
    arr = arr.reshape((h, w, channels) if channels == 3 else (h, w))
    return np.flipud(arr).astype(np.float64)


def save_depth_map(path: PathLike, depth: DepthMap) -> List[Path]:
    """
    Write depth (+inf on invalid pixels) and, when present, the
    `<stem>.normal.pfm` and `<stem>.cost.pfm` companions
    """
    path = Path(path)
    written = [save_pfm(path, np.where(depth.valid, depth.depth, np.inf))]
    if depth.normal is not None:
        written.append(save_pfm(path.with_suffix('.normal.pfm'), depth.normal))
    if depth.cost is not None:
        written.append(save_pfm(path.with_suffix('.cost.pfm'), depth.cost))
    return written


def load_depth_map(path: PathLike) -> DepthMap:
    """Read a depth PFM and its optional normal / cost companions"""
    path = Path(path)
    depth = load_pfm(path)
    if depth.ndim != 2:
        raise FormatError("depth PFM must have one channel", path=str(path))
    normal = None
    normal_path = path.with_suffix('.normal.pfm')
    if normal_path.exists():
        normal = load_pfm(normal_path)
        length = np.linalg.norm(normal, axis=2, keepdims=True)
        normal = np.divide(normal, length, out=np.zeros_like(normal), where=length > 0.0)
    cost_path = path.with_suffix('.cost.pfm')
    cost = load_pfm(cost_path) if cost_path.exists() else None
    dm = DepthMap.from_depth(depth, cost=cost)
    if normal is not None:
        ok = dm.valid & (np.linalg.norm(normal, axis=2) > 0.5)
        dm = DepthMap(depth=np.where(ok, dm.depth, np.inf), valid=ok, normal=normal, cost=cost)
    return dm


# ═══════════════════════════════════════════════════════════
# IMAGES
# ═══════════════════════════════════════════════════════════

def load_image(path: PathLike) -> np.ndarray:
    """uint8 array, (H, W) for grayscale files and (H, W, 3) otherwise"""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img = img.convert('L') if img.mode in ('L', 'I', 'I;16', '1') else img.convert('RGB')
            return np.asarray(img, dtype=np.uint8).copy()
    except FileNotFoundError as e:
        raise FormatError("image not found", path=str(path)) from e
    except OSError as e:
        raise FormatError(f"unreadable image: {e}", path=str(path)) from e


def save_image(path: PathLike, image: np.ndarray) -> Path:
    """Write an 8-bit grayscale or RGB image (format from the suffix, PNG by default)"""
    path = Path(path)
    arr = np.asarray(image)
    if not np.issubdtype(arr.dtype, np.integer):
        arr = np.clip(np.rint(arr * 255.0), 0, 255)
    buf = io.BytesIO()
    Image.fromarray(arr.astype(np.uint8)).save(buf, format=(path.suffix.lstrip('.') or 'png').upper()
                                               .replace('JPG', 'JPEG'))
    return atomic_write_bytes(path, buf.getvalue())


def load_edge_map(path: PathLike) -> EdgeMap:
    """8-bit grayscale edge image, value >= 128 is an edge"""
    img = load_image(path)
    if img.ndim == 3:
        img = img.max(axis=2)
    return edge_map_from_mask(img >= 128)


def save_edge_map(path: PathLike, edges: EdgeMap) -> Path:
    return save_image(path, np.where(edges.mask, 255, 0).astype(np.uint8))


# ═══════════════════════════════════════════════════════════
# JSON DOCUMENTS
# ═══════════════════════════════════════════════════════════

class Document(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int = DOCUMENT_SCHEMA_VERSION

    @field_validator("schema_version")
    @classmethod
    def _supported(cls, value: int) -> int:
        if value != DOCUMENT_SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {value}")
        return value


class CameraRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    frame_id: int
    image: str
    R: List[float] = Field(min_length=9, max_length=9)
    t: List[float] = Field(min_length=3, max_length=3)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0

    def pose(self) -> CameraPose:
        return CameraPose(rotation=np.array(self.R).reshape(3, 3), translation=np.array(self.t))

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width,
                          height=self.height, k1=self.k1, k2=self.k2)


class CamerasDocument(Document):
    cameras: List[CameraRecord]


class LandmarkPoint(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: int
    x: float
    y: float
    confidence: float = 1.0


class FrameLandmarks(BaseModel):
    model_config = ConfigDict(extra="forbid")

    frame_id: int
    landmarks: List[LandmarkPoint]


class LandmarksDocument(Document):
    frames: List[FrameLandmarks]


class CorrespondenceEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    landmark_id: int
    vertex_index: int


class CorrespondenceDocument(Document):
    entries: List[CorrespondenceEntry]
    excluded_landmark_ids: List[int] = Field(default_factory=lambda: list(range(17)))
    ear_contour_ids: Optional[List[int]] = None


class Landmarks3DDocument(Document):
    landmarks: List[Landmark3D]


def _parse(path: PathLike, model, error=FormatError):
    path = Path(path)
    if not path.exists():
        if error is ConfigurationError:
            raise ConfigurationError(f"file not found: {path}")
        raise FormatError("file not found", path=str(path))
    text = path.read_text(encoding='utf-8')
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        if error is ConfigurationError:
            raise ConfigurationError(f"{path}: invalid JSON at line {e.lineno}, offset {e.pos}: {e.msg}") from e
        raise FormatError(f"invalid JSON: {e.msg}", path=str(path), line=e.lineno, offset=e.pos) from e
    try:
        return model.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first['loc'])
        if error is ConfigurationError:
            raise ConfigurationError(f"{path}: {where}: {first['msg']}") from e
        raise FormatError(f"{where}: {first['msg']}", path=str(path)) from e


def dump_json(data) -> str:
    """Canonical JSON text (sorted keys, 2-space indent, trailing newline)"""
    return json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n"


def save_json(path: PathLike, data) -> Path:
    if isinstance(data, BaseModel):
        data = data.model_dump(mode='json')
    return atomic_write_text(path, dump_json(data))


def load_json(path: PathLike) -> dict:
    path = Path(path)
    if not path.exists():
        raise FormatError("file not found", path=str(path))
    try:
        return json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON: {e.msg}", path=str(path), line=e.lineno, offset=e.pos) from e


def load_cameras(path: PathLike) -> List[CameraRecord]:
    doc = _parse(path, CamerasDocument)
    ids = [c.frame_id for c in doc.cameras]
    if len(set(ids)) != len(ids):
        raise FormatError("duplicate frame ids", path=str(path))
    return doc.cameras


def save_cameras(path: PathLike, cameras: List[CameraRecord]) -> Path:
    return save_json(path, CamerasDocument(cameras=cameras))


def camera_record(kf: Keyframe, image: str) -> CameraRecord:
    i = kf.intrinsics
    return CameraRecord(frame_id=kf.id, image=image, R=kf.pose.rotation.ravel().tolist(),
                        t=kf.pose.translation.tolist(), fx=i.fx, fy=i.fy, cx=i.cx, cy=i.cy,
                        width=i.width, height=i.height, k1=i.k1, k2=i.k2)


def load_keyframes(path: PathLike) -> List[Keyframe]:
    """Cameras document plus the images it references (relative to the document)"""
    path = Path(path)
    keyframes = []
    for rec in load_cameras(path):
        image_path = Path(rec.image) if Path(rec.image).is_absolute() else path.parent / rec.image
        try:
            keyframes.append(Keyframe(id=rec.frame_id, image=load_image(image_path), pose=rec.pose(),
                                      intrinsics=rec.intrinsics()))
        except ValidationError as e:
            raise FormatError(f"camera {rec.frame_id}: {e.errors()[0]['msg']}", path=str(path)) from e
    return sorted(keyframes, key=lambda kf: kf.id)


def load_landmarks(path: PathLike) -> List[LandmarkObservation]:
    doc = _parse(path, LandmarksDocument)
    try:
        return [LandmarkObservation(frame_id=fr.frame_id, landmark_id=p.id, position=(p.x, p.y),
                                    confidence=p.confidence)
                for fr in doc.frames for p in fr.landmarks]
    except ValidationError as e:
        raise FormatError(f"invalid landmark: {e.errors()[0]['msg']}", path=str(path)) from e


def save_landmarks(path: PathLike, observations: List[LandmarkObservation]) -> Path:
    frames: Dict[int, List[LandmarkPoint]] = {}
    for o in observations:
        frames.setdefault(o.frame_id, []).append(
            LandmarkPoint(id=o.landmark_id, x=o.position[0], y=o.position[1], confidence=o.confidence))
    doc = LandmarksDocument(frames=[FrameLandmarks(frame_id=f, landmarks=pts) for f, pts in sorted(frames.items())])
    return save_json(path, doc)


def load_correspondence(path: PathLike) -> CorrespondenceTable:
    doc = _parse(path, CorrespondenceDocument)
    ids = [e.landmark_id for e in doc.entries]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise FormatError(f"duplicate landmark ids {dup}", path=str(path))
    try:
        return CorrespondenceTable(entries={e.landmark_id: e.vertex_index for e in doc.entries},
                                   excluded_landmark_ids=doc.excluded_landmark_ids,
                                   ear_contour_ids=doc.ear_contour_ids)
    except ValidationError as e:
        raise FormatError(e.errors()[0]['msg'], path=str(path)) from e


def save_correspondence(path: PathLike, table: CorrespondenceTable) -> Path:
    doc = CorrespondenceDocument(
        entries=[CorrespondenceEntry(landmark_id=k, vertex_index=v) for k, v in sorted(table.entries.items())],
        excluded_landmark_ids=table.excluded_landmark_ids, ear_contour_ids=table.ear_contour_ids)
    return save_json(path, doc)


def load_landmarks3d(path: PathLike) -> List[Landmark3D]:
    return _parse(path, Landmarks3DDocument).landmarks


def save_landmarks3d(path: PathLike, landmarks: List[Landmark3D]) -> Path:
    return save_json(path, Landmarks3DDocument(landmarks=landmarks))


def save_energy_log(path: PathLike, log: List[EnergyRecord]) -> Path:
    """Energy table as JSON rows"""
    return save_json(path, {"schema_version": DOCUMENT_SCHEMA_VERSION,
                            "rows": [dict(r.model_dump(), total=r.total) for r in log]})


def load_manifest(path: PathLike, check_files: bool = True) -> Tuple[ProjectManifest, Path]:
    """
    Read and validate a project manifest

    Returns:
        (manifest, directory the manifest paths are relative to)

    Raises:
        ConfigurationError: on invalid content or missing referenced files
    """
    path = Path(path)
    manifest = _parse(path, ProjectManifest, error=ConfigurationError)
    root = path.parent
    if check_files:
        for field in ('cameras', 'landmarks', 'correspondence', 'template', 'edge_maps', 'gt_mesh'):
            target = manifest.resolve(root, getattr(manifest, field))
            if target is not None and not target.exists():
                raise ConfigurationError(f"{path}: {field} file {target} does not exist")
    return manifest, root


def save_manifest(path: PathLike, manifest: ProjectManifest) -> Path:
    return save_json(path, manifest)
