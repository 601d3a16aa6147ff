"""
CAD geometry in the object frame: the ModelMesh type, built-in primitive
generators and PLY input/output through trimesh.

Primitives are emitted with outward-facing counter-clockwise winding.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Union

import numpy as np
import trimesh
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ModelMesh:
    name: str
    vertices: np.ndarray  # (N, 3) meters
    triangles: np.ndarray  # (M, 3) vertex indices
    symmetric: bool = False
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(vertices) == 0:
            raise ValueError(f"Mesh '{self.name}' has no vertices")
        if not np.all(np.isfinite(vertices)):
            raise ValueError(f"Mesh '{self.name}' has non-finite vertices")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise ValueError(f"Mesh '{self.name}' has a triangle index outside the vertex range")
        vertices.setflags(write=False)
        triangles.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)
        if not self.diameter > 0:
            raise ValueError(f"Mesh '{self.name}' has zero diameter")

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @cached_property
    def diameter(self) -> float:
        """Maximum pairwise vertex distance."""
        if len(self.vertices) < 2:
            return 0.0
        points = self.vertices
        if len(points) > 64:
            # the farthest pair is always a pair of hull vertices
            try:
                points = points[ConvexHull(points).vertices]
            except QhullError as e:
                logger.debug(f"Mesh '{self.name}': convex hull failed ({e}), using all {len(points)} vertices")
        return float(pdist(points).max())

    @cached_property
    def face_normals(self) -> np.ndarray:
        """Unit normals (M, 3) following the triangle winding; zero for degenerate faces."""
        tri = self.vertices[self.triangles]
        normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        return np.divide(normals, norms, out=np.zeros_like(normals), where=norms > 0)

    @cached_property
    def bounds(self) -> np.ndarray:
        return np.stack([self.vertices.min(axis=0), self.vertices.max(axis=0)])


def _grid_face(origin, edge_u, edge_v, n):
    s = np.linspace(0.0, 1.0, n + 1)
    su, sv = np.meshgrid(s, s, indexing="ij")
    verts = origin + su[..., None] * edge_u + sv[..., None] * edge_v
    verts = verts.reshape(-1, 3)
    tris = []
    for a in range(n):
        for b in range(n):
            i00 = a * (n + 1) + b
            i10 = (a + 1) * (n + 1) + b
            i01 = a * (n + 1) + b + 1
            i11 = (a + 1) * (n + 1) + b + 1
            tris.append((i00, i10, i11))
            tris.append((i00, i11, i01))
    return verts, np.array(tris, dtype=np.int64)


def _merge(parts):
    vertices, triangles, offset = [], [], 0
    for verts, tris in parts:
        vertices.append(verts)
        triangles.append(tris + offset)
        offset += len(verts)
    return np.concatenate(vertices), np.concatenate(triangles)


def _box_parts(size, center=(0.0, 0.0, 0.0), subdivisions=4):
    sx, sy, sz = (float(s) for s in size)
    c = np.asarray(center, dtype=np.float64)
    lo = c - np.array([sx, sy, sz]) / 2.0
    ex, ey, ez = np.array([sx, 0, 0.0]), np.array([0, sy, 0.0]), np.array([0, 0, sz])
    # (origin, edge_u, edge_v) with edge_u x edge_v pointing outward
    faces = [
        (lo, ey, ex),  # z-
        (lo + ez, ex, ey),  # z+
        (lo, ex, ez),  # y-
        (lo + ey, ez, ex),  # y+
        (lo, ez, ey),  # x-
        (lo + ex, ey, ez),  # x+
    ]
    return [_grid_face(o, u, v, subdivisions) for o, u, v in faces]


def box(name: str = "box", size=(0.12, 0.08, 0.05), subdivisions: int = 4, symmetric: bool = False) -> ModelMesh:
    vertices, triangles = _merge(_box_parts(size, subdivisions=subdivisions))
    return ModelMesh(name, vertices, triangles, symmetric, {"kind": "box", "size": list(size)})


def square(name: str = "square", half_side: float = 1.0) -> ModelMesh:
    """Planar square {(±h, ±h, 0)} facing -z; 4-fold symmetric."""
    h = float(half_side)
    vertices = np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]])
    triangles = np.array([[0, 2, 1], [0, 3, 2]])
    return ModelMesh(name, vertices, triangles, True, {"kind": "square", "half_side": h})


def _ring(radius, z, segments):
    angles = 2.0 * np.pi * np.arange(segments) / segments
    return np.stack([radius * np.cos(angles), radius * np.sin(angles), np.full(segments, z)], axis=1)


def _revolve(profile, segments):
    """
    Surface of revolution about the z-axis from a (radius, z) profile ordered
    bottom to top. Zero radii at the ends collapse to pole vertices.
    """
    vertices, rings = [], []
    for radius, z in profile:
        if radius <= 0:
            rings.append([len(vertices)])
            vertices.append([0.0, 0.0, z])
        else:
            start = len(vertices)
            vertices.extend(_ring(radius, z, segments).tolist())
            rings.append(list(range(start, start + segments)))
    triangles = []
    for lower, upper in zip(rings[:-1], rings[1:]):
        if len(lower) == 1 and len(upper) == 1:
            continue
        for k in range(segments):
            k1 = (k + 1) % segments
            if len(lower) == 1:
                triangles.append((lower[0], upper[k1], upper[k]))
            elif len(upper) == 1:
                triangles.append((lower[k], lower[k1], upper[0]))
            else:
                triangles.append((lower[k], lower[k1], upper[k1]))
                triangles.append((lower[k], upper[k1], upper[k]))
    return np.array(vertices, dtype=np.float64), np.array(triangles, dtype=np.int64)


def cylinder(name: str = "cylinder", radius: float = 0.035, height: float = 0.12,
             segments: int = 32, rings: int = 4, symmetric: bool = True) -> ModelMesh:
    half = height / 2.0
    profile = [(0.0, -half)]
    profile += [(radius, z) for z in np.linspace(-half, half, rings + 1)]
    profile += [(0.0, half)]
    vertices, triangles = _revolve(profile, segments)
    return ModelMesh(name, vertices, triangles, symmetric,
                     {"kind": "cylinder", "radius": radius, "height": height})


def can(name: str = "can", radius: float = 0.03, height: float = 0.1,
        segments: int = 32, cap_rings: int = 4, symmetric: bool = True) -> ModelMesh:
    """Cylinder of total height `height` closed by hemispherical caps."""
    half = max(height / 2.0 - radius, 0.0)
    profile = []
    for t in np.linspace(-np.pi / 2, 0.0, cap_rings + 1):
        profile.append((radius * np.cos(t), -half + radius * np.sin(t)))
    for t in np.linspace(0.0, np.pi / 2, cap_rings + 1):
        profile.append((radius * np.cos(t), half + radius * np.sin(t)))
    profile[0] = (0.0, profile[0][1])
    profile[-1] = (0.0, profile[-1][1])
    vertices, triangles = _revolve(profile, segments)
    return ModelMesh(name, vertices, triangles, symmetric,
                     {"kind": "can", "radius": radius, "height": height})


def bracket(name: str = "bracket", length: float = 0.1, height: float = 0.08,
            width: float = 0.04, thickness: float = 0.015, subdivisions: int = 4) -> ModelMesh:
    """L-shaped bracket built from a base plate and an upright plate."""
    base = _box_parts((length, width, thickness),
                      center=(0.0, 0.0, -height / 2.0 + thickness / 2.0), subdivisions=subdivisions)
    upright = _box_parts((thickness, width, height - thickness),
                         center=(-length / 2.0 + thickness / 2.0, 0.0, thickness / 2.0),
                         subdivisions=subdivisions)
    vertices, triangles = _merge(base + upright)
    return ModelMesh(name, vertices, triangles, False,
                     {"kind": "bracket", "length": length, "height": height})


PRIMITIVES = {
    "box": box,
    "cylinder": cylinder,
    "can": can,
    "bracket": bracket,
    "square": square,
}


def read_ply(path: Union[str, Path], name: str = None, symmetric: bool = False) -> ModelMesh:
    """Load a triangle mesh (PLY or anything else trimesh reads) into a ModelMesh."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Mesh file not found: {path}")
    loaded = trimesh.load(path, force="mesh", process=False)
    if not isinstance(loaded, trimesh.Trimesh) or len(loaded.vertices) == 0:
        raise ValueError(f"{path} does not contain a triangle mesh")
    logger.info(f"Loaded {path.name}: {len(loaded.vertices)} vertices, {len(loaded.faces)} faces")
    return ModelMesh(name or path.stem, np.asarray(loaded.vertices), np.asarray(loaded.faces), symmetric,
                     {"kind": "ply", "path": str(path)})


def write_ply(mesh: ModelMesh, path: Union[str, Path]) -> Path:
    """ASCII PLY with vertex order and winding preserved."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.triangles, process=False).export(
        path, file_type="ply", encoding="ascii")
    return path
