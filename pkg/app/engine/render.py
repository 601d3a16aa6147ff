"""
Software z-buffer renderer producing per-pixel channel stacks, plus the
re-projected supervision labels D', XY', NRM' obtained by applying the
ground-truth pose to the per-pixel object coordinates.
"""
import hashlib
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Tuple

import numpy as np

from app.core.errors import EmptyScene, MissingAbc
from app.core.rng import substream
from app.engine import meshes
from app.engine.geometry import (
    CameraIntrinsics,
    Pose,
    apply_pose,
    backproject_raster,
    pixel_centers,
)
from app.schemas.experiment import BackgroundSpec

logger = logging.getLogger(__name__)

NEAR_PLANE = 1e-6
BARYCENTRIC_EPS = 1e-10
BACKGROUND_GRAY = 0.5


class PEMode(str, Enum):
    NORMALIZED_UV = "normalized_uv"
    SINUSOIDAL = "sinusoidal"


def _readonly(array, dtype=None) -> np.ndarray:
    array = np.array(array, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class ChannelStack:
    """
    Per-pixel rasters of one image or of a patch cropped from it.

    `origin` is the (row, col) of pixel (0, 0) in the full image; cropping
    never relabels plain_uv/pe. `support` marks pixels kept by image-level
    masking (all True for an unmasked stack). `face_index` is the triangle
    hit by the pixel (-1 where no instance surface was hit).
    """

    camera: CameraIntrinsics
    rgb: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    plain_uv: np.ndarray
    xy: np.ndarray
    nrm: np.ndarray
    pe: np.ndarray
    instance_id: np.ndarray
    abc: np.ndarray
    face_index: np.ndarray
    support: np.ndarray
    origin: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        for name, dtype in (("rgb", np.float64), ("depth", np.float64), ("valid", bool),
                            ("plain_uv", np.float64), ("xy", np.float64), ("nrm", np.float64),
                            ("pe", np.float64), ("instance_id", np.int32), ("abc", np.float64),
                            ("face_index", np.int32), ("support", bool)):
            object.__setattr__(self, name, _readonly(getattr(self, name), dtype))
        object.__setattr__(self, "origin", (int(self.origin[0]), int(self.origin[1])))
        shape = self.depth.shape
        for name in ("valid", "instance_id", "face_index", "support"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"Channel '{name}' has shape {getattr(self, name).shape}, expected {shape}")
        for name in ("rgb", "plain_uv", "xy", "nrm", "pe", "abc"):
            if getattr(self, name).shape[:2] != shape:
                raise ValueError(f"Channel '{name}' does not match raster shape {shape}")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape

    def replace(self, **changes) -> "ChannelStack":
        return replace(self, **changes)

    def instance_mask(self, instance_id: int) -> np.ndarray:
        return self.instance_id == instance_id

    def channel_planes(self) -> List[Tuple[str, np.ndarray]]:
        """Named single-channel planes, in export order."""
        planes = [("depth", self.depth), ("valid", self.valid.astype(np.float64)),
                  ("instance_id", self.instance_id.astype(np.float64)),
                  ("face_index", self.face_index.astype(np.float64)),
                  ("support", self.support.astype(np.float64))]
        for name, array, labels in (("rgb", self.rgb, "rgb"), ("plain_uv", self.plain_uv, "uv"),
                                    ("xy", self.xy, "xy"), ("nrm", self.nrm, "xyz"), ("abc", self.abc, "abc")):
            for k, suffix in enumerate(labels):
                planes.append((f"{name}_{suffix}", array[..., k]))
        for k in range(self.pe.shape[-1]):
            planes.append((f"pe_{k}", self.pe[..., k]))
        return planes

    def check_invariants(self, tol_normal: float = 1e-6, tol_xy: float = 1e-9) -> List[str]:
        """Violated render invariants, as human-readable strings (empty when consistent)."""
        problems = []
        if np.any(self.depth[~self.valid] != 0.0):
            problems.append("invalid pixel with non-zero depth")
        surface = self.valid & (self.instance_id > 0)
        if np.any(np.abs(np.linalg.norm(self.nrm[surface], axis=-1) - 1.0) > tol_normal):
            problems.append("instance pixel normal is not unit length")
        expected = backproject_raster(self.camera, self.depth, self.valid, self.origin)[..., :2]
        if np.any(np.abs(expected[self.valid] - self.xy[self.valid]) > tol_xy):
            problems.append("xy channel disagrees with backprojected depth")
        return problems


@dataclass(frozen=True, eq=False)
class SceneInstance:
    mesh: meshes.ModelMesh
    pose: Pose


@dataclass(frozen=True, eq=False)
class Scene:
    camera: CameraIntrinsics
    instances: List[SceneInstance]
    background: BackgroundSpec = field(default_factory=BackgroundSpec)

    def __post_init__(self):
        for k, inst in enumerate(self.instances):
            if inst.pose.translation[2] <= 0:
                raise ValueError(f"Instance {k + 1} ('{inst.mesh.name}') is behind the camera")


@dataclass(frozen=True, eq=False)
class ReprojectedLabels:
    """Noiseless supervision rasters; zero outside `pixels`."""

    dprime: np.ndarray
    xyprime: np.ndarray
    nrmprime: np.ndarray
    pixels: np.ndarray


def position_encoding(u: np.ndarray, v: np.ndarray, camera: CameraIntrinsics,
                      pe_mode: PEMode = PEMode.NORMALIZED_UV, octaves: int = 4) -> np.ndarray:
    un = u / camera.width
    vn = v / camera.height
    mode = PEMode(pe_mode)
    if mode is PEMode.NORMALIZED_UV:
        return np.stack([un, vn], axis=-1)
    channels = []
    for k in range(octaves):
        scale = (2.0 ** k) * np.pi
        channels += [np.sin(scale * un), np.cos(scale * un), np.sin(scale * vn), np.cos(scale * vn)]
    return np.stack(channels, axis=-1)


def compute_normals(depth: np.ndarray, valid: np.ndarray, camera: CameraIntrinsics,
                    origin: Tuple[int, int] = (0, 0)) -> np.ndarray:
    """
    Depth normals from central differences of the backprojected point grid,
    oriented toward the camera. Pixels without a valid 4-neighborhood get (0, 0, 0).
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    normals = np.zeros(depth.shape + (3,), dtype=np.float64)
    if depth.shape[0] < 3 or depth.shape[1] < 3:
        return normals
    points = backproject_raster(camera, depth, valid, origin)
    centre = points[1:-1, 1:-1]
    d_u = (points[1:-1, 2:] - points[1:-1, :-2]) / 2.0
    d_v = (points[2:, 1:-1] - points[:-2, 1:-1]) / 2.0
    cross = np.cross(d_u, d_v)
    norm = np.linalg.norm(cross, axis=-1)
    ok = (valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1]
          & (norm > 0))
    unit = np.zeros_like(cross)
    unit[ok] = cross[ok] / norm[ok][:, None]
    facing_away = np.einsum("...k,...k->...", unit, centre) > 0
    unit[facing_away] *= -1.0
    normals[1:-1, 1:-1] = unit
    return normals


def assemble_channels(stack: ChannelStack, pe_mode: PEMode = PEMode.NORMALIZED_UV) -> ChannelStack:
    """Re-derive plain_uv, xy, nrm and pe from the stack's depth and validity."""
    u, v = pixel_centers(stack.height, stack.width, stack.origin)
    points = backproject_raster(stack.camera, stack.depth, stack.valid, stack.origin)
    return stack.replace(
        plain_uv=np.stack([u, v], axis=-1),
        xy=points[..., :2],
        nrm=compute_normals(stack.depth, stack.valid, stack.camera, stack.origin),
        pe=position_encoding(u, v, stack.camera, pe_mode),
    )


def albedo(name: str) -> np.ndarray:
    digest = hashlib.sha1(name.encode("utf-8")).digest()
    return 0.3 + 0.6 * np.frombuffer(digest[:3], dtype=np.uint8).astype(np.float64) / 255.0


class _Buffers:
    def __init__(self, height: int, width: int):
        self.zbuf = np.full((height, width), np.inf)
        self.instance_id = np.zeros((height, width), dtype=np.int32)
        self.face_index = np.full((height, width), -1, dtype=np.int32)
        self.abc = np.zeros((height, width, 3))
        self.normal = np.zeros((height, width, 3))
        self.albedo = np.full((height, width, 3), BACKGROUND_GRAY)


def _rasterize(mesh: meshes.ModelMesh, pose: Pose, camera: CameraIntrinsics, label: int,
               buffers: _Buffers, color: np.ndarray, record_abc: bool = True):
    height, width = camera.shape
    cam = apply_pose(pose, mesh.vertices)
    z = cam[:, 2]
    safe_z = np.where(z > NEAR_PLANE, z, 1.0)
    us = camera.fx * cam[:, 0] / safe_z + camera.cx
    vs = camera.fy * cam[:, 1] / safe_z + camera.cy
    normals = mesh.face_normals @ pose.rotation.T
    obj = mesh.vertices
    for t, (a, b, c) in enumerate(mesh.triangles):
        za, zb, zc = z[a], z[b], z[c]
        if za <= NEAR_PLANE or zb <= NEAR_PLANE or zc <= NEAR_PLANE:
            continue
        ua, ub, uc = us[a], us[b], us[c]
        va, vb, vc = vs[a], vs[b], vs[c]
        area = (ub - ua) * (vc - va) - (uc - ua) * (vb - va)
        if abs(area) < 1e-12:
            continue
        j0 = max(int(np.ceil(min(ua, ub, uc) - 0.5)), 0)
        j1 = min(int(np.floor(max(ua, ub, uc) - 0.5)), width - 1)
        i0 = max(int(np.ceil(min(va, vb, vc) - 0.5)), 0)
        i1 = min(int(np.floor(max(va, vb, vc) - 0.5)), height - 1)
        if j0 > j1 or i0 > i1:
            continue
        pv, pu = np.meshgrid(np.arange(i0, i1 + 1) + 0.5, np.arange(j0, j1 + 1) + 0.5, indexing="ij")
        w0 = ((ub - pu) * (vc - pv) - (uc - pu) * (vb - pv)) / area
        w1 = ((uc - pu) * (va - pv) - (ua - pu) * (vc - pv)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -BARYCENTRIC_EPS) & (w1 >= -BARYCENTRIC_EPS) & (w2 >= -BARYCENTRIC_EPS)
        if not inside.any():
            continue
        inv_z = w0 / za + w1 / zb + w2 / zc
        depth = np.where(inside, 1.0 / np.where(inside, inv_z, 1.0), np.inf)
        region = buffers.zbuf[i0:i1 + 1, j0:j1 + 1]
        closer = inside & (depth < region)
        if not closer.any():
            continue
        rows, cols = np.nonzero(closer)
        rows_full, cols_full = rows + i0, cols + j0
        d = depth[closer]
        buffers.zbuf[rows_full, cols_full] = d
        buffers.instance_id[rows_full, cols_full] = label
        normal = normals[t]
        if np.dot(normal, cam[a]) > 0:
            normal = -normal
        buffers.normal[rows_full, cols_full] = normal
        buffers.albedo[rows_full, cols_full] = color
        if record_abc:
            lam0 = (w0[closer] / za) * d
            lam1 = (w1[closer] / zb) * d
            lam2 = (w2[closer] / zc) * d
            buffers.abc[rows_full, cols_full] = (lam0[:, None] * obj[a] + lam1[:, None] * obj[b]
                                                 + lam2[:, None] * obj[c])
            buffers.face_index[rows_full, cols_full] = t
        else:
            buffers.abc[rows_full, cols_full] = 0.0
            buffers.face_index[rows_full, cols_full] = -1


def clutter_instances(camera: CameraIntrinsics, background: BackgroundSpec) -> List[SceneInstance]:
    """Seeded background boxes placed between the target objects and the background plane."""
    if background.clutter_count <= 0:
        return []
    rng = substream(background.clutter_seed, None, "clutter")
    far = background.plane_depth if background.plane_depth is not None else 1.5
    items = []
    for k in range(background.clutter_count):
        size = rng.uniform(0.03, 0.1, size=3)
        z = rng.uniform(far - 0.3, far - 0.05)
        u = rng.uniform(0.0, camera.width)
        v = rng.uniform(0.0, camera.height)
        translation = ((u - camera.cx) * z / camera.fx, (v - camera.cy) * z / camera.fy, z)
        pose = Pose.random(rng, translation)
        items.append(SceneInstance(meshes.box(f"clutter_{k}", size=tuple(size), subdivisions=1), pose))
    return items


def render_scene(scene: Scene, pe_mode: PEMode = PEMode.NORMALIZED_UV) -> ChannelStack:
    """
    Rasterize every instance (ids 1..n in list order), the seeded clutter and
    the background plane into a ChannelStack. Nearest surface wins per pixel.
    """
    if not scene.instances:
        raise EmptyScene("Scene has no instances")
    camera = scene.camera
    height, width = camera.shape
    buffers = _Buffers(height, width)
    for label, inst in enumerate(scene.instances, start=1):
        _rasterize(inst.mesh, inst.pose, camera, label, buffers, albedo(inst.mesh.name))
    for item in clutter_instances(camera, scene.background):
        _rasterize(item.mesh, item.pose, camera, 0, buffers, albedo(item.mesh.name), record_abc=False)

    covered = np.isfinite(buffers.zbuf)
    depth = np.where(covered, buffers.zbuf, 0.0)
    valid = covered.copy()
    normal = buffers.normal
    plane = scene.background.plane_depth
    if plane is not None:
        empty = ~covered
        depth[empty] = plane
        valid[empty] = True
        normal[empty] = (0.0, 0.0, -1.0)

    u, v = pixel_centers(height, width)
    points = backproject_raster(camera, depth, valid)
    norm = np.linalg.norm(points, axis=-1, keepdims=True)
    view = np.divide(-points, norm, out=np.zeros_like(points), where=norm > 0)
    shading = 0.3 + 0.7 * np.abs(np.einsum("...k,...k->...", normal, view))
    rgb = np.clip(buffers.albedo * shading[..., None], 0.0, 1.0)
    rgb[~valid] = 0.0

    stack = ChannelStack(
        camera=camera,
        rgb=rgb,
        depth=depth,
        valid=valid,
        plain_uv=np.stack([u, v], axis=-1),
        xy=points[..., :2],
        nrm=normal,
        pe=position_encoding(u, v, camera, pe_mode),
        instance_id=buffers.instance_id,
        abc=buffers.abc,
        face_index=buffers.face_index,
        support=np.ones((height, width), dtype=bool),
    )
    logger.debug(f"Rendered scene with {len(scene.instances)} instances, "
                 f"{int((stack.instance_id > 0).sum())} instance pixels")
    return stack


def reproject_labels(mesh: meshes.ModelMesh, gt: Pose, camera: CameraIntrinsics, abc: np.ndarray,
                     pixels: np.ndarray, face_index: np.ndarray) -> ReprojectedLabels:
    """
    D', XY', NRM' per pixel of `pixels`: (x, y, d) = R*·(a, b, c) + T* and the
    hit face's object-frame normal rotated by R*, oriented toward the camera.
    """
    abc = np.asarray(abc, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=bool)
    face_index = np.asarray(face_index)
    shape = pixels.shape
    selected_abc = abc[pixels]
    selected_face = face_index[pixels]
    if not np.all(np.isfinite(selected_abc)) or np.any(selected_face < 0) \
            or np.any(selected_face >= len(mesh.triangles)):
        raise MissingAbc(f"{int(np.sum(~np.isfinite(selected_abc).all(axis=-1)) + np.sum(selected_face < 0))} "
                         f"pixels of '{mesh.name}' lack object coordinates")
    cam = apply_pose(gt, selected_abc) if len(selected_abc) else np.zeros((0, 3))
    normals = mesh.face_normals[selected_face] @ gt.rotation.T if len(selected_face) else np.zeros((0, 3))
    facing_away = np.einsum("ik,ik->i", normals, cam) > 0
    normals[facing_away] *= -1.0

    dprime = np.zeros(shape)
    xyprime = np.zeros(shape + (2,))
    nrmprime = np.zeros(shape + (3,))
    dprime[pixels] = cam[:, 2]
    xyprime[pixels] = cam[:, :2]
    nrmprime[pixels] = normals
    return ReprojectedLabels(dprime, xyprime, nrmprime, pixels.copy())


def instance_labels(stack: ChannelStack, mesh: meshes.ModelMesh, gt: Pose, instance_id: int) -> ReprojectedLabels:
    """Re-projected labels over one instance's footprint in `stack`."""
    pixels = stack.instance_mask(instance_id)
    return reproject_labels(mesh, gt, stack.camera, stack.abc, pixels, stack.face_index)
