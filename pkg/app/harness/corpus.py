"""
Scene corpus: deterministic scene layout, clean render, corruption and
oracle annotations for one scene index.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import TypeAdapter

from app.core.rng import substream
from app.engine import meshes as mesh_lib
from app.engine.geometry import Pose
from app.engine.meshes import ModelMesh
from app.engine.noise import inject_clutter, inject_depth_error, inject_holes
from app.engine.pipeline import InstanceAnnotation, oracle_annotations
from app.engine.render import ChannelStack, PEMode, Scene, SceneInstance, assemble_channels, render_scene
from app.schemas.experiment import ExperimentConfig, MeshDescriptor, MeshKind, NoiseSpec

logger = logging.getLogger(__name__)

# fraction of the image width/height kept free around the placement region
PLACEMENT_BORDER = 0.2


def build_mesh(descriptor: MeshDescriptor) -> ModelMesh:
    if descriptor.kind is MeshKind.PLY:
        return mesh_lib.read_ply(descriptor.path, name=descriptor.name, symmetric=bool(descriptor.symmetric))
    mesh = mesh_lib.PRIMITIVES[descriptor.kind.value](name=descriptor.name, **descriptor.params)
    if descriptor.symmetric is not None and mesh.symmetric != descriptor.symmetric:
        mesh = ModelMesh(mesh.name, mesh.vertices, mesh.triangles, descriptor.symmetric, mesh.metadata)
    return mesh


@lru_cache(maxsize=8)
def _meshes_for(descriptors_json: str) -> Tuple[ModelMesh, ...]:
    descriptors = TypeAdapter(List[MeshDescriptor]).validate_json(descriptors_json)
    return tuple(build_mesh(d) for d in descriptors)


def build_meshes(cfg: ExperimentConfig) -> Dict[str, ModelMesh]:
    """Meshes by class name, in config order (cached per descriptor list)."""
    key = TypeAdapter(List[MeshDescriptor]).dump_json(cfg.meshes).decode("utf-8")
    return {m.name: m for m in _meshes_for(key)}


@dataclass(frozen=True, eq=False)
class SceneData:
    index: int
    scene: Scene
    clean: ChannelStack
    noisy: ChannelStack
    annotations: List[InstanceAnnotation]

    def mesh_of(self, instance_id: int) -> ModelMesh:
        return self.scene.instances[instance_id - 1].mesh

    def pose_of(self, instance_id: int) -> Pose:
        return self.scene.instances[instance_id - 1].pose


def layout_scene(cfg: ExperimentConfig, index: int, meshes: Dict[str, ModelMesh]) -> Scene:
    """
    Instance k of scene i uses mesh (i + k) mod n, a uniformly random rotation
    and a translation through a random pixel of its own horizontal slot.
    """
    rng = substream(cfg.seed, index, "scene")
    camera = cfg.camera
    names = list(meshes)
    count = cfg.instances_per_scene
    lo, hi = cfg.object_depth_range
    u_lo, u_hi = PLACEMENT_BORDER * camera.width, (1.0 - PLACEMENT_BORDER) * camera.width
    slot = (u_hi - u_lo) / count
    instances = []
    for k in range(count):
        mesh = meshes[names[(index + k) % len(names)]]
        z = rng.uniform(lo, hi)
        u = rng.uniform(u_lo + k * slot, u_lo + (k + 1) * slot)
        v = rng.uniform(PLACEMENT_BORDER * camera.height, (1.0 - PLACEMENT_BORDER) * camera.height)
        translation = ((u - camera.cx) * z / camera.fx, (v - camera.cy) * z / camera.fy, z)
        instances.append(SceneInstance(mesh, Pose.random(rng, translation)))
    background = cfg.background.model_copy(update={"clutter_seed": int(rng.integers(0, 2 ** 31))})
    return Scene(camera, instances, background)


def corrupt(cfg: ExperimentConfig, index: int, clean: ChannelStack, noise: Optional[NoiseSpec] = None) -> ChannelStack:
    """inject_holes -> inject_depth_error -> inject_clutter, then sensor-style channel re-derivation."""
    noise = cfg.noise if noise is None else noise
    stack = inject_holes(clean, noise, substream(cfg.seed, index, "holes"))
    stack = inject_depth_error(stack, noise, substream(cfg.seed, index, "depth"))
    stack = inject_clutter(stack, noise, substream(cfg.seed, index, "clutter"))
    return assemble_channels(stack, PEMode(cfg.pe_mode))


def hole_only(noise: NoiseSpec) -> NoiseSpec:
    """The "synthetic" noise regime: holes without numerical error or clutter."""
    return noise.model_copy(update={"gaussian_sigma": 0.0, "quantization_step": 0.0, "depth_scale_error": 0.0,
                                    "depth_offset": 0.0, "clutter_count": 0})


def prepare_scene(cfg: ExperimentConfig, index: int, noise: Optional[NoiseSpec] = None) -> SceneData:
    meshes = build_meshes(cfg)
    scene = layout_scene(cfg, index, meshes)
    clean = render_scene(scene, PEMode(cfg.pe_mode))
    noisy = corrupt(cfg, index, clean, noise)
    annotations = [a for a in oracle_annotations(clean) if a.area >= cfg.min_visible_pixels]
    logger.debug(f"Scene {index}: {len(annotations)} of {len(scene.instances)} instances visible")
    return SceneData(index, scene, clean, noisy, annotations)


def crop_raster(array: np.ndarray, patch: ChannelStack) -> np.ndarray:
    """The full-image raster region covered by `patch`."""
    r0, c0 = patch.origin
    return array[r0:r0 + patch.height, c0:c0 + patch.width]
